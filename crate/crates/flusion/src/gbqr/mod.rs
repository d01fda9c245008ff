//! Gradient-boosted quantile regression with season-level bagging.
//!
//! Each quantile level gets its own booster trained on the pinball
//! pseudo-gradient. Trees grow leaf-wise on binned features; after growth,
//! every leaf is renewed to an exact empirical-quantile minimizer of the
//! residual pinball loss within it, which is what makes the additive model target a
//! quantile rather than the mean. An ensemble bags boosters over seasons
//! and reports the per-level median across bags.

pub mod tree;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core::{ForecastTask, LocationRegistry, QuantileForecast, QuantileLevels, SeriesKey};
use crate::error::{FlusionError, Result};
use crate::features::{build_feature_matrix, FeatureRow, FeatureSchema};
use crate::stats;
use crate::transform::{inverse_standardize, TransformedData};
use tree::{grow_tree, BinnedMatrix, GrowthParams, Node, RegressionTree};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Fraction of seasons drawn (without replacement) into each bag.
pub const BAG_SEASON_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbqrHyperparams {
    pub num_rounds: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_leaf_count: usize,
    pub min_split_gain: f64,
}

impl Default for GbqrHyperparams {
    fn default() -> Self {
        GbqrHyperparams {
            num_rounds: 100,
            learning_rate: 0.1,
            max_leaves: 31,
            min_leaf_count: 20,
            min_split_gain: 0.0,
        }
    }
}

/// Model variants. Row filtering (`OnlyNhsn`, `ByLocation`) and alternate
/// preprocessing (`NoTransform`, `NoReportingAdj`) happen upstream when the
/// training data is assembled; the variant is carried here so the fitted
/// model records what it was trained as, and `NoLevel` additionally masks
/// the location/scale/population columns out of split finding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GbqrVariant {
    Full,
    NoLevel,
    OnlyNhsn,
    ByLocation(String),
    NoTransform,
    NoReportingAdj,
}

impl GbqrVariant {
    pub fn name(&self) -> &'static str {
        match self {
            GbqrVariant::Full => "full",
            GbqrVariant::NoLevel => "no_level",
            GbqrVariant::OnlyNhsn => "only_nhsn",
            GbqrVariant::ByLocation(_) => "by_location",
            GbqrVariant::NoTransform => "no_transform",
            GbqrVariant::NoReportingAdj => "no_reporting_adj",
        }
    }

    pub fn feature_mask(&self, schema: &FeatureSchema) -> Vec<bool> {
        match self {
            GbqrVariant::NoLevel => schema.non_level_mask(),
            _ => vec![true; schema.len()],
        }
    }
}

pub fn pinball_loss(level: f64, y: f64, f: f64) -> f64 {
    if y < f {
        (1.0 - level) * (f - y)
    } else {
        level * (y - f)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostedQuantileModel {
    pub level: f64,
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
    /// Mean training pinball loss after each boosting round.
    pub train_loss: Vec<f64>,
}

impl BoostedQuantileModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut f = self.base_score;
        for tree in &self.trees {
            f += self.learning_rate * tree.predict(x);
        }
        f
    }
}

fn fit_binned(
    binned: &BinnedMatrix,
    ys: &[f64],
    level: f64,
    hp: &GbqrHyperparams,
    allowed: &[bool],
) -> Result<BoostedQuantileModel> {
    if !(0.0..1.0).contains(&level) || level == 0.0 {
        return Err(FlusionError::Domain(format!(
            "quantile level must be in (0, 1), got {level}"
        )));
    }
    if ys.is_empty() {
        return Err(FlusionError::InsufficientData(
            "no training rows for boosting".into(),
        ));
    }
    let growth = GrowthParams {
        max_leaves: hp.max_leaves,
        min_leaf_count: hp.min_leaf_count,
        min_split_gain: hp.min_split_gain,
    };
    let base_score = stats::pinball_minimizer(ys, level);
    let mut f = vec![base_score; ys.len()];
    let mut trees = Vec::with_capacity(hp.num_rounds);
    let mut train_loss = Vec::with_capacity(hp.num_rounds);
    let mut grads = vec![0.0f64; ys.len()];

    for _ in 0..hp.num_rounds {
        for (i, g) in grads.iter_mut().enumerate() {
            *g = if ys[i] < f[i] { level - 1.0 } else { level };
        }
        let mut grown = grow_tree(binned, &grads, allowed, &growth);
        for (slot, rows) in &grown.leaf_rows {
            let residuals: Vec<f64> = rows.iter().map(|&r| ys[r as usize] - f[r as usize]).collect();
            let value = stats::pinball_minimizer(&residuals, level);
            grown.tree.nodes[*slot] = Node::Leaf { value };
            for &r in rows {
                f[r as usize] += hp.learning_rate * value;
            }
        }
        train_loss.push(
            ys.iter()
                .zip(&f)
                .map(|(&y, &fi)| pinball_loss(level, y, fi))
                .sum::<f64>()
                / ys.len() as f64,
        );
        trees.push(grown.tree);
    }
    Ok(BoostedQuantileModel {
        level,
        base_score,
        learning_rate: hp.learning_rate,
        trees,
        train_loss,
    })
}

/// Fit one booster on rows that already carry targets.
pub fn fit_boosted_quantile(
    rows: &[FeatureRow],
    level: f64,
    hp: &GbqrHyperparams,
    allowed: &[bool],
) -> Result<BoostedQuantileModel> {
    let ys = targets_of(rows)?;
    let binned = BinnedMatrix::from_rows(rows.iter().map(|r| r.x.as_slice()), allowed.len());
    fit_binned(&binned, &ys, level, hp, allowed)
}

fn targets_of(rows: &[FeatureRow]) -> Result<Vec<f64>> {
    rows.iter()
        .map(|r| {
            r.y.ok_or_else(|| {
                FlusionError::InsufficientData("training row without target".into())
            })
        })
        .collect()
}

/// A bagged set of per-level boosters plus everything needed to reproduce
/// the fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BagEnsemble {
    pub format_version: u32,
    pub variant: GbqrVariant,
    pub levels: QuantileLevels,
    pub hyperparams: GbqrHyperparams,
    pub master_seed: u64,
    pub num_bags: usize,
    pub bag_seeds: Vec<u64>,
    /// Season labels each bag was trained on.
    pub bag_seasons: Vec<Vec<String>>,
    pub feature_names: Vec<String>,
    /// models[bag][level_index]
    pub models: Vec<Vec<BoostedQuantileModel>>,
}

/// Fit `num_bags` bags, each on ceil(0.7 * S) of the S training seasons
/// drawn without replacement. Bag seeds derive from the master seed by bag
/// index, so the result is independent of thread count.
pub fn fit_bagged(
    rows: &[FeatureRow],
    levels: &QuantileLevels,
    variant: &GbqrVariant,
    schema: &FeatureSchema,
    hp: &GbqrHyperparams,
    num_bags: usize,
    master_seed: u64,
) -> Result<BagEnsemble> {
    let allowed = variant.feature_mask(schema);
    if allowed.len() != schema.len() {
        return Err(FlusionError::Alignment(
            "feature mask length does not match schema".into(),
        ));
    }
    let names = (0..schema.len()).map(|i| schema.name(i).to_string()).collect();
    fit_bagged_masked(rows, levels, variant, &allowed, names, hp, num_bags, master_seed)
}

/// Bagged fit with an explicit feature mask and names, for feature spaces
/// other than the standard schema.
#[allow(clippy::too_many_arguments)]
pub fn fit_bagged_masked(
    rows: &[FeatureRow],
    levels: &QuantileLevels,
    variant: &GbqrVariant,
    allowed: &[bool],
    feature_names: Vec<String>,
    hp: &GbqrHyperparams,
    num_bags: usize,
    master_seed: u64,
) -> Result<BagEnsemble> {
    if num_bags == 0 {
        return Err(FlusionError::Config("num_bags must be positive".into()));
    }
    let seasons: Vec<String> = rows
        .iter()
        .map(|r| r.season.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if seasons.len() < 2 {
        return Err(FlusionError::InsufficientData(format!(
            "season bagging needs at least 2 seasons, found {}",
            seasons.len()
        )));
    }
    let per_bag = (BAG_SEASON_FRACTION * seasons.len() as f64).ceil() as usize;
    let bag_seeds: Vec<u64> = (0..num_bags)
        .map(|b| stats::derive_seed(master_seed, b as u64))
        .collect();

    let fits: Vec<Result<(Vec<String>, Vec<BoostedQuantileModel>)>> = bag_seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut chosen: Vec<String> = sample(&mut rng, seasons.len(), per_bag)
                .into_iter()
                .map(|i| seasons[i].clone())
                .collect();
            chosen.sort();
            let subset: Vec<&FeatureRow> = rows
                .iter()
                .filter(|r| chosen.binary_search(&r.season).is_ok())
                .collect();
            let ys = subset
                .iter()
                .map(|r| {
                    r.y.ok_or_else(|| {
                        FlusionError::InsufficientData("training row without target".into())
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let binned =
                BinnedMatrix::from_rows(subset.iter().map(|r| r.x.as_slice()), allowed.len());
            let models = levels
                .levels
                .iter()
                .map(|&level| fit_binned(&binned, &ys, level, hp, allowed))
                .collect::<Result<Vec<_>>>()?;
            Ok((chosen, models))
        })
        .collect();

    let mut bag_seasons = Vec::with_capacity(num_bags);
    let mut models = Vec::with_capacity(num_bags);
    for fit in fits {
        let (chosen, bag_models) = fit?;
        bag_seasons.push(chosen);
        models.push(bag_models);
    }
    Ok(BagEnsemble {
        format_version: MODEL_FORMAT_VERSION,
        variant: variant.clone(),
        levels: levels.clone(),
        hyperparams: hp.clone(),
        master_seed,
        num_bags,
        bag_seeds,
        bag_seasons,
        feature_names,
        models,
    })
}

impl BagEnsemble {
    /// Median across bags of the level's booster output (difference scale).
    pub fn predict_value(&self, x: &[f64], level_index: usize) -> f64 {
        let preds: Vec<f64> = self
            .models
            .iter()
            .map(|bag| bag[level_index].predict(x))
            .collect();
        stats::median(&preds)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| FlusionError::Format(format!("model serialization failed: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BagEnsemble> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| FlusionError::Format(format!("model deserialization failed: {e}")))
    }
}

/// Forecast the given tasks on the natural (count) scale. Per level, the
/// predicted standardized difference is added back to the last observed
/// standardized value and inverted through the task's transform params;
/// quantile crossing is repaired by sorting.
pub fn predict_tasks(
    ensemble: &BagEnsemble,
    data: &TransformedData,
    registry: &LocationRegistry,
    tasks: &[ForecastTask],
) -> Result<Vec<QuantileForecast>> {
    let rows = build_feature_matrix(data, registry, tasks)?;
    let mut forecasts = Vec::with_capacity(rows.len());
    for row in rows {
        let key = SeriesKey::new(row.task.source, row.task.location.clone());
        let anchor = row.task.reference_date.add_weeks(-1);
        let last = data.value(&key, anchor).ok_or_else(|| {
            FlusionError::InsufficientData(format!(
                "no observation at {anchor} to anchor forecast for {key}"
            ))
        })?;
        let params = data
            .params(&key)
            .ok_or_else(|| FlusionError::Lookup(format!("no transform params for {key}")))?;
        let values = (0..ensemble.levels.len())
            .map(|k| inverse_standardize(last + ensemble.predict_value(&row.x, k), params))
            .collect();
        let mut fc = QuantileForecast {
            task: row.task,
            values,
        };
        fc.sort_repair();
        forecasts.push(fc);
    }
    Ok(forecasts)
}

/// Split-count importance: for each feature, the total number of splits on
/// it across all bags, levels, and trees, divided by the number of fitted
/// boosters. Sorted descending, ties by column order.
pub fn feature_importance(ensemble: &BagEnsemble) -> Vec<(String, f64)> {
    let mut counts = vec![0u64; ensemble.feature_names.len()];
    let mut num_fits = 0usize;
    for bag in &ensemble.models {
        for model in bag {
            num_fits += 1;
            for tree in &model.trees {
                tree.accumulate_split_counts(&mut counts);
            }
        }
    }
    let denom = num_fits.max(1) as f64;
    let mut out: Vec<(String, f64)> = ensemble
        .feature_names
        .iter()
        .zip(&counts)
        .map(|(name, &c)| (name.clone(), c as f64 / denom))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}
