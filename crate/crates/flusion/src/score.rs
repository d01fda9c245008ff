//! Forecast evaluation: quantile scores, WIS, MAE, interval coverage,
//! one-sided coverage differentials, the pairwise tournament of relative
//! scores, and the revision-sensitivity task filter.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::core::{ForecastTask, QuantileForecast, QuantileLevels};
use crate::error::{FlusionError, Result};
use crate::ingest::Dataset;

/// Floor applied to scores before taking logs in geometric means.
const GEOMEAN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ScoredTask {
    pub task: ForecastTask,
    pub forecast: QuantileForecast,
    pub truth: f64,
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub model: String,
    pub task_count: usize,
    pub mwis: f64,
    pub mae: f64,
    pub coverage_50: f64,
    pub coverage_95: f64,
    /// delta_k = empirical one-sided coverage minus nominal, per level.
    pub coverage_differential: Vec<f64>,
    pub rmwis: Option<f64>,
    pub rmae: Option<f64>,
}

/// Pinball loss of quantile `q` at level `alpha` against truth `z`.
pub fn quantile_score(q: f64, z: f64, alpha: f64) -> f64 {
    alpha * (z - q).max(0.0) + (1.0 - alpha) * (q - z).max(0.0)
}

/// Weighted interval score: mean over levels of twice the quantile score.
pub fn wis(forecast: &QuantileForecast, z: f64, levels: &QuantileLevels) -> Result<f64> {
    if forecast.values.len() != levels.len() {
        return Err(FlusionError::Alignment(format!(
            "forecast has {} values for {} levels",
            forecast.values.len(),
            levels.len()
        )));
    }
    if !forecast.is_nondecreasing() {
        return Err(FlusionError::Domain(
            "WIS of a non-monotone forecast; repair quantiles upstream".into(),
        ));
    }
    let sum: f64 = forecast
        .values
        .iter()
        .zip(&levels.levels)
        .map(|(&q, &a)| 2.0 * quantile_score(q, z, a))
        .sum();
    Ok(sum / levels.len() as f64)
}

fn require_nonempty(tasks: &[ScoredTask]) -> Result<()> {
    if tasks.is_empty() {
        Err(FlusionError::UndefinedScore(
            "score over an empty task set".into(),
        ))
    } else {
        Ok(())
    }
}

/// Mean WIS over tasks.
pub fn mwis(tasks: &[ScoredTask], levels: &QuantileLevels) -> Result<f64> {
    require_nonempty(tasks)?;
    let mut sum = 0.0;
    for t in tasks {
        sum += wis(&t.forecast, t.truth, levels)?;
    }
    Ok(sum / tasks.len() as f64)
}

/// Mean absolute error of the median quantile.
pub fn mae(tasks: &[ScoredTask], levels: &QuantileLevels) -> Result<f64> {
    require_nonempty(tasks)?;
    let m = levels.median_index();
    Ok(tasks
        .iter()
        .map(|t| (t.forecast.values[m] - t.truth).abs())
        .sum::<f64>()
        / tasks.len() as f64)
}

fn level_index(levels: &QuantileLevels, alpha: f64) -> Result<usize> {
    levels
        .levels
        .iter()
        .position(|&a| (a - alpha).abs() < 1e-12)
        .ok_or_else(|| FlusionError::UndefinedScore(format!("level {alpha} not in scheme")))
}

/// Fraction of tasks whose truth lies inside the central interval of the
/// given nominal coverage (e.g. 0.95 uses the 0.025/0.975 quantiles).
pub fn interval_coverage(
    tasks: &[ScoredTask],
    nominal: f64,
    levels: &QuantileLevels,
) -> Result<f64> {
    require_nonempty(tasks)?;
    let lo = level_index(levels, (1.0 - nominal) / 2.0)?;
    let hi = level_index(levels, (1.0 + nominal) / 2.0)?;
    let inside = tasks
        .iter()
        .filter(|t| t.forecast.values[lo] <= t.truth && t.truth <= t.forecast.values[hi])
        .count();
    Ok(inside as f64 / tasks.len() as f64)
}

/// One-sided coverage differential per level:
/// delta_k = mean 1{z_i <= q_{i,k}} - alpha_k.
pub fn quantile_coverage_differential(
    tasks: &[ScoredTask],
    levels: &QuantileLevels,
) -> Result<Vec<f64>> {
    require_nonempty(tasks)?;
    Ok(levels
        .levels
        .iter()
        .enumerate()
        .map(|(k, &alpha)| {
            let covered = tasks
                .iter()
                .filter(|t| t.truth <= t.forecast.values[k])
                .count();
            covered as f64 / tasks.len() as f64 - alpha
        })
        .collect())
}

/// All headline metrics for one model.
pub fn score_report(
    model: &str,
    tasks: &[ScoredTask],
    levels: &QuantileLevels,
) -> Result<ScoreReport> {
    Ok(ScoreReport {
        model: model.to_string(),
        task_count: tasks.len(),
        mwis: mwis(tasks, levels)?,
        mae: mae(tasks, levels)?,
        coverage_50: interval_coverage(tasks, 0.50, levels)?,
        coverage_95: interval_coverage(tasks, 0.95, levels)?,
        coverage_differential: quantile_coverage_differential(tasks, levels)?,
        rmwis: None,
        rmae: None,
    })
}

fn geometric_mean(values: &[f64]) -> f64 {
    let sum: f64 = values.iter().map(|v| v.max(GEOMEAN_FLOOR).ln()).sum();
    (sum / values.len() as f64).exp()
}

/// Relative MWIS and MAE via the pairwise tournament: each model's theta is
/// the geometric mean over opponents of mean-score ratios on the tasks both
/// models forecast; relative scores divide by the baseline's theta. Pairs
/// with no shared tasks are skipped with a warning; a model with no
/// comparisons at all is left unscored.
pub fn pairwise_tournament(
    models: &[(&str, &[ScoredTask])],
    baseline: &str,
    levels: &QuantileLevels,
) -> Result<BTreeMap<String, (Option<f64>, Option<f64>)>> {
    if models.len() < 2 {
        return Err(FlusionError::UndefinedScore(
            "pairwise tournament needs at least 2 models".into(),
        ));
    }
    if !models.iter().any(|(name, _)| *name == baseline) {
        return Err(FlusionError::UndefinedScore(format!(
            "baseline model {baseline} not among scored models"
        )));
    }
    // per-task scores, indexed for overlap lookups
    let mut per_model: Vec<(&str, BTreeMap<&ForecastTask, (f64, f64)>)> = Vec::new();
    for (name, tasks) in models {
        let mut index = BTreeMap::new();
        for t in *tasks {
            let w = wis(&t.forecast, t.truth, levels)?;
            let ae = (t.forecast.values[levels.median_index()] - t.truth).abs();
            index.insert(&t.task, (w, ae));
        }
        per_model.push((name, index));
    }

    let mut thetas: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for (m, (name_m, index_m)) in per_model.iter().enumerate() {
        let mut wis_ratios = Vec::new();
        let mut mae_ratios = Vec::new();
        for (o, (name_o, index_o)) in per_model.iter().enumerate() {
            if m == o {
                continue;
            }
            let shared: Vec<&ForecastTask> = index_m
                .keys()
                .filter(|t| index_o.contains_key(*t))
                .copied()
                .collect();
            if shared.is_empty() {
                eprintln!("warning: models {name_m} and {name_o} share no tasks; pair excluded");
                continue;
            }
            let n = shared.len() as f64;
            let (mut wm, mut wo, mut am, mut ao) = (0.0, 0.0, 0.0, 0.0);
            for t in &shared {
                let (w1, a1) = index_m[*t];
                let (w2, a2) = index_o[*t];
                wm += w1 / n;
                wo += w2 / n;
                am += a1 / n;
                ao += a2 / n;
            }
            wis_ratios.push(wm.max(GEOMEAN_FLOOR) / wo.max(GEOMEAN_FLOOR));
            mae_ratios.push(am.max(GEOMEAN_FLOOR) / ao.max(GEOMEAN_FLOOR));
        }
        let theta = if wis_ratios.is_empty() {
            (None, None)
        } else {
            (
                Some(geometric_mean(&wis_ratios)),
                Some(geometric_mean(&mae_ratios)),
            )
        };
        thetas.insert(name_m.to_string(), theta);
    }

    let (base_wis, base_mae) = thetas[baseline];
    let (base_wis, base_mae) = (
        base_wis.ok_or_else(|| {
            FlusionError::UndefinedScore("baseline has no tournament comparisons".into())
        })?,
        base_mae.ok_or_else(|| {
            FlusionError::UndefinedScore("baseline has no tournament comparisons".into())
        })?,
    );
    Ok(thetas
        .into_iter()
        .map(|(name, (tw, tm))| {
            (
                name,
                (tw.map(|t| t / base_wis), tm.map(|t| t / base_mae)),
            )
        })
        .collect())
}

/// Drop tasks whose anchor week d-1 saw a reporting revision of at least
/// `threshold` admissions at the task's location. An empty revision log
/// makes this a no-op with a warning.
pub fn revision_filter(
    tasks: Vec<ScoredTask>,
    ds: &Dataset,
    threshold: f64,
) -> Vec<ScoredTask> {
    if ds.revision_log.is_empty() {
        eprintln!("warning: no revision log present; revision filter is a no-op");
        return tasks;
    }
    tasks
        .into_iter()
        .filter(|t| {
            let anchor = t.task.reference_date.add_weeks(-1);
            match crate::ingest::revision_magnitude(ds, &t.task.location, anchor).ok() {
                Some(delta) => delta.abs() < threshold,
                None => true,
            }
        })
        .collect()
}

/// Proportional revision size per logged (location, week):
/// |final - initial| / (final + 1).
pub fn revision_diagnostics(ds: &Dataset) -> Vec<(String, crate::core::Epiweek, f64, f64)> {
    let mut rows: Vec<_> = ds
        .revision_log
        .iter()
        .map(|((loc, ew), (initial, fin))| {
            let abs = (fin - initial).abs();
            (loc.clone(), *ew, abs, abs / (fin + 1.0))
        })
        .collect();
    rows.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    rows
}

/// Delimited score table: Model, % Submitted, MWIS, rMWIS, MAE, rMAE,
/// 50% Cov., 95% Cov. The submission percentage is relative to the largest
/// task count among the reported models.
pub fn write_score_table(reports: &[ScoreReport], path: &Path) -> Result<()> {
    let max_tasks = reports.iter().map(|r| r.task_count).max().unwrap_or(0);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "model\tpct_submitted\tmwis\trmwis\tmae\trmae\tcov50\tcov95"
    )?;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    for r in reports {
        let pct = if max_tasks == 0 {
            0.0
        } else {
            100.0 * r.task_count as f64 / max_tasks as f64
        };
        writeln!(
            out,
            "{}\t{:.1}\t{:.3}\t{}\t{:.3}\t{}\t{:.3}\t{:.3}",
            r.model,
            pct,
            r.mwis,
            opt(r.rmwis),
            r.mae,
            opt(r.rmae),
            r.coverage_50,
            r.coverage_95,
        )?;
    }
    Ok(())
}
