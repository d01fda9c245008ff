//! Command-line orchestration: TOML configuration, the rolling-origin
//! backtest loop, single-date forecasting, hub-format CSV emission, score
//! tables, and the feature-importance report.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::arx::{fit_arx, ArxConfig};
use crate::baselines::{baseline_flat_forecast, baseline_trend_forecast, DEFAULT_DRAWS};
use crate::core::{
    quantile_levels, Epiweek, ForecastTask, LocationRegistry, QuantileForecast,
    SeriesKey, SignalKind, SpatialScale,
};
use crate::ensemble::combine_components;
use crate::error::{FlusionError, Result};
use crate::features::{
    build_training_rows, enumerate_training_tasks, FeatureSchema,
};
use crate::gbqr::{
    feature_importance, fit_bagged, predict_tasks, GbqrHyperparams, GbqrVariant,
};
use crate::ingest::{
    apply_flusurv_adjustment, filter_training, load_burden_table, load_surveillance,
    scale_factor_table, Dataset, TrainingFilter,
};
use crate::score::{
    pairwise_tournament, revision_filter, score_report, write_score_table, ScoredTask,
    ScoreReport,
};
use crate::stats;
use crate::transform::{standardize_dataset, PowerTransform};

// ---------------------------------------------------------------------------
// Configuration

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub backtest: BacktestConfig,
    #[serde(default)]
    pub gbqr: GbqrSection,
    #[serde(default)]
    pub arx: ArxSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub scoring: ScoringConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub nhsn: PathBuf,
    pub flusurv: Option<PathBuf>,
    pub iliplus: Option<PathBuf>,
    pub locations: PathBuf,
    pub burden: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub excluded_seasons: Vec<String>,
    pub non_target_cutoff: Option<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let f = TrainingFilter::default();
        TrainingConfig {
            excluded_seasons: f.excluded_seasons.into_iter().collect(),
            non_target_cutoff: f.non_target_cutoff,
        }
    }
}

impl TrainingConfig {
    fn to_filter(&self) -> TrainingFilter {
        TrainingFilter {
            excluded_seasons: self.excluded_seasons.iter().cloned().collect(),
            non_target_cutoff: self.non_target_cutoff.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestConfig {
    /// Reference dates as yyyyww epiweeks.
    pub reference_dates: Vec<u32>,
    pub models: Vec<String>,
    #[serde(default = "default_true")]
    pub exclude_national: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbqrSection {
    pub num_rounds: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_leaf_count: usize,
    pub min_split_gain: f64,
    pub num_bags: usize,
}

impl Default for GbqrSection {
    fn default() -> Self {
        let hp = GbqrHyperparams::default();
        GbqrSection {
            num_rounds: hp.num_rounds,
            learning_rate: hp.learning_rate,
            max_leaves: hp.max_leaves,
            min_leaf_count: hp.min_leaf_count,
            min_split_gain: hp.min_split_gain,
            num_bags: 100,
        }
    }
}

impl GbqrSection {
    fn hyperparams(&self) -> GbqrHyperparams {
        GbqrHyperparams {
            num_rounds: self.num_rounds,
            learning_rate: self.learning_rate,
            max_leaves: self.max_leaves,
            min_leaf_count: self.min_leaf_count,
            min_split_gain: self.min_split_gain,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArxSection {
    pub order: usize,
    pub num_chains: usize,
    pub warmup_draws: usize,
    pub posterior_draws: usize,
    pub halfcauchy_scale: f64,
    pub known_future_covariate: bool,
}

impl Default for ArxSection {
    fn default() -> Self {
        let c = ArxConfig::default();
        ArxSection {
            order: c.order,
            num_chains: c.num_chains,
            warmup_draws: c.warmup_draws,
            posterior_draws: c.posterior_draws,
            halfcauchy_scale: c.halfcauchy_scale,
            known_future_covariate: c.known_future_covariate,
        }
    }
}

impl ArxSection {
    fn to_config(&self, seed: u64) -> ArxConfig {
        ArxConfig {
            order: self.order,
            num_chains: self.num_chains,
            warmup_draws: self.warmup_draws,
            posterior_draws: self.posterior_draws,
            halfcauchy_scale: self.halfcauchy_scale,
            seed,
            known_future_covariate: self.known_future_covariate,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub draws: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            draws: DEFAULT_DRAWS,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub revision_filter: bool,
    pub revision_threshold: f64,
    pub baseline_model: String,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            revision_filter: false,
            revision_threshold: 10.0,
            baseline_model: "baseline-flat".to_string(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Load and validate the config; paths are resolved relative to the config
/// file's directory. Returns the raw bytes too, for the run-metadata hash.
pub fn load_config(path: &Path) -> Result<(RunConfig, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| FlusionError::Config(format!("config is not UTF-8: {e}")))?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| FlusionError::Config(format!("{e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&p);
        }
    };
    resolve(&mut cfg.data.nhsn);
    resolve(&mut cfg.data.locations);
    if let Some(p) = cfg.data.flusurv.as_mut() {
        resolve(p);
    }
    if let Some(p) = cfg.data.iliplus.as_mut() {
        resolve(p);
    }
    if let Some(p) = cfg.data.burden.as_mut() {
        resolve(p);
    }
    resolve(&mut cfg.output.dir);
    Ok((cfg, bytes))
}

// ---------------------------------------------------------------------------
// Model identifiers

/// Component model ids and ensembles. Ensembles are "flusion" or a
/// "+"-joined list of component ids.
pub const COMPONENT_IDS: [&str; 9] = [
    "gbqr",
    "gbqr-no-level",
    "gbqr-only-nhsn",
    "gbqr-by-location",
    "gbqr-no-transform",
    "gbqr-no-reporting-adj",
    "arx",
    "baseline-flat",
    "baseline-trend",
];

pub fn display_name(id: &str) -> String {
    let one = |c: &str| -> String {
        match c {
            "gbqr" => "GBQR".into(),
            "gbqr-no-level" => "GBQR-no-level".into(),
            "gbqr-only-nhsn" => "GBQR-only-NHSN".into(),
            "gbqr-by-location" => "GBQR-by-location".into(),
            "gbqr-no-transform" => "GBQR-no-transform".into(),
            "gbqr-no-reporting-adj" => "GBQR-no-reporting-adj".into(),
            "arx" => "ARX".into(),
            "baseline-flat" => "Baseline-flat".into(),
            "baseline-trend" => "Baseline-trend".into(),
            other => other.into(),
        }
    };
    if id == "flusion" {
        "Flusion".into()
    } else if id.contains('+') {
        id.split('+').map(one).collect::<Vec<_>>().join(", ")
    } else {
        one(id)
    }
}

/// Components an ensemble id averages over; None for component models.
pub fn ensemble_members(id: &str) -> Option<Vec<String>> {
    if id == "flusion" {
        Some(vec![
            "gbqr".to_string(),
            "gbqr-no-level".to_string(),
            "arx".to_string(),
        ])
    } else if id.contains('+') {
        Some(id.split('+').map(str::to_string).collect())
    } else {
        None
    }
}

fn validate_models(ids: &[String]) -> Result<()> {
    for id in ids {
        let components = ensemble_members(id).unwrap_or_else(|| vec![id.clone()]);
        for c in &components {
            if !COMPONENT_IDS.contains(&c.as_str()) {
                return Err(FlusionError::Config(format!(
                    "unknown model id {c:?}; known components: {}",
                    COMPONENT_IDS.join(", ")
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Data loading

pub struct LoadedData {
    pub registry: LocationRegistry,
    /// Merged dataset with the FluSurv burden adjustment applied.
    pub adjusted: Dataset,
    /// Merged dataset without the burden adjustment.
    pub raw: Dataset,
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let registry = LocationRegistry::load(&cfg.data.locations)?;
    let mut raw = load_surveillance(&cfg.data.nhsn, SignalKind::Nhsn)?;
    if let Some(path) = &cfg.data.flusurv {
        let flusurv = load_surveillance(path, SignalKind::Flusurv)?;
        if !flusurv.is_empty() && cfg.data.burden.is_none() {
            return Err(FlusionError::Config(
                "flusurv data present but no burden table configured".into(),
            ));
        }
        raw.merge(flusurv)?;
    }
    if let Some(path) = &cfg.data.iliplus {
        raw.merge(load_surveillance(path, SignalKind::IliPlus)?)?;
    }
    for key in raw.keys() {
        registry.get(&key.location)?; // unknown codes error by name
    }
    let adjusted = if let Some(path) = &cfg.data.burden {
        let table = scale_factor_table(&load_burden_table(path)?)?;
        apply_flusurv_adjustment(&raw, &table)?
    } else {
        raw.clone()
    };
    Ok(LoadedData {
        registry,
        adjusted,
        raw,
    })
}

// ---------------------------------------------------------------------------
// Forecasting one reference date

/// NHSN forecast tasks for every registry location observed at the anchor
/// week d-1, horizons 0..=3.
fn reference_tasks(
    truncated: &Dataset,
    registry: &LocationRegistry,
    d: Epiweek,
) -> Result<Vec<ForecastTask>> {
    let anchor = d.add_weeks(-1);
    let mut tasks = Vec::new();
    for info in registry.iter() {
        let key = SeriesKey::new(SignalKind::Nhsn, info.code.clone());
        if truncated.value(&key, anchor).is_none() {
            continue;
        }
        for h in 0u8..=3 {
            tasks.push(ForecastTask::new(SignalKind::Nhsn, info.code.clone(), d, h)?);
        }
    }
    if tasks.is_empty() {
        return Err(FlusionError::InsufficientData(format!(
            "no location has an observation at the anchor week {anchor}"
        )));
    }
    Ok(tasks)
}

/// Restrict a dataset to one source (used by the only-NHSN variant).
fn restrict_to_nhsn(ds: &Dataset) -> Dataset {
    let mut out = Dataset::new();
    for (key, series) in ds.series() {
        if key.source != SignalKind::Nhsn {
            continue;
        }
        for (ew, v) in series {
            out.insert(key.clone(), *ew, *v).expect("unique");
        }
    }
    out.revision_log = ds.revision_log.clone();
    out
}

fn gbqr_variant_for(id: &str, location: Option<&str>) -> GbqrVariant {
    match id {
        "gbqr-no-level" => GbqrVariant::NoLevel,
        "gbqr-only-nhsn" => GbqrVariant::OnlyNhsn,
        "gbqr-by-location" => GbqrVariant::ByLocation(location.unwrap_or("").to_string()),
        "gbqr-no-transform" => GbqrVariant::NoTransform,
        "gbqr-no-reporting-adj" => GbqrVariant::NoReportingAdj,
        _ => GbqrVariant::Full,
    }
}

fn fit_and_predict_gbqr(
    id: &str,
    data: &LoadedData,
    truncated_adjusted: &Dataset,
    truncated_raw: &Dataset,
    cfg: &RunConfig,
    tasks: &[ForecastTask],
    seed: u64,
) -> Result<Vec<QuantileForecast>> {
    let levels = quantile_levels();
    let filter = cfg.training.to_filter();
    let hp = cfg.gbqr.hyperparams();
    let schema = FeatureSchema::new(&data.registry);

    // variant-specific preprocessing
    let base: Dataset = match id {
        "gbqr-only-nhsn" => restrict_to_nhsn(truncated_adjusted),
        "gbqr-no-reporting-adj" => truncated_raw.clone(),
        _ => truncated_adjusted.clone(),
    };
    let power = if id == "gbqr-no-transform" {
        PowerTransform::Identity
    } else {
        PowerTransform::FourthRoot
    };

    let train = filter_training(&base, &filter, true);
    let transformed_full = standardize_dataset(&train, &base, &data.registry, power)?;
    let transformed_train = standardize_dataset(&train, &train, &data.registry, power)?;
    let train_tasks = enumerate_training_tasks(&train)?;
    let rows = build_training_rows(
        &transformed_full,
        &transformed_train,
        &data.registry,
        &train_tasks,
    )?;

    if id == "gbqr-by-location" {
        // separate fit per forecast location, trained on that location only
        let mut out = Vec::new();
        let locations: BTreeSet<String> =
            tasks.iter().map(|t| t.location.clone()).collect();
        for (i, loc) in locations.iter().enumerate() {
            let variant = gbqr_variant_for(id, Some(loc));
            let loc_rows: Vec<_> = rows
                .iter()
                .filter(|r| r.task.location == *loc)
                .cloned()
                .collect();
            let loc_tasks: Vec<_> = tasks
                .iter()
                .filter(|t| t.location == *loc)
                .cloned()
                .collect();
            let ensemble = fit_bagged(
                &loc_rows,
                &levels,
                &variant,
                &schema,
                &hp,
                cfg.gbqr.num_bags,
                stats::derive_seed(seed, i as u64),
            )?;
            out.extend(predict_tasks(
                &ensemble,
                &transformed_full,
                &data.registry,
                &loc_tasks,
            )?);
        }
        return Ok(out);
    }

    let variant = gbqr_variant_for(id, None);
    let ensemble = fit_bagged(
        &rows,
        &levels,
        &variant,
        &schema,
        &hp,
        cfg.gbqr.num_bags,
        seed,
    )?;
    predict_tasks(&ensemble, &transformed_full, &data.registry, tasks)
}

fn fit_and_predict_arx(
    data: &LoadedData,
    truncated_adjusted: &Dataset,
    cfg: &RunConfig,
    tasks: &[ForecastTask],
    seed: u64,
) -> Result<Vec<QuantileForecast>> {
    let filter = cfg.training.to_filter();
    let nhsn = restrict_to_nhsn(truncated_adjusted);
    let train = filter_training(&nhsn, &filter, false);
    let transformed =
        standardize_dataset(&train, &train, &data.registry, PowerTransform::FourthRoot)?;
    let post = fit_arx(&transformed, &cfg.arx.to_config(seed))?;
    if let Err(e) = post.check_convergence() {
        eprintln!("warning: ARX convergence check failed; forecasts may be unreliable\n{e}");
    }
    crate::arx::forecast_arx(&post, tasks, stats::derive_seed(seed, 0x4152_58))
}

fn baseline_forecasts(
    id: &str,
    truncated: &Dataset,
    cfg: &RunConfig,
    tasks: &[ForecastTask],
    seed: u64,
) -> Result<Vec<QuantileForecast>> {
    let locations: BTreeSet<String> = tasks.iter().map(|t| t.location.clone()).collect();
    let mut out = Vec::new();
    for (i, loc) in locations.iter().enumerate() {
        let key = SeriesKey::new(SignalKind::Nhsn, loc.clone());
        let series = truncated.get_series(&key).ok_or_else(|| {
            FlusionError::InsufficientData(format!("no NHSN history for {loc}"))
        })?;
        let loc_tasks: Vec<_> = tasks
            .iter()
            .filter(|t| t.location == *loc)
            .cloned()
            .collect();
        let loc_seed = stats::derive_seed(seed, i as u64);
        let fcs = if id == "baseline-trend" {
            baseline_trend_forecast(series, &loc_tasks, cfg.baseline.draws, loc_seed)?
        } else {
            baseline_flat_forecast(series, &loc_tasks, cfg.baseline.draws, loc_seed)?
        };
        out.extend(fcs);
    }
    Ok(out)
}

/// Fit every requested model for one reference date on data strictly
/// before it, returning forecasts keyed by model id.
pub fn forecast_reference_date(
    data: &LoadedData,
    cfg: &RunConfig,
    models: &[String],
    d: Epiweek,
) -> Result<BTreeMap<String, Vec<QuantileForecast>>> {
    let truncated_adjusted = data.adjusted.truncated_before(d);
    let truncated_raw = data.raw.truncated_before(d);
    let tasks = reference_tasks(&truncated_adjusted, &data.registry, d)?;

    // expand ensembles into the component set to fit
    let mut component_ids: BTreeSet<String> = BTreeSet::new();
    for id in models {
        match ensemble_members(id) {
            Some(members) => component_ids.extend(members),
            None => {
                component_ids.insert(id.clone());
            }
        }
    }

    let mut by_component: BTreeMap<String, Vec<QuantileForecast>> = BTreeMap::new();
    for (i, id) in component_ids.iter().enumerate() {
        // seed derivation: stable per (reference date, component position)
        let seed = stats::derive_seed(
            stats::derive_seed(cfg.seed, d.to_yyyyww() as u64),
            i as u64,
        );
        let fcs = if id.starts_with("gbqr") {
            fit_and_predict_gbqr(
                id,
                data,
                &truncated_adjusted,
                &truncated_raw,
                cfg,
                &tasks,
                seed,
            )?
        } else if id == "arx" {
            fit_and_predict_arx(data, &truncated_adjusted, cfg, &tasks, seed)?
        } else {
            baseline_forecasts(id, &truncated_adjusted, cfg, &tasks, seed)?
        };
        by_component.insert(id.clone(), fcs);
    }

    let mut out = BTreeMap::new();
    for id in models {
        let fcs = match ensemble_members(id) {
            Some(members) => {
                let parts: Vec<(&str, &[QuantileForecast])> = members
                    .iter()
                    .map(|m| (m.as_str(), by_component[m].as_slice()))
                    .collect();
                combine_components(&parts, &tasks)?
            }
            None => by_component[id].clone(),
        };
        out.insert(id.clone(), fcs);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Hub CSV format

/// Format a level so 0.01/0.025/0.1/.../0.99 round-trip exactly.
fn format_level(level: f64) -> String {
    let s = format!("{level}");
    debug_assert!(s.parse::<f64>() == Ok(level));
    s
}

pub fn write_hub_csv(path: &Path, forecasts: &[QuantileForecast]) -> Result<()> {
    let levels = quantile_levels();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "reference_date,horizon,target_end_date,location,output_type,output_type_id,value"
    )?;
    let mut sorted: Vec<&QuantileForecast> = forecasts.iter().collect();
    sorted.sort_by(|a, b| a.task.cmp(&b.task));
    for fc in sorted {
        for (level, value) in levels.levels.iter().zip(&fc.values) {
            writeln!(
                out,
                "{},{},{},{},quantile,{},{}",
                fc.task.reference_date.end_date(),
                fc.task.horizon,
                fc.task.target_week.end_date(),
                fc.task.location,
                format_level(*level),
                value
            )?;
        }
    }
    Ok(())
}

/// Parse a hub CSV back into forecasts; the level scheme must match the
/// 23-level scheme exactly.
pub fn read_hub_csv(path: &Path) -> Result<Vec<QuantileForecast>> {
    let levels = quantile_levels();
    let mut rdr = csv::Reader::from_path(path)?;
    let mut grouped: BTreeMap<ForecastTask, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let perr = |msg: String| FlusionError::Parse {
            path: path.display().to_string(),
            line: i + 2,
            msg,
        };
        if rec.len() != 7 {
            return Err(perr(format!("expected 7 columns, got {}", rec.len())));
        }
        if &rec[4] != "quantile" {
            return Err(perr(format!("unsupported output_type {:?}", &rec[4])));
        }
        let reference = chrono::NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d")
            .map_err(|e| perr(format!("bad reference_date: {e}")))?;
        let horizon: u8 = rec[1]
            .trim()
            .parse()
            .map_err(|e| perr(format!("bad horizon: {e}")))?;
        let task = ForecastTask::new(
            SignalKind::Nhsn,
            rec[3].trim(),
            Epiweek::from_date(reference),
            horizon,
        )?;
        let level: f64 = rec[5]
            .trim()
            .parse()
            .map_err(|e| perr(format!("bad output_type_id: {e}")))?;
        let value: f64 = rec[6]
            .trim()
            .parse()
            .map_err(|e| perr(format!("bad value: {e}")))?;
        grouped.entry(task).or_default().push((level, value));
    }
    let mut out = Vec::with_capacity(grouped.len());
    for (task, mut entries) in grouped {
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        let found: Vec<f64> = entries.iter().map(|(l, _)| *l).collect();
        if found != levels.levels {
            return Err(FlusionError::Format(format!(
                "level scheme mismatch for task {task:?} in {}",
                path.display()
            )));
        }
        out.push(QuantileForecast {
            task,
            values: entries.into_iter().map(|(_, v)| v).collect(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scoring

/// Pair forecasts with final truth values, dropping national rows when
/// configured and tasks without observed truth.
fn scored_tasks(
    forecasts: &[QuantileForecast],
    truth: &Dataset,
    registry: &LocationRegistry,
    exclude_national: bool,
) -> Vec<ScoredTask> {
    forecasts
        .iter()
        .filter(|fc| {
            !(exclude_national
                && registry
                    .get(&fc.task.location)
                    .map(|info| info.scale == SpatialScale::National)
                    .unwrap_or(false))
        })
        .filter_map(|fc| {
            let key = SeriesKey::new(SignalKind::Nhsn, fc.task.location.clone());
            truth.value(&key, fc.task.target_week).map(|z| ScoredTask {
                task: fc.task.clone(),
                forecast: fc.clone(),
                truth: z,
            })
        })
        .collect()
}

/// Score every model, run the tournament against the configured baseline,
/// and write the score table plus a per-horizon breakdown.
pub fn score_and_write(
    per_model: &BTreeMap<String, Vec<QuantileForecast>>,
    truth: &Dataset,
    registry: &LocationRegistry,
    cfg: &RunConfig,
    use_revision_filter: bool,
    out_dir: &Path,
) -> Result<Vec<ScoreReport>> {
    let levels = quantile_levels();
    let mut tasks_by_model: BTreeMap<String, Vec<ScoredTask>> = BTreeMap::new();
    for (id, fcs) in per_model {
        let mut tasks = scored_tasks(fcs, truth, registry, cfg.backtest.exclude_national);
        if use_revision_filter {
            tasks = revision_filter(tasks, truth, cfg.scoring.revision_threshold);
        }
        tasks_by_model.insert(display_name(id), tasks);
    }

    let named: Vec<(&str, &[ScoredTask])> = tasks_by_model
        .iter()
        .map(|(name, tasks)| (name.as_str(), tasks.as_slice()))
        .collect();
    let baseline_name = display_name(&cfg.scoring.baseline_model);
    let mut reports = Vec::new();
    for (name, tasks) in &named {
        match score_report(name, tasks, &levels) {
            Ok(r) => reports.push(r),
            Err(e) => eprintln!("warning: model {name} left unscored: {e}"),
        }
    }
    if named.len() >= 2 && tasks_by_model.contains_key(&baseline_name) {
        let relative = pairwise_tournament(&named, &baseline_name, &levels)?;
        for r in &mut reports {
            if let Some((rmwis, rmae)) = relative.get(&r.model) {
                r.rmwis = *rmwis;
                r.rmae = *rmae;
            }
        }
    }
    reports.sort_by(|a, b| a.mwis.total_cmp(&b.mwis));

    std::fs::create_dir_all(out_dir)?;
    write_score_table(&reports, &out_dir.join("score_table.tsv"))?;

    // per-horizon score series, plot-ready
    let mut out = std::io::BufWriter::new(std::fs::File::create(
        out_dir.join("horizon_scores.csv"),
    )?);
    writeln!(out, "model,horizon,task_count,mwis,rmwis")?;
    for h in 0u8..=3 {
        let horizon_tasks: BTreeMap<String, Vec<ScoredTask>> = tasks_by_model
            .iter()
            .map(|(name, tasks)| {
                (
                    name.clone(),
                    tasks
                        .iter()
                        .filter(|t| t.task.horizon == h)
                        .cloned()
                        .collect(),
                )
            })
            .collect();
        let named_h: Vec<(&str, &[ScoredTask])> = horizon_tasks
            .iter()
            .map(|(n, t)| (n.as_str(), t.as_slice()))
            .collect();
        let relative = if named_h.len() >= 2 && horizon_tasks.contains_key(&baseline_name) {
            pairwise_tournament(&named_h, &baseline_name, &levels).unwrap_or_default()
        } else {
            BTreeMap::new()
        };
        for (name, tasks) in &named_h {
            let Ok(m) = crate::score::mwis(tasks, &levels) else {
                continue;
            };
            let rmwis = relative
                .get(*name)
                .and_then(|(r, _)| *r)
                .map(|r| format!("{r:.6}"))
                .unwrap_or_else(|| "-".to_string());
            writeln!(out, "{name},{h},{},{m:.6},{rmwis}", tasks.len())?;
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Parser)]
#[command(name = "flusion", about = "Influenza hospitalization forecasting pipeline")]
pub struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Rayon thread-pool size (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and summarize the configured datasets; write the cache.
    Ingest,
    /// Roll over the configured reference dates: fit, forecast, score.
    Backtest {
        /// Comma-separated model ids overriding the configured set.
        #[arg(long)]
        variants: Option<String>,
        /// Drop tasks whose anchor observation was later heavily revised.
        #[arg(long)]
        revision_filter: bool,
    },
    /// Forecast a single reference date (yyyyww); no scoring.
    Forecast {
        #[arg(long)]
        date: u32,
        #[arg(long)]
        variants: Option<String>,
    },
    /// Score previously written hub files against the configured truth.
    Score {
        /// Directory of per-model forecast subdirectories
        /// (default: <output.dir>/forecasts).
        #[arg(long)]
        forecasts: Option<PathBuf>,
        #[arg(long)]
        revision_filter: bool,
    },
    /// Feature-importance table from a GBQR fit at one reference date.
    Importance {
        /// Reference date (yyyyww); default: last configured one.
        #[arg(long)]
        date: Option<u32>,
    },
}

fn write_run_metadata(
    out_dir: &Path,
    config_bytes: &[u8],
    cfg: &RunConfig,
    command: &str,
) -> Result<()> {
    let mut hasher = Sha256::new();
    hasher.update(config_bytes);
    let hash = format!("{:x}", hasher.finalize());
    let meta = serde_json::json!({
        "command": command,
        "config_sha256": hash,
        "seed": cfg.seed,
        "models": cfg.backtest.models,
        "reference_dates": cfg.backtest.reference_dates,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("run_metadata.json"),
        serde_json::to_string_pretty(&meta)
            .map_err(|e| FlusionError::Format(format!("metadata serialization: {e}")))?,
    )?;
    Ok(())
}

fn effective_models(cfg: &RunConfig, variants: &Option<String>) -> Result<Vec<String>> {
    let models: Vec<String> = match variants {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => cfg.backtest.models.clone(),
    };
    if models.is_empty() {
        return Err(FlusionError::Config("no models requested".into()));
    }
    validate_models(&models)?;
    Ok(models)
}

fn cmd_ingest(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    println!("source\tlocation\tseason\trows");
    let mut by_season: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for (key, series) in data.adjusted.series() {
        for ew in series.keys() {
            *by_season
                .entry((
                    key.source.to_string(),
                    key.location.clone(),
                    crate::core::season_label(ew.season_start_year()),
                ))
                .or_default() += 1;
        }
    }
    for ((source, location, season), rows) in &by_season {
        println!("{source}\t{location}\t{season}\t{rows}");
    }
    let sources: BTreeSet<String> = data
        .adjusted
        .keys()
        .map(|k| k.source.to_string())
        .collect();
    println!(
        "total: {} observations, {} series, sources: {}",
        data.adjusted.len(),
        data.adjusted.keys().count(),
        sources.into_iter().collect::<Vec<_>>().join(", ")
    );

    let cache = cfg.output.dir.join("cache");
    std::fs::create_dir_all(&cache)?;
    let mut split: BTreeMap<SignalKind, Dataset> = BTreeMap::new();
    for (key, series) in data.adjusted.series() {
        let ds = split.entry(key.source).or_default();
        for (ew, v) in series {
            ds.insert(key.clone(), *ew, *v)?;
        }
    }
    if let Some(ds) = split.get_mut(&SignalKind::Nhsn) {
        ds.revision_log = data.adjusted.revision_log.clone();
    }
    for (kind, ds) in &split {
        crate::synthetic::write_surveillance_csv(ds, &cache.join(format!("{kind}.csv")))?;
    }
    Ok(())
}

fn run_backtest_loop(
    data: &LoadedData,
    cfg: &RunConfig,
    models: &[String],
    dates: &[Epiweek],
) -> Result<BTreeMap<String, Vec<QuantileForecast>>> {
    let forecasts_dir = cfg.output.dir.join("forecasts");
    let mut all: BTreeMap<String, Vec<QuantileForecast>> = BTreeMap::new();
    let mut failures = 0usize;
    let mut attempts = 0usize;
    for &d in dates {
        attempts += 1;
        let per_model = match forecast_reference_date(data, cfg, models, d) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("warning: reference date {d} skipped: {e}");
                failures += 1;
                continue;
            }
        };
        for (id, fcs) in per_model {
            let dir = forecasts_dir.join(&id);
            std::fs::create_dir_all(&dir)?;
            write_hub_csv(&dir.join(format!("{}.csv", d.to_yyyyww())), &fcs)?;
            all.entry(id).or_default().extend(fcs);
        }
    }
    if failures == attempts {
        return Err(FlusionError::InsufficientData(
            "every reference date failed".into(),
        ));
    }
    Ok(all)
}

fn cmd_backtest(cfg: &RunConfig, variants: &Option<String>, use_filter: bool) -> Result<()> {
    let models = effective_models(cfg, variants)?;
    let data = load_data(cfg)?;
    let dates: Vec<Epiweek> = cfg
        .backtest
        .reference_dates
        .iter()
        .map(|&v| Epiweek::from_yyyyww(v))
        .collect::<Result<_>>()?;
    if dates.is_empty() {
        return Err(FlusionError::Config("no reference dates configured".into()));
    }
    let all = run_backtest_loop(&data, cfg, &models, &dates)?;
    let use_filter = use_filter || cfg.scoring.revision_filter;
    let reports = score_and_write(
        &all,
        &data.adjusted,
        &data.registry,
        cfg,
        use_filter,
        &cfg.output.dir.join("scores"),
    )?;
    for r in &reports {
        println!(
            "{}\ttasks={}\tMWIS={:.4}\tMAE={:.4}",
            r.model, r.task_count, r.mwis, r.mae
        );
    }
    Ok(())
}

fn cmd_forecast(cfg: &RunConfig, date: u32, variants: &Option<String>) -> Result<()> {
    let models = effective_models(cfg, variants)?;
    let data = load_data(cfg)?;
    let d = Epiweek::from_yyyyww(date)?;
    let per_model = forecast_reference_date(&data, cfg, &models, d)?;
    let forecasts_dir = cfg.output.dir.join("forecasts");
    for (id, fcs) in &per_model {
        let dir = forecasts_dir.join(id);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.csv", d.to_yyyyww()));
        write_hub_csv(&path, fcs)?;
        println!("{id}: {} tasks -> {}", fcs.len(), path.display());
    }
    Ok(())
}

fn cmd_score(cfg: &RunConfig, forecasts: &Option<PathBuf>, use_filter: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let dir = forecasts
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join("forecasts"));
    let mut per_model: BTreeMap<String, Vec<QuantileForecast>> = BTreeMap::new();
    for entry in std::fs::read_dir(&dir)? {
        let entry = entry?;
        if !entry.path().is_dir() {
            continue;
        }
        let id = entry.file_name().to_string_lossy().to_string();
        let mut fcs = Vec::new();
        let mut files: Vec<PathBuf> = std::fs::read_dir(entry.path())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for f in files {
            fcs.extend(read_hub_csv(&f)?);
        }
        if !fcs.is_empty() {
            per_model.insert(id, fcs);
        }
    }
    if per_model.is_empty() {
        return Err(FlusionError::InsufficientData(format!(
            "no forecast files under {}",
            dir.display()
        )));
    }
    let use_filter = use_filter || cfg.scoring.revision_filter;
    let reports = score_and_write(
        &per_model,
        &data.adjusted,
        &data.registry,
        cfg,
        use_filter,
        &cfg.output.dir.join("scores"),
    )?;
    for r in &reports {
        println!(
            "{}\ttasks={}\tMWIS={:.4}\tMAE={:.4}",
            r.model, r.task_count, r.mwis, r.mae
        );
    }
    Ok(())
}

fn cmd_importance(cfg: &RunConfig, date: Option<u32>) -> Result<()> {
    let data = load_data(cfg)?;
    let yyyyww = date
        .or_else(|| cfg.backtest.reference_dates.last().copied())
        .ok_or_else(|| FlusionError::Config("no reference date for importance".into()))?;
    let d = Epiweek::from_yyyyww(yyyyww)?;
    let truncated = data.adjusted.truncated_before(d);
    let filter = cfg.training.to_filter();
    let train = filter_training(&truncated, &filter, true);
    let transformed = standardize_dataset(
        &train,
        &train,
        &data.registry,
        PowerTransform::FourthRoot,
    )?;
    let schema = FeatureSchema::new(&data.registry);
    let train_tasks = enumerate_training_tasks(&train)?;
    let rows = build_training_rows(&transformed, &transformed, &data.registry, &train_tasks)?;
    let ensemble = fit_bagged(
        &rows,
        &quantile_levels(),
        &GbqrVariant::Full,
        &schema,
        &cfg.gbqr.hyperparams(),
        cfg.gbqr.num_bags,
        stats::derive_seed(cfg.seed, yyyyww as u64),
    )?;
    let table = feature_importance(&ensemble);
    std::fs::create_dir_all(&cfg.output.dir)?;
    let path = cfg.output.dir.join("importance.tsv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(out, "feature\tsplits_per_fit")?;
    for (name, score) in &table {
        writeln!(out, "{name}\t{score:.4}")?;
        println!("{name}\t{score:.4}");
    }
    Ok(())
}

/// Entry point used by the binary.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| FlusionError::Config(format!("thread pool: {e}")))?;
    }
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| FlusionError::Config("--config is required".into()))?;
    let (mut cfg, config_bytes) = load_config(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    let command_name = match &cli.command {
        Command::Ingest => "ingest",
        Command::Backtest { .. } => "backtest",
        Command::Forecast { .. } => "forecast",
        Command::Score { .. } => "score",
        Command::Importance { .. } => "importance",
    };
    write_run_metadata(&cfg.output.dir, &config_bytes, &cfg, command_name)?;
    match &cli.command {
        Command::Ingest => cmd_ingest(&cfg),
        Command::Backtest {
            variants,
            revision_filter,
        } => cmd_backtest(&cfg, variants, *revision_filter),
        Command::Forecast { date, variants } => cmd_forecast(&cfg, *date, variants),
        Command::Score {
            forecasts,
            revision_filter,
        } => cmd_score(&cfg, forecasts, *revision_filter),
        Command::Importance { date } => cmd_importance(&cfg, *date),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_config_keys_are_errors() {
        let toml_text = r#"
            [data]
            nhsn = "nhsn.csv"
            locations = "locations.csv"
            [backtest]
            reference_dates = [201901]
            models = ["baseline-flat"]
            [output]
            dir = "out"
            [gbqr]
            num_rouds = 10
        "#;
        let err = toml::from_str::<RunConfig>(toml_text).unwrap_err();
        assert!(err.to_string().contains("num_rouds"), "{err}");
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let toml_text = r#"
            [data]
            nhsn = "nhsn.csv"
            locations = "locations.csv"
            [backtest]
            reference_dates = [201901]
            models = ["baseline-flat"]
            [output]
            dir = "out"
        "#;
        let cfg: RunConfig = toml::from_str(toml_text).unwrap();
        assert_eq!(cfg.gbqr.num_bags, 100);
        assert_eq!(cfg.arx.order, 8);
        assert!(cfg.backtest.exclude_national);
        assert_eq!(cfg.scoring.revision_threshold, 10.0);
    }

    #[test]
    fn model_names_and_members() {
        assert_eq!(display_name("flusion"), "Flusion");
        assert_eq!(display_name("gbqr+arx"), "GBQR, ARX");
        assert_eq!(display_name("baseline-flat"), "Baseline-flat");
        assert_eq!(
            ensemble_members("flusion").unwrap(),
            vec!["gbqr", "gbqr-no-level", "arx"]
        );
        assert_eq!(ensemble_members("arx"), None);
        assert!(validate_models(&["gbqr+arx".to_string()]).is_ok());
        assert!(validate_models(&["gbqr+unknown".to_string()]).is_err());
    }

    #[test]
    fn hub_csv_round_trip() {
        let levels = quantile_levels();
        let d = Epiweek::new(2019, 1).unwrap();
        let mut fcs = Vec::new();
        for h in 0u8..=1 {
            let task = ForecastTask::new(SignalKind::Nhsn, "CA", d, h).unwrap();
            let values: Vec<f64> = levels
                .levels
                .iter()
                .map(|l| 100.0 + 50.0 * l + h as f64)
                .collect();
            fcs.push(QuantileForecast { task, values });
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hub.csv");
        write_hub_csv(&path, &fcs).unwrap();
        let loaded = read_hub_csv(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in loaded.iter().zip(&fcs) {
            assert_eq!(a.task, b.task);
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn hub_csv_rejects_level_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "reference_date,horizon,target_end_date,location,output_type,output_type_id,value\n\
             2019-01-05,0,2019-01-05,CA,quantile,0.5,10\n",
        )
        .unwrap();
        let err = read_hub_csv(&path).unwrap_err();
        assert!(err.to_string().contains("level scheme"), "{err}");
    }
}
