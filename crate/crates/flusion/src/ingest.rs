//! Surveillance data loading and reporting adjustments: CSV ingestion,
//! the FluSurv-NET burden scale-up, ILI+ construction, and training-set
//! filtering.

use crate::core::{season_label, season_week, Epiweek, SeriesKey, SignalKind};
use crate::error::{FlusionError, Result};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

/// Inputs for one season's FluSurv-NET burden adjustment.
#[derive(Debug, Clone)]
pub struct BurdenRecord {
    pub season: String,
    /// Cumulative reported hospitalization rate per 100k over the season.
    pub cum_rate: f64,
    pub us_population: f64,
    /// CDC point estimate of national influenza hospitalizations.
    pub burden_count: f64,
}

/// Season -> scale-up factor alpha.
#[derive(Debug, Clone, Default)]
pub struct ScaleFactorTable {
    pub factors: BTreeMap<String, f64>,
}

/// In-memory dataset: one weekly series per (source, location), plus an
/// optional log of NHSN reporting revisions.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    series: BTreeMap<SeriesKey, BTreeMap<Epiweek, f64>>,
    /// (location, epiweek) -> (initial_value, final_value), NHSN only.
    pub revision_log: HashMap<(String, Epiweek), (f64, f64)>,
}

impl Dataset {
    pub fn new() -> Dataset {
        Dataset::default()
    }

    pub fn insert(&mut self, key: SeriesKey, epiweek: Epiweek, value: f64) -> Result<()> {
        if value < 0.0 {
            return Err(FlusionError::Domain(format!(
                "negative value {value} for {key} at {epiweek}"
            )));
        }
        let series = self.series.entry(key.clone()).or_default();
        if series.insert(epiweek, value).is_some() {
            return Err(FlusionError::Integrity(format!(
                "duplicate observation for {key} at {epiweek}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.series.values().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn series(&self) -> impl Iterator<Item = (&SeriesKey, &BTreeMap<Epiweek, f64>)> {
        self.series.iter()
    }

    pub fn get_series(&self, key: &SeriesKey) -> Option<&BTreeMap<Epiweek, f64>> {
        self.series.get(key)
    }

    pub fn value(&self, key: &SeriesKey, epiweek: Epiweek) -> Option<f64> {
        self.series.get(key).and_then(|s| s.get(&epiweek)).copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &SeriesKey> {
        self.series.keys()
    }

    /// Distinct season labels with at least one observation.
    pub fn seasons(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for series in self.series.values() {
            for ew in series.keys() {
                out.insert(season_label(ew.season_start_year()));
            }
        }
        out
    }

    /// Merge another dataset in; duplicate (key, week) pairs are an error.
    pub fn merge(&mut self, other: Dataset) -> Result<()> {
        for (key, series) in other.series {
            for (ew, value) in series {
                self.insert(key.clone(), ew, value)?;
            }
        }
        self.revision_log.extend(other.revision_log);
        Ok(())
    }

    /// Copy of this dataset restricted to observations strictly before `week`.
    pub fn truncated_before(&self, week: Epiweek) -> Dataset {
        let mut out = Dataset::new();
        for (key, series) in &self.series {
            let trunc: BTreeMap<Epiweek, f64> = series
                .iter()
                .filter(|(ew, _)| **ew < week)
                .map(|(ew, v)| (*ew, *v))
                .collect();
            if !trunc.is_empty() {
                out.series.insert(key.clone(), trunc);
            }
        }
        out.revision_log = self
            .revision_log
            .iter()
            .filter(|((_, ew), _)| *ew < week)
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        out
    }
}

/// Which observations enter the training set.
#[derive(Debug, Clone)]
pub struct TrainingFilter {
    pub excluded_seasons: BTreeSet<String>,
    /// Non-NHSN observations in this season or later are dropped (the
    /// auxiliary signals are historical context only).
    pub non_target_cutoff: Option<String>,
}

impl Default for TrainingFilter {
    fn default() -> TrainingFilter {
        TrainingFilter {
            excluded_seasons: ["2008/09", "2009/10", "2020/21", "2021/22"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            non_target_cutoff: Some("2023/24".to_string()),
        }
    }
}

/// First calendar year of a "YYYY/YY" season label.
pub fn parse_season_start(label: &str) -> Result<i32> {
    label
        .split('/')
        .next()
        .and_then(|y| y.parse().ok())
        .ok_or_else(|| FlusionError::Format(format!("bad season label {label:?}")))
}

/// Load a surveillance CSV with header `source,location,epiweek,value[,initial_value]`.
/// Every row must carry the source tag given by `schema`.
pub fn load_surveillance(path: &Path, schema: SignalKind) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let has_initial = headers.iter().any(|h| h == "initial_value");
    let mut ds = Dataset::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let perr = |msg: String| FlusionError::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        if rec.len() < 4 {
            return Err(perr(format!("expected >= 4 columns, got {}", rec.len())));
        }
        let source = SignalKind::parse(rec[0].trim())?;
        if source != schema {
            return Err(perr(format!(
                "source {:?} does not match expected {:?}",
                rec[0].trim(),
                schema.as_str()
            )));
        }
        let location = rec[1].trim().to_string();
        let epiweek = Epiweek::from_yyyyww(
            rec[2]
                .trim()
                .parse()
                .map_err(|e| perr(format!("bad epiweek: {e}")))?,
        )?;
        let value: f64 = rec[3]
            .trim()
            .parse()
            .map_err(|e| perr(format!("bad value: {e}")))?;
        if value < 0.0 {
            return Err(perr(format!("negative value {value}")));
        }
        ds.insert(SeriesKey::new(source, location.clone()), epiweek, value)
            .map_err(|e| perr(e.to_string()))?;
        if has_initial && rec.len() > 4 && !rec[4].trim().is_empty() {
            let initial: f64 = rec[4]
                .trim()
                .parse()
                .map_err(|e| perr(format!("bad initial_value: {e}")))?;
            ds.revision_log.insert((location, epiweek), (initial, value));
        }
    }
    Ok(ds)
}

/// Load the burden table CSV: `season,cum_rate,us_population,burden_count`.
pub fn load_burden_table(path: &Path) -> Result<Vec<BurdenRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let perr = |msg: String| FlusionError::Parse {
            path: path.display().to_string(),
            line: i + 2,
            msg,
        };
        if rec.len() != 4 {
            return Err(perr(format!("expected 4 columns, got {}", rec.len())));
        }
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .trim()
                .replace(',', "")
                .parse()
                .map_err(|e| perr(format!("bad number in column {j}: {e}")))
        };
        out.push(BurdenRecord {
            season: rec[0].trim().to_string(),
            cum_rate: num(1)?,
            us_population: num(2)?,
            burden_count: num(3)?,
        });
    }
    Ok(out)
}

/// Season-specific scale-up factor: alpha solves
/// alpha * cum_rate = burden_count / (us_population / 100_000).
pub fn burden_scale_factor(rec: &BurdenRecord) -> Result<f64> {
    if rec.cum_rate <= 0.0 || rec.us_population <= 0.0 || rec.burden_count <= 0.0 {
        return Err(FlusionError::Domain(format!(
            "burden record for {} has nonpositive fields",
            rec.season
        )));
    }
    let burden_rate = rec.burden_count / (rec.us_population / 100_000.0);
    Ok(burden_rate / rec.cum_rate)
}

pub fn scale_factor_table(records: &[BurdenRecord]) -> Result<ScaleFactorTable> {
    let mut factors = BTreeMap::new();
    for rec in records {
        factors.insert(rec.season.clone(), burden_scale_factor(rec)?);
    }
    Ok(ScaleFactorTable { factors })
}

/// Multiply each FluSurv value by its season's scale-up factor.
/// Other sources pass through unchanged.
pub fn apply_flusurv_adjustment(ds: &Dataset, table: &ScaleFactorTable) -> Result<Dataset> {
    let mut missing = BTreeSet::new();
    let mut out = ds.clone();
    for (key, series) in out.series.iter_mut() {
        if key.source != SignalKind::Flusurv {
            continue;
        }
        for (ew, value) in series.iter_mut() {
            let season = season_label(ew.season_start_year());
            match table.factors.get(&season) {
                Some(alpha) => *value *= alpha,
                None => {
                    missing.insert(season);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(FlusionError::Config(format!(
            "burden table missing seasons: {}",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(out)
}

/// ILI+ = ILI percent times test positivity (a proportion in [0, 1]).
/// Weeks lacking either input are omitted.
pub fn compute_iliplus(ili: &Dataset, positivity: &Dataset) -> Result<Dataset> {
    let mut out = Dataset::new();
    for (key, series) in ili.series() {
        let pos_key = SeriesKey::new(key.source, key.location.clone());
        let Some(pos_series) = positivity.get_series(&pos_key) else {
            continue;
        };
        for (ew, ili_value) in series {
            let Some(&pos) = pos_series.get(ew) else {
                continue;
            };
            if !(0.0..=1.0).contains(&pos) {
                return Err(FlusionError::Domain(format!(
                    "test positivity {pos} outside [0, 1] for {} at {ew}",
                    key.location
                )));
            }
            out.insert(
                SeriesKey::new(SignalKind::IliPlus, key.location.clone()),
                *ew,
                ili_value * pos,
            )?;
        }
    }
    Ok(out)
}

/// Drop excluded seasons; with `for_gbqr` also drop the off-season
/// (season weeks < 10 or > 40). ARX keeps off-season observations.
pub fn filter_training(ds: &Dataset, filter: &TrainingFilter, for_gbqr: bool) -> Dataset {
    let cutoff_year = filter
        .non_target_cutoff
        .as_deref()
        .and_then(|label| parse_season_start(label).ok());
    let mut out = Dataset::new();
    for (key, series) in ds.series() {
        for (ew, value) in series {
            let sw = season_week(*ew);
            if filter.excluded_seasons.contains(&sw.season) {
                continue;
            }
            if for_gbqr && !sw.in_season() {
                continue;
            }
            if key.source != SignalKind::Nhsn {
                if let Some(cutoff) = cutoff_year {
                    if ew.season_start_year() >= cutoff {
                        continue;
                    }
                }
            }
            out.insert(key.clone(), *ew, *value).expect("unique by construction");
        }
    }
    out.revision_log = ds.revision_log.clone();
    out
}

/// Signed revision size final - initial for an NHSN observation.
pub fn revision_magnitude(ds: &Dataset, location: &str, epiweek: Epiweek) -> Result<f64> {
    ds.revision_log
        .get(&(location.to_string(), epiweek))
        .map(|(initial, final_)| final_ - initial)
        .ok_or_else(|| {
            FlusionError::Lookup(format!(
                "no revision log entry for {location} at {epiweek}"
            ))
        })
}
