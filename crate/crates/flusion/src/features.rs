//! Feature engineering for the gradient boosting models: calendar and
//! identity indicators plus local level/trend/curvature measures from
//! rolling means and trailing-window Taylor polynomial fits.
//!
//! Missing features (insufficient history, gaps inside a window) are NaN;
//! the tree learner routes them through per-node missing directions.

use crate::core::{
    christmas_offset, season_week, Epiweek, ForecastTask, LocationRegistry, SignalKind,
    SpatialScale,
};
use crate::error::{FlusionError, Result};
use crate::ingest::Dataset;
use crate::stats;
use crate::transform::TransformedData;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Windows and degrees for the windowed feature groups.
const TAYLOR_D2_WINDOWS: [usize; 2] = [4, 6];
const TAYLOR_D1_WINDOWS: [usize; 2] = [3, 5];
const ROLLING_WINDOWS: [usize; 2] = [2, 4];

/// Number of base windowed features (signal value, Taylor coefficients,
/// rolling means) that are repeated at lags 1 and 2.
pub const NUM_WINDOWED: usize = 13;

/// Coefficients of a trailing-window Taylor polynomial fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorFit {
    pub degree: usize,
    pub window: usize,
    pub anchor: Epiweek,
    /// beta_0..beta_degree; beta_c estimates the c-th derivative at the anchor.
    pub coefficients: Vec<f64>,
}

/// Contiguous trailing window of `w` values ending at `t`, oldest first.
/// None if any week in the window is missing.
fn trailing_window(series: &BTreeMap<Epiweek, f64>, w: usize, t: Epiweek) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(w);
    for offset in (0..w as i64).rev() {
        out.push(*series.get(&t.add_weeks(-offset))?);
    }
    Some(out)
}

/// Rolling mean over the trailing window of length `w` ending at `t`.
/// Missing history yields None, not an error.
pub fn rolling_mean(series: &BTreeMap<Epiweek, f64>, w: usize, t: Epiweek) -> Option<f64> {
    trailing_window(series, w, t).map(|vals| stats::mean(&vals))
}

/// Solve a small symmetric linear system by Gaussian elimination with
/// partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(FlusionError::Numeric("singular design matrix".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// Ordinary least squares fit of z_u = sum_c (1/c!) beta_c (u - t)^c over
/// the trailing window u = t-w+1..t. Returns None on insufficient history.
pub fn taylor_coeffs(
    series: &BTreeMap<Epiweek, f64>,
    w: usize,
    d: usize,
    t: Epiweek,
) -> Result<Option<TaylorFit>> {
    if w <= d + 1 {
        return Err(FlusionError::Domain(format!(
            "window {w} too small for degree {d} fit"
        )));
    }
    let Some(values) = trailing_window(series, w, t) else {
        return Ok(None);
    };
    // Design column c is (u - t)^c / c! with u - t = -(w-1)..0.
    let p = d + 1;
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    let mut factorial = vec![1.0; p];
    for c in 1..p {
        factorial[c] = factorial[c - 1] * c as f64;
    }
    for (i, &y) in values.iter().enumerate() {
        let u = i as f64 - (w as f64 - 1.0);
        let mut row = vec![0.0; p];
        for (c, r) in row.iter_mut().enumerate() {
            *r = u.powi(c as i32) / factorial[c];
        }
        for c in 0..p {
            for k in 0..p {
                xtx[c][k] += row[c] * row[k];
            }
            xty[c] += row[c] * y;
        }
    }
    let coefficients = solve_linear(xtx, xty)?;
    Ok(Some(TaylorFit {
        degree: d,
        window: w,
        anchor: t,
        coefficients,
    }))
}

/// The 13 windowed features at one anchor, NaN where history is missing:
/// signal value, degree-2 Taylor coefficients for w in {4, 6}, degree-1
/// coefficients for w in {3, 5}, rolling means for w in {2, 4}.
fn windowed_features(series: &BTreeMap<Epiweek, f64>, anchor: Epiweek) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(NUM_WINDOWED);
    out.push(series.get(&anchor).copied().unwrap_or(f64::NAN));
    for w in TAYLOR_D2_WINDOWS {
        match taylor_coeffs(series, w, 2, anchor)? {
            Some(fit) => out.extend(fit.coefficients),
            None => out.extend([f64::NAN; 3]),
        }
    }
    for w in TAYLOR_D1_WINDOWS {
        match taylor_coeffs(series, w, 1, anchor)? {
            Some(fit) => out.extend(fit.coefficients),
            None => out.extend([f64::NAN; 2]),
        }
    }
    for w in ROLLING_WINDOWS {
        out.push(rolling_mean(series, w, anchor).unwrap_or(f64::NAN));
    }
    Ok(out)
}

/// Names and metadata for one feature column.
#[derive(Debug, Clone)]
pub struct FeatureColumn {
    pub name: String,
    /// True for features measuring the local level of the signal: the
    /// signal value, Taylor intercepts, rolling means, and their lags.
    pub level: bool,
}

/// The fixed feature layout for a given location registry.
#[derive(Debug, Clone)]
pub struct FeatureSchema {
    pub columns: Vec<FeatureColumn>,
    num_locations: usize,
}

fn windowed_names() -> Vec<(String, bool)> {
    let mut names = vec![("signal_value".to_string(), true)];
    for w in TAYLOR_D2_WINDOWS {
        for c in 0..=2 {
            names.push((format!("taylor_d2_w{w}_c{c}"), c == 0));
        }
    }
    for w in TAYLOR_D1_WINDOWS {
        for c in 0..=1 {
            names.push((format!("taylor_d1_w{w}_c{c}"), c == 0));
        }
    }
    for w in ROLLING_WINDOWS {
        names.push((format!("roll_mean_w{w}"), true));
    }
    names
}

impl FeatureSchema {
    pub fn new(registry: &LocationRegistry) -> FeatureSchema {
        let mut columns = Vec::new();
        let mut push = |name: String, level: bool| columns.push(FeatureColumn { name, level });
        for s in SignalKind::ALL {
            push(format!("source_{s}"), false);
        }
        for loc in registry.iter() {
            push(format!("location_{}", loc.code), false);
        }
        for scale in ["state", "region", "national"] {
            push(format!("scale_{scale}"), false);
        }
        push("population".into(), false);
        push("season_week".into(), false);
        push("weeks_from_christmas".into(), false);
        push("horizon".into(), false);
        let base = windowed_names();
        for (name, level) in &base {
            push(name.clone(), *level);
        }
        for lag in [1, 2] {
            for (name, level) in &base {
                push(format!("{name}_lag{lag}"), *level);
            }
        }
        FeatureSchema {
            columns,
            num_locations: registry.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn num_locations(&self) -> usize {
        self.num_locations
    }

    /// Per-column flag: true where the column may be used by the
    /// no-level model variant.
    pub fn non_level_mask(&self) -> Vec<bool> {
        self.columns.iter().map(|c| !c.level).collect()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.columns[index].name
    }
}

/// One training or prediction instance for the gradient boosting models.
#[derive(Debug, Clone)]
pub struct FeatureRow {
    pub task: ForecastTask,
    /// Season label of the reference date, used for season-level bagging.
    pub season: String,
    pub x: Vec<f64>,
    pub y: Option<f64>,
}

/// Build feature rows for the given tasks. Features at reference date d are
/// functions of observations at weeks <= d - 1 only.
pub fn build_feature_matrix(
    data: &TransformedData,
    registry: &LocationRegistry,
    tasks: &[ForecastTask],
) -> Result<Vec<FeatureRow>> {
    let schema = FeatureSchema::new(registry);
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        let loc = registry.get(&task.location)?;
        let loc_pos = registry.position(&task.location)?;
        let key = crate::core::SeriesKey::new(task.source, task.location.clone());
        let series = data
            .series
            .get(&key)
            .map(|s| &s.values)
            .ok_or_else(|| FlusionError::Lookup(format!("no standardized series for {key}")))?;
        let anchor = task.reference_date.add_weeks(-1);

        let mut x = Vec::with_capacity(schema.len());
        for s in SignalKind::ALL {
            x.push(if task.source == s { 1.0 } else { 0.0 });
        }
        for i in 0..registry.len() {
            x.push(if i == loc_pos { 1.0 } else { 0.0 });
        }
        for scale in [
            SpatialScale::State,
            SpatialScale::Region,
            SpatialScale::National,
        ] {
            x.push(if loc.scale == scale { 1.0 } else { 0.0 });
        }
        x.push(loc.population);
        x.push(season_week(anchor).week as f64);
        x.push(christmas_offset(anchor) as f64);
        x.push(task.horizon as f64);
        for lag in [0i64, 1, 2] {
            x.extend(windowed_features(series, anchor.add_weeks(-lag))?);
        }
        debug_assert_eq!(x.len(), schema.len());
        rows.push(FeatureRow {
            task: task.clone(),
            season: season_week(task.reference_date).season,
            x,
            y: None,
        });
    }
    Ok(rows)
}

/// Prediction targets: y = z(d + h) - z(d - 1) on the standardized scale.
/// None where the target week is unobserved.
pub fn build_targets(data: &TransformedData, tasks: &[ForecastTask]) -> Vec<Option<f64>> {
    tasks
        .iter()
        .map(|task| {
            let key = crate::core::SeriesKey::new(task.source, task.location.clone());
            let series = data.series.get(&key).map(|s| &s.values)?;
            let target = series.get(&task.target_week)?;
            let last = series.get(&task.reference_date.add_weeks(-1))?;
            Some(target - last)
        })
        .collect()
}

/// Training rows: feature matrix plus targets, keeping only rows whose
/// target is observed and finite.
pub fn build_training_rows(
    full: &TransformedData,
    train: &TransformedData,
    registry: &LocationRegistry,
    tasks: &[ForecastTask],
) -> Result<Vec<FeatureRow>> {
    let mut rows = build_feature_matrix(full, registry, tasks)?;
    let targets = build_targets(train, tasks);
    let mut out = Vec::with_capacity(rows.len());
    for (row, y) in rows.drain(..).zip(targets) {
        if let Some(y) = y {
            if y.is_finite() {
                out.push(FeatureRow {
                    y: Some(y),
                    ..row
                });
            }
        }
    }
    Ok(out)
}

/// Every (d, h) pair whose anchor week d-1 and target week d+h are both
/// observed in the (already filtered) training data.
pub fn enumerate_training_tasks(train: &Dataset) -> Result<Vec<ForecastTask>> {
    let mut tasks = Vec::new();
    for (key, series) in train.series() {
        for &anchor in series.keys() {
            let d = anchor.add_weeks(1);
            for h in 0u8..=3 {
                if series.contains_key(&d.add_weeks(h as i64)) {
                    tasks.push(ForecastTask::new(key.source, key.location.clone(), d, h)?);
                }
            }
        }
    }
    Ok(tasks)
}

/// Debug dump of the feature matrix: named columns, missing values empty.
pub fn write_feature_matrix(
    rows: &[FeatureRow],
    schema: &FeatureSchema,
    path: &Path,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let names: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
    writeln!(f, "source,location,reference_date,horizon,{},y", names.join(","))?;
    for row in rows {
        let cells: Vec<String> = row
            .x
            .iter()
            .map(|v| if v.is_nan() { String::new() } else { v.to_string() })
            .collect();
        writeln!(
            f,
            "{},{},{},{},{},{}",
            row.task.source,
            row.task.location,
            row.task.reference_date.to_yyyyww(),
            row.task.horizon,
            cells.join(","),
            row.y.map(|y| y.to_string()).unwrap_or_default()
        )?;
    }
    Ok(())
}
