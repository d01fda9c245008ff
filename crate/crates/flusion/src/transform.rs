//! Per-series standardization: rate conversion for counts, a fourth-root
//! variance stabilization, then scaling by the 95th percentile and
//! centering by the mean. The inverse clamps at the transform's zero point
//! before undoing the power step.

use crate::core::{Epiweek, LocationRegistry, SeriesKey, SignalKind};
use crate::error::{FlusionError, Result};
use crate::ingest::Dataset;
use crate::stats;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Power step of the pipeline. `Identity` backs the no-transform ablation:
/// rate conversion and center/scale still apply, the fourth root does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerTransform {
    FourthRoot,
    Identity,
}

impl PowerTransform {
    fn forward(self, v: f64) -> f64 {
        match self {
            PowerTransform::FourthRoot => v.powf(0.25),
            PowerTransform::Identity => v,
        }
    }

    fn inverse(self, v: f64) -> f64 {
        match self {
            PowerTransform::FourthRoot => v.powi(4),
            PowerTransform::Identity => v,
        }
    }
}

/// Fitted standardization constants for one (location, source) series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub key: SeriesKey,
    /// Population in units of 100k; used only for NHSN counts.
    pub population_100k: f64,
    /// 95th percentile of the power-transformed values.
    pub scale_p95: f64,
    /// Mean of the scaled values.
    pub center_mean: f64,
    pub power: PowerTransform,
}

impl TransformParams {
    fn uses_population(&self) -> bool {
        self.key.source == SignalKind::Nhsn
    }
}

/// Fit standardization constants from a series' training observations.
pub fn fit_transform_params(
    ds: &Dataset,
    key: &SeriesKey,
    population_100k: f64,
    power: PowerTransform,
) -> Result<TransformParams> {
    let series = ds
        .get_series(key)
        .ok_or_else(|| FlusionError::Lookup(format!("no observations for {key}")))?;
    if series.len() < 2 {
        return Err(FlusionError::InsufficientData(format!(
            "series {key} has {} observations, need >= 2",
            series.len()
        )));
    }
    let uses_pop = key.source == SignalKind::Nhsn;
    let step2: Vec<f64> = series
        .values()
        .map(|&z| {
            let rate = if uses_pop { z / population_100k } else { z };
            power.forward(rate)
        })
        .collect();
    let scale_p95 = stats::quantile(&step2, 0.95);
    if scale_p95 <= 0.0 {
        return Err(FlusionError::Domain(format!(
            "degenerate scale for {key}: 95th percentile of transformed values is {scale_p95}"
        )));
    }
    let center_mean = stats::mean(&step2) / scale_p95;
    Ok(TransformParams {
        key: key.clone(),
        population_100k,
        scale_p95,
        center_mean,
        power,
    })
}

/// Forward standardization of one raw observation.
pub fn standardize(z: f64, p: &TransformParams) -> Result<f64> {
    if z < 0.0 {
        return Err(FlusionError::Domain(format!(
            "cannot standardize negative value {z}"
        )));
    }
    let rate = if p.uses_population() {
        z / p.population_100k
    } else {
        z
    };
    Ok(p.power.forward(rate) / p.scale_p95 - p.center_mean)
}

/// Inverse standardization. Values below the transform's zero point are
/// clamped to zero so the power step cannot produce spurious positives.
pub fn inverse_standardize(z_tilde: f64, p: &TransformParams) -> f64 {
    let u = ((z_tilde + p.center_mean) * p.scale_p95).max(0.0);
    let rate = p.power.inverse(u);
    if p.uses_population() {
        rate * p.population_100k
    } else {
        rate
    }
}

/// A dataset after standardization: per-series params and transformed values.
#[derive(Debug, Clone, Default)]
pub struct TransformedData {
    pub series: BTreeMap<SeriesKey, TransformedSeries>,
}

#[derive(Debug, Clone)]
pub struct TransformedSeries {
    pub params: TransformParams,
    pub values: BTreeMap<Epiweek, f64>,
}

impl TransformedData {
    pub fn value(&self, key: &SeriesKey, ew: Epiweek) -> Option<f64> {
        self.series.get(key).and_then(|s| s.values.get(&ew)).copied()
    }

    pub fn params(&self, key: &SeriesKey) -> Option<&TransformParams> {
        self.series.get(key).map(|s| &s.params)
    }
}

/// Fit params on `fit_ds` (training observations only) and standardize all
/// of `apply_ds` with them. Series absent from `fit_ds` are skipped.
pub fn standardize_dataset(
    fit_ds: &Dataset,
    apply_ds: &Dataset,
    registry: &LocationRegistry,
    power: PowerTransform,
) -> Result<TransformedData> {
    let mut out = TransformedData::default();
    for (key, series) in apply_ds.series() {
        let pop_100k = registry.get(&key.location)?.population / 100_000.0;
        let params = match fit_transform_params(fit_ds, key, pop_100k, power) {
            Ok(p) => p,
            Err(FlusionError::Lookup(_)) | Err(FlusionError::InsufficientData(_)) => continue,
            Err(e) => return Err(e),
        };
        let mut values = BTreeMap::new();
        for (ew, z) in series {
            values.insert(*ew, standardize(*z, &params)?);
        }
        out.series.insert(key.clone(), TransformedSeries { params, values });
    }
    Ok(out)
}

/// Write fitted params to a sidecar file for reproducibility.
pub fn write_params_sidecar(data: &TransformedData, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "location,source,population_100k,scale_p95,center_mean")?;
    for (key, series) in &data.series {
        let p = &series.params;
        writeln!(
            f,
            "{},{},{},{},{}",
            key.location, key.source, p.population_100k, p.scale_p95, p.center_mean
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Epiweek;
    use proptest::prelude::*;

    fn ew(week: u8) -> Epiweek {
        Epiweek::new(2023, week).unwrap()
    }

    fn nhsn_key() -> SeriesKey {
        SeriesKey::new(SignalKind::Nhsn, "MA")
    }

    fn fit_on(values: &[f64], key: SeriesKey, pop_100k: f64) -> TransformParams {
        let mut ds = Dataset::new();
        for (i, v) in values.iter().enumerate() {
            ds.insert(key.clone(), ew(10 + i as u8), *v).unwrap();
        }
        fit_transform_params(&ds, &key, pop_100k, PowerTransform::FourthRoot).unwrap()
    }

    #[test]
    fn constant_series_params() {
        let p = fit_on(&[16.0, 16.0, 16.0], nhsn_key(), 1.0);
        assert!((p.scale_p95 - 2.0).abs() < 1e-12);
        assert!((p.center_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn percentile_uses_linear_interpolation() {
        // step-2 values {0, 2}: rank 0.95 * 1 = 0.95 -> 1.9
        let p = fit_on(&[0.0, 16.0], nhsn_key(), 1.0);
        assert!((p.scale_p95 - 1.9).abs() < 1e-12, "{}", p.scale_p95);
    }

    #[test]
    fn flusurv_ignores_population() {
        let key = SeriesKey::new(SignalKind::Flusurv, "MA");
        let p = fit_on(&[16.0, 16.0], key, 70.0);
        assert!((p.scale_p95 - 2.0).abs() < 1e-12);
        assert!((standardize(16.0, &p).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_series_is_degenerate() {
        let mut ds = Dataset::new();
        let key = nhsn_key();
        ds.insert(key.clone(), ew(10), 0.0).unwrap();
        ds.insert(key.clone(), ew(11), 0.0).unwrap();
        assert!(fit_transform_params(&ds, &key, 1.0, PowerTransform::FourthRoot).is_err());
    }

    #[test]
    fn standardize_known_values() {
        let p = TransformParams {
            key: nhsn_key(),
            population_100k: 1.0,
            scale_p95: 1.0,
            center_mean: 0.0,
            power: PowerTransform::FourthRoot,
        };
        assert!((standardize(16.0, &p).unwrap() - 2.0).abs() < 1e-12);
        assert!(standardize(-1.0, &p).is_err());
    }

    #[test]
    fn zero_maps_to_minus_center_mean() {
        let p = fit_on(&[1.0, 5.0, 20.0], nhsn_key(), 2.0);
        let z = standardize(0.0, &p).unwrap();
        assert!((z + p.center_mean).abs() < 1e-12);
        assert!(inverse_standardize(z, &p).abs() < 1e-12);
    }

    #[test]
    fn inverse_applies_population_and_power() {
        // u = 2, pop_100k = 3 -> 2^4 * 3 = 48
        let p = TransformParams {
            key: nhsn_key(),
            population_100k: 3.0,
            scale_p95: 1.0,
            center_mean: 0.0,
            power: PowerTransform::FourthRoot,
        };
        assert!((inverse_standardize(2.0, &p) - 48.0).abs() < 1e-12);
    }

    #[test]
    fn negative_transformed_values_clamp_to_zero() {
        let p = fit_on(&[1.0, 5.0, 20.0], nhsn_key(), 1.0);
        assert_eq!(inverse_standardize(-p.center_mean - 5.0, &p), 0.0);
        assert_eq!(inverse_standardize(-p.center_mean, &p), 0.0);
    }

    #[test]
    fn no_transform_round_trip_holds() {
        let mut ds = Dataset::new();
        let key = nhsn_key();
        for (i, v) in [3.0, 9.0, 27.0, 81.0].iter().enumerate() {
            ds.insert(key.clone(), ew(10 + i as u8), *v).unwrap();
        }
        let p = fit_transform_params(&ds, &key, 2.0, PowerTransform::Identity).unwrap();
        for z in [0.0, 1.5, 40.0, 200.0] {
            let rt = inverse_standardize(standardize(z, &p).unwrap(), &p);
            assert!((rt - z).abs() <= 1e-9 * z.max(1.0), "{z} -> {rt}");
        }
    }

    proptest! {
        #[test]
        fn round_trip_identity(z in 0.0f64..1e6, pop in 0.5f64..400.0) {
            let p = fit_on(&[1.0, 10.0, 100.0, 1000.0], nhsn_key(), pop);
            let rt = inverse_standardize(standardize(z, &p).unwrap(), &p);
            let tol = 1e-9 * z.abs().max(1e-6);
            prop_assert!((rt - z).abs() <= tol, "z = {}, round-trip = {}", z, rt);
        }

        #[test]
        fn standardize_is_strictly_increasing(a in 0.0f64..1e5, delta in 1e-3f64..1e5) {
            let p = fit_on(&[1.0, 10.0, 100.0], nhsn_key(), 3.0);
            let lo = standardize(a, &p).unwrap();
            let hi = standardize(a + delta, &p).unwrap();
            prop_assert!(hi > lo);
        }

        #[test]
        fn inverse_is_nondecreasing(a in -5.0f64..5.0, delta in 0.0f64..5.0) {
            let p = fit_on(&[1.0, 10.0, 100.0], nhsn_key(), 3.0);
            prop_assert!(inverse_standardize(a + delta, &p) >= inverse_standardize(a, &p));
        }
    }
}
