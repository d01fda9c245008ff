//! Reference forecasters: a symmetrized-difference random walk
//! (baseline-flat) and a quantile-averaged ensemble of 16 windowed trend
//! variations (baseline-trend). Both operate on the natural count scale.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::core::{quantile_levels, Epiweek, ForecastTask, QuantileForecast};
use crate::error::{FlusionError, Result};
use crate::stats;

pub const DEFAULT_DRAWS: usize = 10_000;

/// Trailing window sizes for the trend variations. Only weekly data exist
/// here, so the original grid's temporal-resolution axis is stood in for by
/// a second pair of window sizes.
pub const TREND_WINDOWS: [usize; 4] = [3, 4, 6, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionProxy {
    ShortWindow,
    LongWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrendVariation {
    pub window_weeks: usize,
    pub sqrt_transform: bool,
    pub symmetrize: bool,
    pub resolution_proxy: ResolutionProxy,
}

/// The 16 variations: windows {3,4,6,8} x {none, sqrt} x {plain, symmetrized}.
pub fn trend_variations() -> Vec<TrendVariation> {
    let mut out = Vec::with_capacity(16);
    for &window_weeks in &TREND_WINDOWS {
        for sqrt_transform in [false, true] {
            for symmetrize in [false, true] {
                out.push(TrendVariation {
                    window_weeks,
                    sqrt_transform,
                    symmetrize,
                    resolution_proxy: if window_weeks <= 4 {
                        ResolutionProxy::ShortWindow
                    } else {
                        ResolutionProxy::LongWindow
                    },
                });
            }
        }
    }
    out
}

/// One-week differences between weekly-adjacent observations strictly
/// before `before`, restricted to the trailing `window` differences when
/// given, optionally symmetrized by including negations.
fn diff_pool(
    series: &BTreeMap<Epiweek, f64>,
    before: Epiweek,
    window: Option<usize>,
    symmetrize: bool,
) -> Vec<f64> {
    let obs: Vec<(Epiweek, f64)> = series
        .iter()
        .filter(|(ew, _)| **ew < before)
        .map(|(ew, v)| (*ew, *v))
        .collect();
    let mut diffs: Vec<f64> = obs
        .windows(2)
        .filter(|w| w[0].0.succ() == w[1].0)
        .map(|w| w[1].1 - w[0].1)
        .collect();
    if let Some(w) = window {
        let keep = diffs.len().saturating_sub(w);
        diffs.drain(..keep);
    }
    if symmetrize {
        let negs: Vec<f64> = diffs.iter().map(|d| -d).collect();
        diffs.extend(negs);
    }
    diffs
}

fn last_before(series: &BTreeMap<Epiweek, f64>, before: Epiweek) -> Option<(Epiweek, f64)> {
    series
        .range(..before)
        .next_back()
        .map(|(ew, v)| (*ew, *v))
}

/// Simulate `draws` paths from `start`, each step adding a uniform draw
/// from `pool` and clamping at 0, and return midpoint-convention empirical
/// quantiles per step (0..=max_steps-1). `invert` maps simulated values
/// back to the natural scale before the quantiles are taken.
fn simulate_step_quantiles(
    start: f64,
    pool: &[f64],
    max_steps: usize,
    draws: usize,
    rng: &mut ChaCha8Rng,
    invert: impl Fn(f64) -> f64,
) -> Vec<Vec<f64>> {
    let levels = quantile_levels();
    let mut per_step: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); max_steps];
    for _ in 0..draws {
        let mut v = start;
        for step in per_step.iter_mut() {
            v = (v + pool[rng.gen_range(0..pool.len())]).max(0.0);
            step.push(invert(v));
        }
    }
    per_step
        .into_iter()
        .map(|mut vals| {
            vals.sort_by(|a, b| a.total_cmp(b));
            levels
                .levels
                .iter()
                .map(|&p| stats::quantile_midpoint_sorted(&vals, p))
                .collect()
        })
        .collect()
}

fn group_by_reference(tasks: &[ForecastTask]) -> Vec<(Epiweek, Vec<&ForecastTask>)> {
    let mut groups: BTreeMap<Epiweek, Vec<&ForecastTask>> = BTreeMap::new();
    for t in tasks {
        groups.entry(t.reference_date).or_default().push(t);
    }
    groups.into_iter().collect()
}

/// Baseline-flat: random walk whose step distribution is the symmetrized
/// pool of all historical one-week differences.
pub fn baseline_flat_forecast(
    series: &BTreeMap<Epiweek, f64>,
    tasks: &[ForecastTask],
    draws: usize,
    seed: u64,
) -> Result<Vec<QuantileForecast>> {
    let mut forecasts = Vec::with_capacity(tasks.len());
    for (g, (reference_date, group)) in group_by_reference(tasks).into_iter().enumerate() {
        let pool = diff_pool(series, reference_date, None, true);
        if pool.is_empty() {
            return Err(FlusionError::InsufficientData(format!(
                "baseline-flat needs at least 2 weekly-adjacent observations before {reference_date}"
            )));
        }
        let (last_week, last) = last_before(series, reference_date)
            .ok_or_else(|| FlusionError::InsufficientData("empty history".into()))?;
        // steps simulated from the last observation to the farthest target
        let max_steps = group
            .iter()
            .map(|t| t.target_week.weeks_since(last_week) as usize)
            .max()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(stats::derive_seed(seed, g as u64));
        let per_step = simulate_step_quantiles(last, &pool, max_steps, draws, &mut rng, |v| v);
        for task in group {
            let step = task.target_week.weeks_since(last_week) as usize - 1;
            let mut fc = QuantileForecast {
                task: task.clone(),
                values: per_step[step].clone(),
            };
            fc.sort_repair();
            forecasts.push(fc);
        }
    }
    Ok(forecasts)
}

/// Quantiles of one trend variation, per simulated step.
fn trend_variation_steps(
    series: &BTreeMap<Epiweek, f64>,
    reference_date: Epiweek,
    variation: &TrendVariation,
    max_steps: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let fwd = |v: f64| if variation.sqrt_transform { v.sqrt() } else { v };
    let transformed: BTreeMap<Epiweek, f64> =
        series.iter().map(|(ew, v)| (*ew, fwd(*v))).collect();
    let pool = diff_pool(
        &transformed,
        reference_date,
        Some(variation.window_weeks),
        variation.symmetrize,
    );
    if pool.len() < variation.window_weeks * if variation.symmetrize { 2 } else { 1 } {
        return Err(FlusionError::InsufficientData(format!(
            "trend variation needs {} weekly-adjacent observations before {reference_date}",
            variation.window_weeks + 1
        )));
    }
    let (_, last) = last_before(&transformed, reference_date)
        .ok_or_else(|| FlusionError::InsufficientData("empty history".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let invert = |v: f64| if variation.sqrt_transform { v * v } else { v };
    Ok(simulate_step_quantiles(
        last, &pool, max_steps, draws, &mut rng, invert,
    ))
}

/// Baseline-trend: quantile average of the 16 trend variations. Falls back
/// to baseline-flat (with a warning) when history is too short for the
/// largest window.
pub fn baseline_trend_forecast(
    series: &BTreeMap<Epiweek, f64>,
    tasks: &[ForecastTask],
    draws: usize,
    seed: u64,
) -> Result<Vec<QuantileForecast>> {
    let variations = trend_variations();
    let levels = quantile_levels();
    let mut forecasts = Vec::with_capacity(tasks.len());
    for (g, (reference_date, group)) in group_by_reference(tasks).into_iter().enumerate() {
        let group_seed = stats::derive_seed(seed, g as u64);
        let (last_week, _) = last_before(series, reference_date)
            .ok_or_else(|| FlusionError::InsufficientData("empty history".into()))?;
        let max_steps = group
            .iter()
            .map(|t| t.target_week.weeks_since(last_week) as usize)
            .max()
            .unwrap();

        let mut per_variation = Vec::with_capacity(variations.len());
        let mut short_history = false;
        for (v, variation) in variations.iter().enumerate() {
            match trend_variation_steps(
                series,
                reference_date,
                variation,
                max_steps,
                draws,
                stats::derive_seed(group_seed, v as u64),
            ) {
                Ok(steps) => per_variation.push(steps),
                Err(FlusionError::InsufficientData(_)) => {
                    short_history = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if short_history {
            eprintln!(
                "warning: history before {reference_date} too short for trend windows; \
                 falling back to baseline-flat"
            );
            let group_tasks: Vec<ForecastTask> = group.iter().map(|t| (*t).clone()).collect();
            forecasts.extend(baseline_flat_forecast(series, &group_tasks, draws, group_seed)?);
            continue;
        }
        for task in group {
            let step = task.target_week.weeks_since(last_week) as usize - 1;
            let values: Vec<f64> = (0..levels.len())
                .map(|k| {
                    let sum: f64 = per_variation.iter().map(|steps| steps[step][k]).sum();
                    (sum / per_variation.len() as f64).max(0.0)
                })
                .collect();
            let mut fc = QuantileForecast {
                task: task.clone(),
                values,
            };
            fc.sort_repair();
            forecasts.push(fc);
        }
    }
    Ok(forecasts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::SignalKind;

    fn series_from(values: &[f64], start: Epiweek) -> BTreeMap<Epiweek, f64> {
        let mut s = BTreeMap::new();
        let mut ew = start;
        for &v in values {
            s.insert(ew, v);
            ew = ew.succ();
        }
        s
    }

    fn tasks_at(reference: Epiweek) -> Vec<ForecastTask> {
        (0..=3)
            .map(|h| ForecastTask::new(SignalKind::Nhsn, "US", reference, h).unwrap())
            .collect()
    }

    #[test]
    fn constant_history_collapses_to_last_value() {
        let start = Epiweek::new(2022, 40).unwrap();
        let series = series_from(&[50.0; 12], start);
        let reference = start.add_weeks(12);
        for fcs in [
            baseline_flat_forecast(&series, &tasks_at(reference), 200, 1).unwrap(),
            baseline_trend_forecast(&series, &tasks_at(reference), 200, 1).unwrap(),
        ] {
            assert_eq!(fcs.len(), 4);
            for fc in fcs {
                for &v in &fc.values {
                    assert!((v - 50.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn flat_median_tracks_last_observation() {
        let start = Epiweek::new(2022, 40).unwrap();
        // a wandering but positive history
        let values: Vec<f64> = (0..30)
            .map(|i| 200.0 + 30.0 * (i as f64 * 0.7).sin() + 3.0 * i as f64)
            .collect();
        let last = *values.last().unwrap();
        let series = series_from(&values, start);
        let reference = start.add_weeks(30);
        let levels = quantile_levels();
        let fcs = baseline_flat_forecast(&series, &tasks_at(reference), DEFAULT_DRAWS, 7).unwrap();
        for fc in &fcs {
            let med = fc.median(&levels);
            assert!(
                (med - last).abs() <= 0.02 * last,
                "horizon {} median {med} vs last {last}",
                fc.task.horizon
            );
        }
    }

    #[test]
    fn interval_width_grows_with_horizon() {
        let start = Epiweek::new(2022, 40).unwrap();
        let values: Vec<f64> = (0..30).map(|i| 100.0 + ((i * 13) % 7) as f64 * 4.0).collect();
        let series = series_from(&values, start);
        let fcs =
            baseline_flat_forecast(&series, &tasks_at(start.add_weeks(30)), DEFAULT_DRAWS, 3)
                .unwrap();
        let width = |fc: &QuantileForecast| fc.values[22] - fc.values[0];
        assert!(width(&fcs[3]) >= width(&fcs[0]));
    }

    #[test]
    fn flat_is_translation_equivariant() {
        let start = Epiweek::new(2022, 40).unwrap();
        // keep values large enough that the zero clamp never binds
        let values: Vec<f64> = (0..20).map(|i| 1000.0 + ((i * 7) % 11) as f64).collect();
        let shifted: Vec<f64> = values.iter().map(|v| v + 250.0).collect();
        let reference = start.add_weeks(20);
        let a = baseline_flat_forecast(&series_from(&values, start), &tasks_at(reference), 500, 9)
            .unwrap();
        let b = baseline_flat_forecast(&series_from(&shifted, start), &tasks_at(reference), 500, 9)
            .unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            for (va, vb) in fa.values.iter().zip(&fb.values) {
                assert!((vb - va - 250.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_is_deterministic() {
        let start = Epiweek::new(2022, 40).unwrap();
        let values: Vec<f64> = (0..25).map(|i| 80.0 + (i % 5) as f64 * 6.0).collect();
        let series = series_from(&values, start);
        let tasks = tasks_at(start.add_weeks(25));
        let run = || baseline_trend_forecast(&series, &tasks, 300, 12).unwrap();
        let (a, b) = (run(), run());
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.values, fb.values);
        }
    }

    #[test]
    fn trend_follows_linear_slope() {
        let start = Epiweek::new(2022, 40).unwrap();
        let values: Vec<f64> = (0..30).map(|i| 100.0 + 5.0 * i as f64).collect();
        let last = *values.last().unwrap();
        let series = series_from(&values, start);
        let reference = start.add_weeks(30);
        let levels = quantile_levels();

        // non-symmetrized, untransformed variations: exact constant diffs,
        // so the median at horizon h is exactly last + 5 (h + 1)
        for &w in &TREND_WINDOWS {
            let variation = TrendVariation {
                window_weeks: w,
                sqrt_transform: false,
                symmetrize: false,
                resolution_proxy: ResolutionProxy::ShortWindow,
            };
            let steps =
                trend_variation_steps(&series, reference, &variation, 4, 2000, 5).unwrap();
            for h in 0..4 {
                let expect = last + 5.0 * (h as f64 + 1.0);
                let med = steps[h][levels.median_index()];
                assert!(
                    (med - expect).abs() <= 0.1 * expect,
                    "w={w} h={h}: {med} vs {expect}"
                );
            }
        }

        // symmetrized variations keep the median near the last value
        let sym = TrendVariation {
            window_weeks: 4,
            sqrt_transform: false,
            symmetrize: true,
            resolution_proxy: ResolutionProxy::ShortWindow,
        };
        let steps = trend_variation_steps(&series, reference, &sym, 4, 5000, 5).unwrap();
        assert!((steps[3][levels.median_index()] - last).abs() <= 0.05 * last);

        // the 16-way ensemble median therefore exceeds the last value
        let fcs =
            baseline_trend_forecast(&series, &tasks_at(reference), 2000, 5).unwrap();
        for fc in &fcs {
            assert!(
                fc.median(&levels) > last,
                "horizon {} median should exceed {last}",
                fc.task.horizon
            );
        }
    }

    #[test]
    fn outputs_are_nonnegative_and_monotone() {
        let start = Epiweek::new(2022, 40).unwrap();
        // tiny counts so the zero clamp engages
        let values: Vec<f64> = (0..20).map(|i| ((i * 3) % 5) as f64).collect();
        let series = series_from(&values, start);
        let tasks = tasks_at(start.add_weeks(20));
        for fcs in [
            baseline_flat_forecast(&series, &tasks, 2000, 2).unwrap(),
            baseline_trend_forecast(&series, &tasks, 2000, 2).unwrap(),
        ] {
            for fc in fcs {
                assert!(fc.is_nondecreasing());
                assert!(fc.values.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn short_history_falls_back_to_flat() {
        let start = Epiweek::new(2022, 40).unwrap();
        let series = series_from(&[10.0, 12.0, 11.0, 13.0], start);
        let tasks = tasks_at(start.add_weeks(4));
        let fcs = baseline_trend_forecast(&series, &tasks, 500, 4).unwrap();
        assert_eq!(fcs.len(), 4);
    }

    #[test]
    fn too_short_history_errors() {
        let start = Epiweek::new(2022, 40).unwrap();
        let series = series_from(&[10.0], start);
        let tasks = tasks_at(start.add_weeks(1));
        assert!(baseline_flat_forecast(&series, &tasks, 100, 1).is_err());
    }

    #[test]
    fn sixteen_distinct_variations() {
        let vars = trend_variations();
        assert_eq!(vars.len(), 16);
        for i in 0..vars.len() {
            for j in i + 1..vars.len() {
                assert_ne!(vars[i], vars[j]);
            }
        }
    }
}
