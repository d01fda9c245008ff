//! Quantile-averaging (Vincent) combination of component forecasts.

use std::collections::BTreeMap;

use crate::core::{ForecastTask, QuantileForecast};
use crate::error::{FlusionError, Result};

/// Equal-weight mean of the members' quantiles, level by level, followed by
/// a monotonicity repair. All members must share the task and level count.
pub fn quantile_average(members: &[&QuantileForecast]) -> Result<QuantileForecast> {
    let first = members
        .first()
        .ok_or_else(|| FlusionError::Alignment("quantile average of zero members".into()))?;
    for m in members {
        if m.task != first.task {
            return Err(FlusionError::Alignment(format!(
                "mismatched tasks in quantile average: {:?} vs {:?}",
                m.task, first.task
            )));
        }
        if m.values.len() != first.values.len() {
            return Err(FlusionError::Alignment(
                "mismatched level counts in quantile average".into(),
            ));
        }
    }
    let values = (0..first.values.len())
        .map(|k| members.iter().map(|m| m.values[k]).sum::<f64>() / members.len() as f64)
        .collect();
    let mut out = QuantileForecast {
        task: first.task.clone(),
        values,
    };
    out.sort_repair();
    Ok(out)
}

fn index_by_task(forecasts: &[QuantileForecast]) -> BTreeMap<&ForecastTask, &QuantileForecast> {
    forecasts.iter().map(|f| (&f.task, f)).collect()
}

/// Combine named component forecast sets task by task. Tasks missing from
/// any component are dropped with a warning rather than failing the run.
pub fn combine_components(
    components: &[(&str, &[QuantileForecast])],
    tasks: &[ForecastTask],
) -> Result<Vec<QuantileForecast>> {
    if components.is_empty() {
        return Err(FlusionError::Alignment("ensemble with zero components".into()));
    }
    let indexes: Vec<(&str, BTreeMap<&ForecastTask, &QuantileForecast>)> = components
        .iter()
        .map(|(name, fcs)| (*name, index_by_task(fcs)))
        .collect();
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut members = Vec::with_capacity(indexes.len());
        let mut missing = None;
        for (name, index) in &indexes {
            match index.get(task) {
                Some(fc) => members.push(*fc),
                None => {
                    missing = Some(*name);
                    break;
                }
            }
        }
        if let Some(name) = missing {
            eprintln!("warning: component {name} missing task {task:?}; task dropped");
            continue;
        }
        out.push(quantile_average(&members)?);
    }
    Ok(out)
}

/// The three-component Flusion combination.
pub fn assemble_flusion(
    gbqr: &[QuantileForecast],
    gbqr_no_level: &[QuantileForecast],
    arx: &[QuantileForecast],
    tasks: &[ForecastTask],
) -> Result<Vec<QuantileForecast>> {
    combine_components(
        &[
            ("gbqr", gbqr),
            ("gbqr_no_level", gbqr_no_level),
            ("arx", arx),
        ],
        tasks,
    )
}
