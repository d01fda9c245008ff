//! Forecast tasks, the 23-level quantile scheme, and quantile forecasts.

use super::calendar::Epiweek;
use super::SignalKind;
use crate::error::{FlusionError, Result};
use serde::{Deserialize, Serialize};

/// The fixed 23 quantile levels: median plus endpoints of the central
/// 10%..90%, 95%, and 98% prediction intervals.
pub const LEVELS: [f64; 23] = [
    0.01, 0.025, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65,
    0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 0.975, 0.99,
];

/// The quantile-level scheme shared by all forecasters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileLevels {
    pub levels: Vec<f64>,
}

impl QuantileLevels {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the median level.
    pub fn median_index(&self) -> usize {
        self.levels
            .iter()
            .position(|&a| a == 0.5)
            .expect("median level present")
    }
}

/// The standard 23-level scheme.
pub fn quantile_levels() -> QuantileLevels {
    QuantileLevels {
        levels: LEVELS.to_vec(),
    }
}

/// One forecast task: signal, location, reference date, and horizon.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ForecastTask {
    pub source: SignalKind,
    pub location: String,
    pub reference_date: Epiweek,
    pub horizon: u8,
    pub target_week: Epiweek,
}

impl ForecastTask {
    pub fn new(
        source: SignalKind,
        location: impl Into<String>,
        reference_date: Epiweek,
        horizon: u8,
    ) -> Result<ForecastTask> {
        if horizon > 3 {
            return Err(FlusionError::Domain(format!(
                "horizon {horizon} outside 0..3"
            )));
        }
        Ok(ForecastTask {
            source,
            location: location.into(),
            reference_date,
            horizon,
            target_week: reference_date.add_weeks(horizon as i64),
        })
    }
}

/// Predictive quantiles for one task, on the original count scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileForecast {
    pub task: ForecastTask,
    pub values: Vec<f64>,
}

impl QuantileForecast {
    /// Sort values in place to repair quantile crossings.
    pub fn sort_repair(&mut self) {
        self.values.sort_by(|a, b| a.total_cmp(b));
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn median(&self, levels: &QuantileLevels) -> f64 {
        self.values[levels.median_index()]
    }
}
