//! Shared data model: calendar arithmetic, signal and location identity,
//! the quantile-level scheme, and forecast task types.

mod calendar;
mod forecast;
mod registry;

pub use calendar::{
    christmas_offset, christmas_week, season_label, season_week, weeks_in_year, Epiweek,
    SeasonWeek,
};
pub use forecast::{quantile_levels, ForecastTask, QuantileForecast, QuantileLevels};
pub use registry::{LocationInfo, LocationRegistry, SpatialScale};

use crate::error::{FlusionError, Result};
use serde::{Deserialize, Serialize};

/// One of the three surveillance signals. Integer codes follow the
/// conventional signal index: NHSN = 1, FluSurv = 2, ILI+ = 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalKind {
    Nhsn,
    Flusurv,
    IliPlus,
}

impl SignalKind {
    pub const ALL: [SignalKind; 3] = [SignalKind::Nhsn, SignalKind::Flusurv, SignalKind::IliPlus];

    pub fn code(self) -> u8 {
        match self {
            SignalKind::Nhsn => 1,
            SignalKind::Flusurv => 2,
            SignalKind::IliPlus => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::Nhsn => "nhsn",
            SignalKind::Flusurv => "flusurv",
            SignalKind::IliPlus => "iliplus",
        }
    }

    pub fn parse(s: &str) -> Result<SignalKind> {
        match s {
            "nhsn" => Ok(SignalKind::Nhsn),
            "flusurv" => Ok(SignalKind::Flusurv),
            "iliplus" => Ok(SignalKind::IliPlus),
            other => Err(FlusionError::Domain(format!(
                "unknown signal kind {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for SignalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identity of one surveillance series: which signal, for which location.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeriesKey {
    pub source: SignalKind,
    pub location: String,
}

impl SeriesKey {
    pub fn new(source: SignalKind, location: impl Into<String>) -> SeriesKey {
        SeriesKey {
            source,
            location: location.into(),
        }
    }
}

impl std::fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.source, self.location)
    }
}

/// One value of one surveillance signal for one location and week.
/// Counts for NHSN, rate per 100k for FluSurv, percent for ILI+.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub key: SeriesKey,
    pub epiweek: Epiweek,
    pub value: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signal_codes_are_stable() {
        assert_eq!(SignalKind::Nhsn.code(), 1);
        assert_eq!(SignalKind::Flusurv.code(), 2);
        assert_eq!(SignalKind::IliPlus.code(), 3);
    }

    #[test]
    fn signal_parse_round_trips() {
        for s in SignalKind::ALL {
            assert_eq!(SignalKind::parse(s.as_str()).unwrap(), s);
        }
        assert!(SignalKind::parse("ili").is_err());
    }
}
