//! Probabilistic forecasting of weekly influenza hospital admissions from
//! multiple surveillance signals.
//!
//! The pipeline ingests surveillance CSVs, applies reporting adjustments,
//! standardizes each series, engineers windowed features, fits gradient
//! boosted quantile regression and Bayesian ARX component models, combines
//! them by quantile averaging, and evaluates forecasts with WIS-based
//! metrics through a backtesting CLI.

pub mod arx;
pub mod baselines;
pub mod cli;
pub mod core;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod gbqr;
pub mod ingest;
pub mod score;
pub mod stats;
pub mod synthetic;
pub mod transform;

pub use error::FlusionError;
