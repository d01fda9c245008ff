use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum FlusionError {
    #[error("calendar error: {0}")]
    Calendar(String),

    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("registry error: unknown location code {0:?}")]
    UnknownLocation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("MCMC did not converge: {0}")]
    NonConvergence(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("undefined score: {0}")]
    UndefinedScore(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FlusionError>;
