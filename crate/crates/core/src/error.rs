use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied malformed or out-of-contract data.
    #[error("input error: {0}")]
    Input(String),

    /// An iterative routine failed to converge.
    #[error("numerical error: {msg} after {iterations} iterations")]
    Numerical { msg: String, iterations: usize },

    /// A feature vector collapsed before normalization.
    #[error("degenerate feature: pre-normalization norm {norm:e}")]
    DegenerateFeature { norm: f64 },

    /// Model state is missing an artifact or violates a lifecycle rule.
    #[error("state error: {0}")]
    State(String),

    /// Threshold calibration could not proceed.
    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}

pub(crate) fn state_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::State(msg.into()))
}
