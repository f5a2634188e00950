use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("subject {id}: {message} (t={t})")]
    Validation { id: String, t: usize, message: String },

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no at-risk observations")]
    NoAtRiskRows,

    #[error("no subjects can have sufficient follow-up at t0={0}")]
    NoFollowUp(usize),

    #[error("empty stratum tau >= {0}")]
    EmptyStratum(usize),

    #[error("estimate undefined at t0={t0}: {reason}")]
    Undefined { t0: usize, reason: String },

    #[error("learner failed: {0}")]
    Learner(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
