use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty after dropping {dropped} incomplete rows")]
    EmptyDataset { dropped: usize },

    #[error("cannot parse value {value:?} at row {row}, column {column:?}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("column {0:?} not found")]
    MissingColumn(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("matrix not positive definite ({context}); condition estimate {condition:.3e}")]
    Singular { context: String, condition: f64 },

    #[error("saturated model: transformed R^2 equals one, marginal likelihood integral diverges")]
    Saturated,

    #[error("exact enumeration refused for n = {n} (limit {limit}); use the MCMC path")]
    TooLarge { n: usize, limit: usize },

    #[error("stick extension exceeded {cap} sticks")]
    StickCap { cap: usize },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("not enough draws: need at least {needed}, have {have}")]
    TooFewDraws { needed: usize, have: usize },

    #[error("chain produced a non-finite state at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
