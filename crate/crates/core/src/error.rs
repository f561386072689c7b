use thiserror::Error;

/// Errors raised anywhere in the simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("coupling infeasible for user {user}: {detail}")]
    CouplingInfeasible { user: usize, detail: String },

    #[error("mechanism error: {0}")]
    Mechanism(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported topology: group {group} has {size} members (at most 2 supported)")]
    UnsupportedTopology { group: usize, size: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("attack failed: {0}")]
    AttackFailed(String),

    #[error("enumeration size {size} exceeds budget {budget}")]
    BudgetExceeded { size: u128, budget: u128 },

    #[error("success level {level} is never crossed")]
    NoThreshold { level: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
