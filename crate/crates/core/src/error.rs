use thiserror::Error;

/// Errors raised anywhere in the training, inference and analysis pipeline.
#[derive(Debug, Error)]
pub enum PearlError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite loss {loss} at {context}")]
    Divergence { loss: f64, context: String },

    #[error("branch {branch} out of range (network has {count})")]
    BranchOutOfRange { branch: usize, count: usize },

    #[error("no exit branch satisfies both the utility and privacy budgets")]
    Infeasible,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("clothing surface temperature iteration did not converge after {0} iterations")]
    PmvNonConvergent(usize),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PearlError>;
