use thiserror::Error;

/// Errors raised by model validation and the inference engines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BjmdError {
    #[error("dimension mismatch in source {source_index}: {detail}")]
    DimensionMismatch { source_index: usize, detail: String },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite value encountered: {0}")]
    NumericOverflow(String),

    #[error("linear solve failed for row {row}: {detail}")]
    SolverFailure { row: usize, detail: String },

    #[error("singular KKT Jacobian")]
    SingularJacobian,

    #[error("all {samples} Monte Carlo samples were non-finite")]
    Estimator { samples: usize },

    #[error("variational fit diverged: {0}")]
    Divergence(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, BjmdError>;
