use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("matrix is singular (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver hit the iteration limit ({iterations} sweeps)")]
    MaxIterations { iterations: usize },

    #[error("logistic solver diverged (|coefficient| = {max_abs:.3e}); the data may be separable")]
    Diverged { max_abs: f64 },

    #[error("treatment indicator is constant; propensity cannot be estimated")]
    DegenerateTreatment,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fold {fold} has fewer than {required} complete cases")]
    InsufficientCompleteCases { fold: usize, required: usize },

    #[error("all single-index scores are equal; bandwidth is undefined")]
    DegenerateScores,

    #[error("nodewise regression for column {column} left residual variance {tau2:.3e}")]
    DegenerateColumn { column: usize, tau2: f64 },

    #[error("malformed records: {0}")]
    MalformedRecords(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{failed} of {total} replications failed, above the 10% budget")]
    FailureBudget { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
