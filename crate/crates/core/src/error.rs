use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdmError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("log-amplitude evaluation overflowed at {0}")]
    EvaluationOverflow(String),

    #[error("system too large: {what} supports at most {max} sites, got {n}")]
    SizeGuard { what: &'static str, max: usize, n: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty sample batch")]
    EmptyBatch,

    #[error("factorization of the regularized S matrix failed (shift {shift:e}); raise the diagonal shift")]
    Factorization { shift: f64 },

    #[error("linear solve produced a non-finite update")]
    NonFiniteUpdate,

    #[error("adaptive step size fell below dt_min = {dt_min:e} at t = {t}")]
    StepUnderflow { t: f64, dt_min: f64 },

    #[error("steady state is not unique: {0}")]
    DegenerateSteadyState(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NdmError> = std::result::Result<T, E>;
