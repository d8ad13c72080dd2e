use thiserror::Error;

/// Errors raised by the guidance, model and training pipeline.
#[derive(Debug, Error)]
pub enum SagError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("index {index} out of range for {len} patches")]
    Bounds { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("guidance misaligned: {0}")]
    Alignment(String),

    #[error("infeasible slide spec: {0}")]
    Infeasible(String),

    #[error("training diverged at seed {seed}, step {step}: {detail}")]
    Diverged { seed: u64, step: usize, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SagError {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        SagError::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T, E = SagError> = std::result::Result<T, E>;
