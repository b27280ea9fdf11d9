use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("neighbor count mismatch: expected {expected}, found {found}")]
    NeighborCount { expected: usize, found: usize },
    #[error("unknown fusion mode {0:?}")]
    UnknownMode(String),
    #[error("plane resolution {0} is not divisible by 4")]
    Resolution(usize),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] treefield_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FieldError>;
