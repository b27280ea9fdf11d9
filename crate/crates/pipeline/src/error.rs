use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] treefield_core::Error),
    #[error(transparent)]
    Field(#[from] treefield_field::FieldError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training cases")]
    NoCases,
    #[error("non-finite loss at step {step}: repair {repair}, label {label}, recon {recon}")]
    NonFiniteLoss { step: usize, repair: f64, label: f64, recon: f64 },
    #[error("{task} target {target} outside 1..={classes}")]
    TargetRange { task: &'static str, target: u8, classes: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
