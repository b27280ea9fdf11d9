//! Losses, multi-task training, full-volume inference and case evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod loss;
pub mod optim;
pub mod train;

pub use config::{Supervision, TrainConfig};
pub use data::{build_cases, corrupt_case, derive_seed, field_input, prepare, weak_sample_for, Case, Prepared};
pub use error::{PipelineError, Result};
pub use eval::{evaluate_case, evaluate_cases, summarize, CaseEvaluation, Summary};
pub use infer::{head_at_voxels, infer_full, InferOptions, InferenceResult, Timings, REPAIR_THRESHOLD};
pub use loss::{loss_ce, loss_ce_grad, loss_repair, loss_repair_grad, total_loss, TaskLosses};
pub use optim::Adam;
pub use train::{case_loss, history_csv, query_input, train, train_with, write_history_csv, HistoryRow, TrainOutcome};
