//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("embedding id {id} out of range (vocab size {vocab}) at position {position}")]
    IdOutOfRange {
        id: u32,
        vocab: usize,
        position: usize,
    },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("loss for task `{task}` is non-finite")]
    NonFiniteLoss { task: String },

    #[error("duplicate parameter name `{name}`")]
    DuplicateParameter { name: String },

    #[error("unknown parameter `{name}`")]
    UnknownParameter { name: String },

    #[error("duplicate task id {task_id}")]
    DuplicateTask { task_id: usize },

    #[error("unknown task id {task_id}")]
    UnknownTask { task_id: usize },

    #[error("dataset `{name}` is empty")]
    EmptyDataset { name: String },

    #[error("split `{split}` of task `{task}` is empty")]
    EmptySplit { task: String, split: String },

    #[error("dataset {path}: {reason}")]
    Dataset { path: String, reason: String },

    #[error("sequence length {got} exceeds maximum {max}")]
    SequenceTooLong { got: usize, max: usize },

    #[error("LoRA rank {rank} exceeds host dimension {dim}")]
    DegenerateRank { rank: usize, dim: usize },

    #[error("retrieval loss needs at least 2 rows, got {rows}")]
    BatchTooSmall { rows: usize },

    #[error("label {label} outside {{0, 1}} at row {row}")]
    InvalidLabel { label: u8, row: usize },

    #[error("NaN gradient on parameter `{name}`")]
    NanGradient { name: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: u64, loss: f64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
