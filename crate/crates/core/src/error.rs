use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty behavior sequence")]
    EmptyBehaviorSequence,

    #[error("no behaviors")]
    NoBehaviors,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("undefined AUC: {0}")]
    UndefinedAuc(String),

    #[error("no usable groups for GAUC ({0} groups, all single-class or zero-weight)")]
    NoUsableGroups(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
