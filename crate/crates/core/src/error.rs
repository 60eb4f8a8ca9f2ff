use thiserror::Error;

use crate::metadata::BlockId;

pub type Result<T> = std::result::Result<T, PsaError>;

#[derive(Debug, Error)]
pub enum PsaError {
    #[error("empty context")]
    EmptyContext,

    #[error("empty block")]
    EmptyBlock,

    #[error("no blocks processed")]
    NoBlocksProcessed,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {keys} keys vs {values} values")]
    LengthMismatch { keys: usize, values: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("duplicate block id {0}")]
    DuplicateBlock(BlockId),

    #[error("unknown block id {0}")]
    UnknownBlock(BlockId),

    #[error("unknown request {0}")]
    UnknownRequest(u64),

    #[error("unschedulable request {request}: {reason}")]
    Unschedulable { request: u64, reason: String },

    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("pipeline loader terminated unexpectedly")]
    LoaderPanicked,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PsaError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        PsaError::InvalidConfig(msg.into())
    }
}
