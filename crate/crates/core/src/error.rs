use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at layer `{layer}`: expected {expected}, got {got}")]
    DimensionMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },

    #[error("parameter layout does not match network spec: {0}")]
    LayoutMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint version mismatch: expected `{expected}`, found `{found}`")]
    CheckpointVersion { expected: String, found: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("environment error at step {step}: {reason}")]
    Env { step: u32, reason: String },

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
