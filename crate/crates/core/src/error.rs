use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the soup pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes in {path}: expected \"SOUP\"")]
    BadMagic { path: PathBuf },

    #[error("unsupported checkpoint version {version} in {path} (expected 1)")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("CRC mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("truncated checkpoint file {path}")]
    Truncated { path: PathBuf },

    #[error("malformed checkpoint {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("invalid layer map: {0}")]
    InvalidLayout(String),

    #[error("layer map of {path} differs from the first checkpoint in the manifest")]
    InconsistentLayout { path: PathBuf },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("checkpoint id {0} not found in manifest")]
    NotFound(usize),

    #[error("residency budget exceeded: {requested} more vectors requested with {resident} resident (ceiling {ceiling})")]
    BudgetViolation {
        requested: usize,
        resident: usize,
        ceiling: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
