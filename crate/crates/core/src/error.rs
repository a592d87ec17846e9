use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("structure mismatch: {0}")]
    Structure(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("no usable data: {0}")]
    EmptyData(String),
    #[error("silo `{silo}` has no records for test year {year}")]
    NoTestRecords { silo: String, year: i32 },
    #[error("invalid privacy parameter: {0}")]
    Privacy(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid config at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }
}
