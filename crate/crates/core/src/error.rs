use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value out of declared range: {0}")]
    Range(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed png {}: {reason}", path.display())]
    MalformedPng { path: PathBuf, reason: String },

    #[error("unsupported png bit depth {depth} in {}", path.display())]
    UnsupportedBitDepth { path: PathBuf, depth: u8 },

    #[error("dataset split file missing: {}", .0.display())]
    MissingCsv(PathBuf),

    #[error("row {row}: referenced file missing: {}", path.display())]
    MissingReferencedFile { row: usize, path: PathBuf },

    #[error("row {row}: malformed row: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("non-finite loss at step {step} ({what})")]
    NonFiniteLoss { step: u64, what: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::MissingFile(_)
            | Error::MalformedPng { .. }
            | Error::UnsupportedBitDepth { .. }
            | Error::MissingCsv(_)
            | Error::MissingReferencedFile { .. }
            | Error::MalformedRow { .. }
            | Error::InsufficientSamples { .. }
            | Error::Checkpoint(_) => 3,
            Error::NonFiniteLoss { .. } | Error::Numerical(_) => 4,
            Error::Shape(_) | Error::Range(_) | Error::Io(_) | Error::Json(_) => 1,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
