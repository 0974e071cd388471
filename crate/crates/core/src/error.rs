use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("unsupported size {size}: {reason}")]
    UnsupportedSize { size: usize, reason: &'static str },

    #[error("invalid truncation: requested {requested} rows from a {available}-row basis")]
    InvalidTruncation { requested: usize, available: usize },

    #[error("degenerate mask set: {0}")]
    DegenerateMask(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is singular (estimated condition number {condition:e})")]
    Singular { condition: f64 },

    #[error("parse error in {source_name} at byte {offset}: {message}")]
    Parse {
        source_name: String,
        offset: u64,
        message: String,
    },

    #[error("{source_name}:{line}: {message}")]
    ParseLine {
        source_name: String,
        line: u64,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    NonFinite { epoch: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid input or configuration rather than
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::NonFinite { .. } | Error::Singular { .. }
        )
    }
}
