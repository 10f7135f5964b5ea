use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate observation at line {line}: ({row}, {col}) already present")]
    DuplicateObservation { line: usize, row: usize, col: usize },

    #[error("observation set is empty")]
    EmptyObservations,

    #[error("index ({row}, {col}) out of range for {n_rows}x{n_cols} array")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        n_rows: usize,
        n_cols: usize,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("training diverged after epoch {last_finite_epoch}")]
    Diverged { last_finite_epoch: usize },

    #[error("all {0} lambda runs diverged")]
    AllRunsDiverged(usize),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u16, expected: u16 },

    #[error("checkpoint truncated while reading {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
