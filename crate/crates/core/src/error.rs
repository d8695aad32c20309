use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record `{id}`: {message}")]
    Invariant { id: String, message: String },

    #[error("duplicate architecture id `{0}`")]
    DuplicateId(String),

    #[error("unknown architecture id `{0}`")]
    UnknownId(String),

    #[error("unknown op label `{0}`")]
    UnknownOp(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("weak label missing for `{0}`")]
    MissingWeakLabel(String),

    #[error("calibration did not converge: {0}")]
    Calibration(String),

    #[error("missing or stale activation record: {0}")]
    StaleActivations(String),

    #[error("search budget {budget} exceeds space size {size}")]
    Budget { budget: usize, size: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
