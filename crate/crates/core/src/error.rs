use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no interactions")]
    NoInteractions,

    #[error("missing images for items {0:?}")]
    MissingImages(Vec<usize>),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index out of range: {what} {index} (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("degenerate layer {0}: all weights are zero")]
    DegenerateLayer(usize),

    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("oracle mode violation: {0}")]
    ModeViolation(&'static str),

    #[error("unknown item {0}")]
    UnknownItem(usize),

    #[error("unknown user {0}")]
    UnknownUser(usize),

    #[error("empty history")]
    EmptyHistory,

    #[error("perturbation system is degenerate; draw a fresh set")]
    Resample,

    #[error("pushed item {0} is not visible in the revealed ranking")]
    NotVisible(usize),

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
