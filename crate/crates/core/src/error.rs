use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed event file: {0}")]
    MalformedFile(String),

    #[error("event record {index} out of bounds: ({x}, {y}) not inside {width}x{height}")]
    OutOfBounds {
        index: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty event stream")]
    EmptyStream,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid crop rect: {0}")]
    InvalidRect(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: expected {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("template error: {0}")]
    Template(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown category: {0}")]
    UnknownCategory(String),

    #[error("category `{category}` has {available} images, need at least {required}")]
    TooFewImages {
        category: String,
        available: usize,
        required: usize,
    },

    #[error("incompatible file version: found {found}, supported {supported}")]
    Version { found: u32, supported: u32 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
