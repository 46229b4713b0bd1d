use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("backward: root must be a 1x1 scalar, got {0:?}")]
    NonScalarRoot((usize, usize)),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("level {0} is outside 1..=3")]
    Level(u8),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("inconsistent report {image_id}: {message}")]
    Inconsistent { image_id: String, message: String },

    #[error("answer mask has no valid entry")]
    EmptyMask,

    #[error("vocabulary mismatch: {0}")]
    Vocabulary(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
