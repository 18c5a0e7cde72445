use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("{path}: cannot encode image: {reason}")]
    Encode { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("semantic map uses index {0} which is missing from the palette")]
    UnknownClassIndex(u32),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("font has no glyph for {0:?}")]
    MissingGlyph(char),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("text does not fit: {0}")]
    DoesNotFit(String),

    #[error("shape mismatch at {node}: expected {expected}, got {actual}")]
    Shape {
        node: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("training diverged at iteration {iteration}; last good checkpoint: {last_good:?}")]
    Diverged {
        iteration: usize,
        last_good: Option<PathBuf>,
    },

    #[error("recognizer reached only {accuracy:.3} held-out accuracy (need {required:.2})")]
    TrainingFailed { accuracy: f64, required: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
