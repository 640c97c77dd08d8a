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

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: line {line}: missing required field \"{field}\"")]
    MissingField {
        path: PathBuf,
        line: usize,
        field: String,
    },

    #[error("record \"{id}\": {message}")]
    InvalidRecord { id: String, message: String },

    #[error("checkpoint version mismatch: file has \"{found}\", reader expects \"{expected}\"")]
    VersionMismatch { found: String, expected: String },

    #[error("checkpoint truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("checkpoint malformed: {0}")]
    Checkpoint(String),

    #[error("degenerate embedding (norm {norm:e})")]
    DegenerateEmbedding { norm: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty text: {0:?} yields no tokens")]
    EmptyText(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid prompt bank: {0}")]
    PromptBank(String),

    #[error("not enough entities: requested {requested}, tree has {available}")]
    NotEnoughEntities { requested: usize, available: usize },

    #[error("non-finite {what} in {name}")]
    NonFinite { what: &'static str, name: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numeric failures (NaN/inf in a loss or gradient) as opposed to bad
    /// input data or usage.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
