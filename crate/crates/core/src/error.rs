use std::path::PathBuf;

/// Errors raised by the retforge core library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: u64, found: u64 },

    #[error("data integrity error: {0}")]
    DataIntegrity(String),

    #[error("unknown document `{0}`")]
    Lookup(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cannot L2-normalize a zero vector (document `{doc_id}`)")]
    Normalization { doc_id: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: String, found: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
