use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("archive error at {path}: {message}")]
    Archive { path: PathBuf, message: String },

    #[error("integrity error for {subject}: {message}")]
    Integrity { subject: String, message: String },

    #[error("unknown event id {0:?}")]
    Lookup(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn archive(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Self::Archive { path: path.into(), message: message.to_string() }
    }

    pub(crate) fn integrity(subject: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Self::Integrity { subject: subject.into(), message: message.to_string() }
    }

    /// Prefixes a numeric error with where it happened; other kinds pass through.
    pub fn with_context(self, context: impl std::fmt::Display) -> Self {
        match self {
            Self::Numeric(m) => Self::Numeric(format!("{context}: {m}")),
            other => other,
        }
    }
}

pub(crate) fn arg_err<T>(message: impl Into<String>) -> Result<T> {
    Err(Error::Argument(message.into()))
}
