use std::fmt;
use std::path::PathBuf;

/// A broken data-model invariant, located by rollout and field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    /// `None` for group-level violations.
    pub rollout_id: Option<String>,
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn rollout(rollout_id: &str, field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            rollout_id: Some(rollout_id.to_string()),
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn group(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            rollout_id: None,
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.rollout_id {
            Some(id) => write!(f, "rollout `{id}`, field `{}`: {}", self.field, self.reason),
            None => write!(f, "group field `{}`: {}", self.field, self.reason),
        }
    }
}

impl std::error::Error for ValidationError {}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: {source}")]
    InvalidRecord {
        line: usize,
        #[source]
        source: ValidationError,
    },

    #[error("invalid trace: {0}")]
    Validation(#[from] ValidationError),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rollout `{rollout_id}` step {step}: token log-probabilities are required but absent")]
    MissingLogprobs { rollout_id: String, step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
