//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ScingError>;

#[derive(Debug, Error)]
pub enum ScingError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("missing key: {0}")]
    Key(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("no evaluable queries: {0}")]
    EmptyReport(String),

    #[error("training aborted at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
}

impl ScingError {
    pub fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        ScingError::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ScingError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScingError::Config(_) | ScingError::Index { .. } | ScingError::Key(_) => 2,
            ScingError::Shape { .. } => 2,
            ScingError::Io { .. }
            | ScingError::Data(_)
            | ScingError::Checkpoint(_)
            | ScingError::EmptyReport(_) => 3,
            ScingError::Numeric(_) | ScingError::NonFiniteLoss { .. } => 4,
        }
    }
}
