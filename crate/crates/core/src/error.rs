//! Error type shared across the library.

use thiserror::Error;

/// Coarse failure category, used by callers (e.g. the CLI) to map errors
/// onto distinct exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Malformed input files or unparseable text.
    Parse,
    /// Inputs that parsed but violate a contract (bad shapes, bad ranges,
    /// missing entries, invalid configuration).
    Validation,
    /// Failures that arise while computing (divergence, I/O, depletion of
    /// preconditions discovered at run time).
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {source_name} (line {line}): {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("invalid quantization params: {0}")]
    InvalidParams(String),

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("graph build failed: {0}")]
    GraphBuild(String),

    #[error("missing weight tensor '{0}'")]
    MissingWeight(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Parse { .. } => ErrorCategory::Parse,
            Error::InvalidParams(_)
            | Error::NonFinite { .. }
            | Error::ShapeMismatch { .. }
            | Error::GraphBuild(_)
            | Error::MissingWeight(_)
            | Error::Invalid(_) => ErrorCategory::Validation,
            Error::Diverged { .. } | Error::Io { .. } => ErrorCategory::Runtime,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(source_name: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { source_name: source_name.into(), line, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
