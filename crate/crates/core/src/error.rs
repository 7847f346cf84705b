use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("training diverged at {phase} step {step}: loss {loss}")]
    Divergence {
        phase: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    #[error("trace too large for exact hyper-gradient: {0}")]
    TraceTooLarge(String),

    #[error("oracle check failed: {0}")]
    Oracle(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema { .. } | Error::Io { .. } | Error::Checkpoint(_) => 1,
            Error::Shape(_) => 1,
            Error::NonFinite { .. }
            | Error::Divergence { .. }
            | Error::UndefinedMetric(_)
            | Error::TraceTooLarge(_) => 2,
            Error::Oracle(_) => 3,
        }
    }
}
