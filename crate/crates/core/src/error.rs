use std::path::PathBuf;

use crate::tensor::Dims;

/// Crate-wide error type.
///
/// Every variant carries enough context to be reported as a single
/// `error: <code>: <message>` line by the CLI; `code()` returns the
/// machine-parseable code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Dims,
        rhs: Dims,
    },

    #[error("{0}")]
    Config(String),

    #[error("architecture error at layer {layer}: {msg}")]
    Architecture { layer: String, msg: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}")]
    Autodiff(String),

    #[error("{0}")]
    Checkpoint(String),

    #[error("{0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("training diverged at iteration {iter} ({what})")]
    Diverged { iter: u64, what: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable code for CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::Config(_) => "config",
            Error::Architecture { .. } => "architecture",
            Error::NonFinite(_) => "nonfinite",
            Error::Autodiff(_) => "autodiff",
            Error::Checkpoint(_) => "checkpoint",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
            Error::Diverged { .. } => "divergence",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
