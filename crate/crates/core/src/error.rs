use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("oracle undefined at t = {t}: velocity and score require t > 0")]
    SingularTime { t: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingFailure { step: usize, loss: f64 },
    #[error("checkpoint error in field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidPrompt(_) => "invalid-prompt",
            Error::Domain(_) => "domain",
            Error::SingularTime { .. } => "singular-time",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Numerical(_) => "numerical",
            Error::TrainingFailure { .. } => "training-failure",
            Error::Checkpoint { .. } => "checkpoint",
            Error::MissingInput(_) => "missing-input",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
