use std::path::PathBuf;

use thiserror::Error;

use crate::linalg::LinalgError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("{context}: dimension mismatch (expected {expected}, got {got})")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A standard deviation entry is zero, so the τ-block `ε / (2σ)` is undefined.
    #[error("degenerate variance: sigma[{index}] = 0")]
    DegenerateVariance { index: usize },

    #[error("degenerate pre-activation variance for output unit {unit}")]
    DegeneratePreactivationVariance { unit: usize },

    #[error("invalid variance tau[{index}] = {value} (must be finite and > 0)")]
    InvalidVariance { index: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("non-finite gradient at parameter {index}: {value}")]
    NonFiniteGradient { index: usize, value: f64 },

    #[error("layer {layer}: {reason}")]
    Network { layer: usize, reason: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Io { .. } | Error::Csv { .. } => ErrorCategory::Io,
            Error::AtStep { source, .. } => source.category(),
            _ => ErrorCategory::Numeric,
        }
    }

    pub(crate) fn at_step(step: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtStep {
            step,
            source: Box::new(source),
        }
    }
}
