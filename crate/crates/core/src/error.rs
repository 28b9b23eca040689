use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error(
        "component k={k} has angular frequency {omega:.6} rad/step, not below Nyquist (pi); reduce phi or K"
    )]
    AboveNyquist { k: usize, omega: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at t={t} in {context}")]
    NonFinite { t: usize, context: &'static str },

    #[error("ground truth is constant, NRMSE denominator is zero")]
    ConstantTruth,

    #[error("matrix has numerically zero spectral radius")]
    ZeroSpectralRadius,

    #[error(
        "power iteration did not converge after {iterations} iterations; fall back to a dense eigensolver"
    )]
    NoConvergence { iterations: usize },

    #[error("Schur decomposition did not converge after {iterations} iterations")]
    SchurNoConvergence { iterations: usize },

    #[error("ridge system is singular at lambda={lambda}; use lambda > 0")]
    SingularSystem { lambda: f64 },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
