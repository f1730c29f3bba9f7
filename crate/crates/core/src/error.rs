use std::path::PathBuf;

use thiserror::Error;

use crate::trace_store::Violation;

/// Errors raised by the toolkit.
///
/// Ensemble-level inconsistencies are not errors: they are reported as a
/// list of [`Violation`]s by
/// [`validate_ensemble`](crate::trace_store::validate_ensemble).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed npy data: {0}")]
    Npy(String),

    #[error("expected a {expected}-dimensional array, found shape {found:?}")]
    Rank { expected: usize, found: Vec<usize> },

    #[error("non-finite value {value} at index {index:?}")]
    NonFinite { index: Vec<usize>, value: f64 },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("ensemble failed validation: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("svd did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("training diverged at epoch {epoch} (loss {loss}); try a smaller learning rate")]
    Diverged { epoch: usize, loss: f64 },

    #[error("undefined statistic: {0}")]
    Undefined(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
