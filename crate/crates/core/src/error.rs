use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file. `location` names the line/column or the offending field.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// A value violates a documented range or structural invariant.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("line {from}-{to} not present in case")]
    MissingLine { from: usize, to: usize },

    #[error("equilibrium solve failed after {iterations} iterations (residual {residual:.3e}): {reason}")]
    Equilibrium {
        iterations: usize,
        residual: f64,
        reason: String,
    },

    /// Cholesky failed; `pivot` is the 0-based index of the first non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot}, value {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("correlation matrix is not positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    IndefiniteCorrelation { min_eigenvalue: f64 },

    #[error("simulation blew up in realization {realization} at t = {time}")]
    BlowUp { realization: usize, time: f64 },

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("CFL violation: dt = {dt:.3e} exceeds stable limit {limit:.3e}")]
    Cfl { dt: f64, limit: f64 },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{artifact} missing; run {producer}")]
    MissingArtifact { artifact: String, producer: String },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}
