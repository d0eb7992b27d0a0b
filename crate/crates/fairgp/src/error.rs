//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. Variants are
//! grouped by failure class rather than by module so callers can match on
//! what went wrong (bad input, numerical breakdown, empty class, ...)
//! without caring where it happened.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the library and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Array shapes or dimensions are incompatible.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// NaN or infinity appeared where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An iterative or factorization-based routine broke down.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A conditioning class (for example the positive-label group) is empty.
    #[error("empty class: {0}")]
    EmptyClass(String),

    /// The fairness constraints exhausted the hypothesis space.
    #[error("fair subspace empty: {0}")]
    FairSubspaceEmpty(String),

    /// A basis collapsed to nothing after rank truncation.
    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    /// Prediction was requested from a model that has not been fitted.
    #[error("model not fitted")]
    NotFitted,

    /// Dataset ingestion failed (schema mismatch, bad cell, empty result).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Experiment configuration is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// The dense linear-algebra backend reported a failure.
    #[error("linear algebra backend: {0}")]
    Backend(#[from] ndarray_linalg::error::LinalgError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    ///
    /// Configuration problems exit with 2 (same class as argument-parsing
    /// failures); everything else is a runtime failure and exits with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_exit_two_others_one() {
        assert_eq!(Error::Config("bad".into()).exit_code(), 2);
        assert_eq!(Error::NotFitted.exit_code(), 1);
        assert_eq!(Error::Dataset("x".into()).exit_code(), 1);
    }

    #[test]
    fn display_includes_context() {
        let e = Error::EmptyClass("Y=1".into());
        assert!(e.to_string().contains("Y=1"));
    }
}
