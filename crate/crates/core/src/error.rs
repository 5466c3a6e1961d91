//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or configuration values.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation precondition (index out of range, mismatched shapes).
    #[error("usage error: {0}")]
    Usage(String),
    /// Non-finite values or zero-mass distributions where positive mass is required.
    #[error("numeric domain error: {0}")]
    Domain(String),
    /// An enumeration or allocation guard was exceeded.
    #[error("capacity error: {0}")]
    Capacity(String),
    /// An iterative solver did not reach its tolerance.
    #[error("did not converge after {iters} iterations (final gradient norm {grad_norm:e})")]
    Convergence { iters: usize, grad_norm: f64 },
    /// The training pipeline could not proceed.
    #[error("pipeline error: {0}")]
    Pipeline(String),
    /// Model metadata does not match what the caller expects.
    #[error("model mismatch: {0}")]
    Mismatch(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
