use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric positive definite (smallest eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { min_eig: f64 },

    #[error("dense path supports n <= {limit}, got n = {n}")]
    TooLarge { n: usize, limit: usize },

    #[error("operator has no dense form; a direct solve requires one")]
    NoDenseForm,

    #[error("Newton iteration did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NewtonNonConvergence { iterations: usize, residual: f64 },

    #[error("substep {index} ({kind}) failed: {source}")]
    SubstepFailed {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("micro-step {index} failed: {source}")]
    MicroStepFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("Krylov solver broke down with nonzero residual {residual:.3e} at iteration {iteration}")]
    KrylovBreakdown { iteration: usize, residual: f64 },

    #[error("{method} did not converge after {iterations} iterations (residual {residual:.3e})")]
    DidNotConverge {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
