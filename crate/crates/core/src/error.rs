use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("assembly failed: {0}")]
    Assembly(String),

    /// An iterative or direct solver did not reach its tolerance.
    #[error("numerical failure in {context} after {iterations} iterations (residual {residual:.3e})")]
    NumericalFailure {
        context: String,
        iterations: usize,
        residual: f64,
    },

    /// The dual candidate violates the conjugate constraint; rescale it first.
    #[error("infeasible dual certificate: sup norm {norm:.6e} exceeds bound {bound:.6e}")]
    InfeasibleCertificate { norm: f64, bound: f64 },

    #[error("mesh format error on line {line}: {message}")]
    Format { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(context: impl Into<String>, iterations: usize, residual: f64) -> Self {
        Error::NumericalFailure {
            context: context.into(),
            iterations,
            residual,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
