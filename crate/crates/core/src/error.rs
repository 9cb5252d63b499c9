use thiserror::Error;

/// Errors produced by the region evaluation, optimizers and simulators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e} below tolerance {tolerance:e}")]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("problem too large: {0}")]
    Size(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("solver did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize, last_iterate: Vec<f64> },

    #[error("loss is not strongly convex: smallest Hessian eigenvalue {min_eigenvalue:e}")]
    NotStronglyConvex { min_eigenvalue: f64 },

    #[error("malformed input: {0}")]
    Format(String),
}

impl Error {
    /// True for failures that originate in numerical routines rather than in
    /// caller-supplied configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::NotPsd { .. } | Error::NotStronglyConvex { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
