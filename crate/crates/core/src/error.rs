use thiserror::Error;

/// Errors raised by the numerical kernels and estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("covariance matrix is not numerically positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("non-finite state for particle {particle} at step {step}")]
    NonFiniteState { particle: usize, step: usize },

    #[error("non-finite atom at index {0}")]
    NonFiniteAtom(usize),

    #[error("sigma inverse is required for the Bismut weight but the diffusion is not invertible")]
    MissingSigmaInverse,

    #[error("Kalman rank condition fails: rank {rank} < {required}")]
    KalmanRank { rank: usize, required: usize },

    #[error("controllability Gramian is ill-conditioned (condition number {condition:e}); its lower bound rho(T) is not positive at working precision")]
    IllConditionedGramian { condition: f64 },

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
