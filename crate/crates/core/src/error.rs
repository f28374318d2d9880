//! Error types shared by the library modules.

use thiserror::Error;

/// Errors raised by the physics and retrieval modules.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A constructor or operation received an argument outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input arrays or images disagree in shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A series or iteration failed to converge.
    #[error("convergence failure: {0}")]
    Convergence(String),

    /// A quantity that must stay finite became NaN or infinite.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// A requested observation geometry cannot be realised.
    #[error("infeasible geometry: {0}")]
    Infeasible(String),

    /// Reading or writing a cached artifact failed.
    #[error("cache error: {0}")]
    Cache(String),
}

impl CoreError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CoreError::ShapeMismatch(msg.into())
    }
}
