use alloc::string::String;

use crate::reconstruction::OptimizerTrace;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions {0:?}: every axis needs at least one voxel")]
    InvalidDims([usize; 3]),

    #[error("invalid spacing {0:?}: every axis must be finite and positive")]
    InvalidSpacing([f64; 3]),

    #[error("data length {actual} does not match expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("volume is not a binary mask: {0}")]
    NotBinary(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("system matrix exceeds the budget of {budget} nonzeros; use a matrix-free projector")]
    MemoryBudget { budget: usize },

    #[error("view index {index} out of range for {n_views} views")]
    ViewOutOfRange { index: usize, n_views: usize },

    #[error("optimizer diverged at iteration {iteration}")]
    Diverged { iteration: usize, trace: OptimizerTrace },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("estimator error: {0}")]
    Estimator(String),
}
