//! Reverse-mode differentiation sized for the CCSPNet layer stack.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node whose parents
//! already exist, so index order is a topological order and the backward
//! sweep simply walks the tape in reverse. Adjoints of shared
//! sub-expressions accumulate additively.

mod adam;
mod graph;
mod ops;
mod tensor;

pub use adam::{AdamState, Param};
pub use graph::{Gradients, Graph, Var};
pub use ops::{
    fisher_value, softmax_vec, BatchNormMode, BatchNormStats, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("log-variance of row {row} is undefined (zero variance)")]
    ZeroVariance { row: usize },
    #[error("Fisher criterion undefined: class means coincide")]
    CoincidentMeans,
    #[error("both classes must be present")]
    MissingClass,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{0}")]
    Wavelet(#[from] crate::dsp::DspError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
