//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Everything differentiable in this crate is expressed through the
//! primitives in [`Op`]; no broadcasting beyond scalar-against-array is
//! supported, so shape bugs surface as errors instead of silent garbage.

mod array;
mod check;
mod tape;

pub use array::Array;
pub use check::grad_check;
pub use tape::{NodeId, Op, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: input must be strictly positive")]
    NonPositiveInput { op: &'static str },
    #[error("{op}: zero-norm input")]
    ZeroNorm { op: &'static str },
    #[error("loss must be scalar-shaped, got {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gather index {index} out of range for axis of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("array contains a non-finite value")]
    NonFinite,
    #[error("non-finite function value")]
    NonFiniteLoss,
}
