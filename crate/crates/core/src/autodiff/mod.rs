//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values are `f64` end to end; the [`container`] file format narrows to
//! `f32` on disk. A [`Tape`] records one forward pass and is consumed by
//! [`Tape::backward`]; distinct tapes are independent, so callers may run
//! one tape per thread.

pub mod container;
mod ops;
mod tape;
mod tensor;

pub use tape::{GradStore, Gradients, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    BadShape { op: &'static str, msg: String },
    #[error("conv2d: output size for input {size} with k={k} pad={pad} stride={stride} is not integral")]
    NonIntegralConv {
        size: usize,
        k: usize,
        pad: usize,
        stride: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not attached to the tape")]
    DetachedLoss,
}
