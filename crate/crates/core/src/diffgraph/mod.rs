//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Operations are recorded on a [`Tape`] as they execute. Every recorded
//! node keeps its forward value, so a single reverse sweep from a scalar
//! root yields gradients for every trainable leaf. Nodes built only from
//! constants are recorded but never receive gradients, which makes the same
//! model code usable for inference.
//!
//! Broadcasting is limited to repeating an operand over leading dimensions
//! (its shape must be a suffix of the other operand's shape).

mod check;
mod tape;
mod taps;
mod tensor;

pub use check::{gradient_check, relative_error, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use taps::BilinearTaps;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("{0} requires at least one input")]
    EmptyInput(&'static str),
}

#[cfg(test)]
mod tests;
