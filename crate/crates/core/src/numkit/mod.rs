//! Dense `f64` tensors and a reverse-mode tape.

mod graph;
mod tensor;

#[cfg(test)]
pub(crate) mod gradcheck;

use thiserror::Error;

pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::{dice_terms, sigmoid, softplus};
pub use tensor::Tensor;
pub(crate) use tensor::ResizePlan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank} in {op}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable #{index} is not a registered parameter of this tape")]
    UnregisteredParameter { index: usize },
    #[error("{op} received no input")]
    Empty { op: &'static str },
}
