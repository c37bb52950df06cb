//! Minimal dense tensors with reverse-mode automatic differentiation.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, ZERO_NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for extent {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: argument outside the domain at flat index {index}")]
    Domain { op: &'static str, index: usize },
    #[error("clip threshold must be positive and finite, got {0}")]
    InvalidClip(f64),
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
