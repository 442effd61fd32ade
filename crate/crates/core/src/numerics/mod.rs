//! Dense tensors and reverse-mode differentiation sized for a small
//! transformer encoder-decoder.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod real;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_sampled, primitive_checks, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use kernels::{attention, gelu, layer_norm, matmul, softmax};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("embedding dim {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("expected a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} is not part of this graph")]
    UnknownNode(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
