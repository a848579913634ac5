//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! The tape records one node per primitive (matmul, add, scale, softmax,
//! layer norm, GELU/ReLU, embedding lookup, cross-entropy, slice, concat,
//! transpose). Values are immutable once recorded; the backward sweep visits
//! nodes in exact reverse order of recording.

mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use kernels::{gelu, gemm, layer_norm, log_softmax, normalize_row, softmax_prefix, softmax_rows, LAYER_NORM_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("shape {shape:?} has a zero dimension")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("slice of {len} rows at {start} is out of range for shape {shape:?}")]
    SliceOutOfRange { shape: Vec<usize>, start: usize, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}

pub type Result<T> = std::result::Result<T, NumericsError>;
