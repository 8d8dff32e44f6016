//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes; [`Graph::backward`]
//! walks the tape once in reverse and returns gradients for every leaf that
//! requires them. Tensors are row-major; binary ops broadcast by aligning
//! trailing axes.
//!
//! # Coordinates
//!
//! Every coordinate-consuming op ([`Graph::bilinear_sample`] and friends) uses
//! the pixel-center convention: `(0, 0)` is the center of the top-left
//! pixel, `x` grows rightward along the width axis, `y` grows downward along
//! the height axis. Reads outside the field return zero.

mod graph;
mod tensor;

pub mod gradcheck;

pub use graph::{Fault, Gradients, Graph, Var};
pub use tensor::{DType, Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("invalid shape {0:?}: extents must be >= 1")]
    InvalidShape(Vec<usize>),
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}
