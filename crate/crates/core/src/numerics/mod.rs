//! Dense arrays, reverse-mode differentiation and finite-difference checks.

mod array;
mod graph;
mod gradcheck;
mod scalar;

pub use array::{NdArray, ARRAY_MAGIC, ARRAY_VERSION};
pub use gradcheck::{grad_check, primitive_suite, GradCheckReport, GRAD_CHECK_EPS};
pub use graph::{Gradients, Graph, Var};
pub use scalar::{DType, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("slice [{start}, {start}+{len}) out of range on axis {axis} of {shape:?}")]
    BadSlice {
        shape: Vec<usize>,
        axis: usize,
        start: usize,
        len: usize,
    },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        shape: Vec<usize>,
        axis: usize,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("array format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
