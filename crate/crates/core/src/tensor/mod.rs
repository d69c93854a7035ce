//! Dense f64 tensor kernel with tape-based reverse-mode gradients.
//!
//! Everything numeric in this crate — the patch encoder, the language
//! model, the projector and all training losses — is expressed through
//! [`Tensor`] values and [`Tape`] operations, so a single gradient
//! checker covers the whole model.

mod tape;

pub mod fd;

pub use tape::{Tape, Var};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?} (numel {numel})")]
    DataLength {
        shape: Vec<usize>,
        len: usize,
        numel: usize,
    },
    #[error("index {index} out of bounds for axis of size {size} in {op}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("cross entropy over an empty set: every position is masked out")]
    EmptyLoss,
    #[error("empty input to {op}: at least one element required")]
    EmptyInput { op: &'static str },
    #[error("degenerate input to {op}: {what}")]
    DegenerateInput { op: &'static str, what: String },
    #[error("backward root must be a scalar, got shape {got:?}")]
    NonScalarRoot { got: Vec<usize> },
    #[error("backward already ran on this tape; call zero_grads before reusing it")]
    BackwardAlreadyRun,
    #[error("variables belong to different tapes")]
    TapeMismatch,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
                numel,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// A 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    /// Element at (row, col) of a matrix.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute elementwise difference; tensors must share a shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
