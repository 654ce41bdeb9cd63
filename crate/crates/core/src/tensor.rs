//! Dense tensors: a flat row-major buffer plus a shape vector.
//!
//! A bare `Tensor` is a plain value with no autodiff state; gradients only
//! exist for tensors that have been placed on a [`crate::tape::Tape`].
//! Rank is dynamic — shape `[]` is not used, scalars are shape `[1]`.

use std::error::Error;
use std::fmt;

use rand::Rng;

use crate::real::Real;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Buffer length does not match the product of the shape dims.
    ShapeDataMismatch { shape: Vec<usize>, data_len: usize },
    /// Elementwise operands disagree in shape.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Inner dimensions disagree for a matrix product.
    MatMulShape { lhs: Vec<usize>, rhs: Vec<usize> },
    /// Operand does not have the rank an operation requires.
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    /// Softmax (or similar) axis outside the operand's rank.
    AxisOutOfRange { axis: usize, ndim: usize },
    /// Reduction seed for backward must be a single element.
    NotScalar { shape: Vec<usize> },
    /// Convolution input channels disagree with the kernel.
    ChannelMismatch { input: usize, kernel: usize },
    /// `ln` of a non-positive value in checked mode.
    LogDomain { value: f64 },
    /// Flat index or slice range outside the buffer.
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    /// A reshape that changes the element count.
    NumelMismatch { from: Vec<usize>, to: Vec<usize> },
    /// An operation that needs at least one operand/element got none.
    Empty { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, data_len } => write!(
                f,
                "shape {shape:?} implies {} elements but buffer holds {data_len}",
                shape.iter().product::<usize>()
            ),
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: operand shapes {lhs:?} and {rhs:?} differ")
            }
            TensorError::MatMulShape { lhs, rhs } => {
                write!(f, "matmul: inner dims of {lhs:?} and {rhs:?} do not agree")
            }
            TensorError::RankMismatch { op, expected, shape } => {
                write!(f, "{op}: expected rank {expected}, got shape {shape:?}")
            }
            TensorError::AxisOutOfRange { axis, ndim } => {
                write!(f, "axis {axis} out of range for rank {ndim}")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward seed must be scalar, got shape {shape:?}")
            }
            TensorError::ChannelMismatch { input, kernel } => write!(
                f,
                "conv3d: input has {input} channels but kernel expects {kernel}"
            ),
            TensorError::LogDomain { value } => {
                write!(f, "ln of non-positive value {value}")
            }
            TensorError::OutOfRange { op, index, len } => {
                write!(f, "{op}: index {index} out of range for length {len}")
            }
            TensorError::NumelMismatch { from, to } => {
                write!(f, "reshape: {from:?} and {to:?} hold different element counts")
            }
            TensorError::Empty { op } => write!(f, "{op}: empty input"),
        }
    }
}

impl Error for TensorError {}

// ── Tensor ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    /// Wrap a buffer, validating that the shape accounts for every element.
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                data_len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::ZERO; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<R>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Zero-mean uniform init on `(-scale, scale)`. Samples are drawn in
    /// `f64` and narrowed, so a seed yields the same point sequence in both
    /// precisions.
    pub fn uniform(rng: &mut impl Rng, scale: f64, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| R::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * scale))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Value of the single element of a scalar tensor.
    pub fn item(&self) -> R {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Multi-index accessor; row-major, for tests and small readers.
    pub fn at(&self, idx: &[usize]) -> R {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::NumelMismatch {
                from: self.shape,
                to: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert between precisions through `f64`.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::from_f64(v.to_f64())).collect(),
        }
    }
}
