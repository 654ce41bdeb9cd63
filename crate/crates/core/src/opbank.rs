//! The learned inventory of spatial operations.
//!
//! `M_op` is a `d_op_vec × N_op` matrix whose columns are operation basis
//! vectors; mixing a distribution `d_op` through the bank,
//! `v_op = M_op · d_op`, yields the convex combination of columns that
//! conditions the convolutional decoder. Because the combination is
//! linear, replacing `d_op` with a one-hot vector reads out a single pure
//! operation, and blending two one-hots walks the straight line between
//! two operations — the mechanism behind the sweep and interpolation
//! tooling.

use crate::tensor::Tensor;
use std::fmt;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum OpBankError {
    /// Distribution length differs from the bank's column count.
    LengthMismatch { got: usize, want: usize },
    /// Operation index outside `0..N_op`.
    IndexOutOfRange { index: usize, n_op: usize },
    /// Interpolation weight outside `[0, 1]`.
    BadAlpha { alpha: f64 },
    /// The bank matrix must be rank 2.
    BadShape { shape: Vec<usize> },
}

impl fmt::Display for OpBankError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpBankError::LengthMismatch { got, want } => {
                write!(f, "operation distribution has {got} entries, bank has {want} columns")
            }
            OpBankError::IndexOutOfRange { index, n_op } => {
                write!(f, "operation index {index} outside 0..{n_op}")
            }
            OpBankError::BadAlpha { alpha } => {
                write!(f, "interpolation weight {alpha} outside [0, 1]")
            }
            OpBankError::BadShape { shape } => {
                write!(f, "operation bank must be a matrix, got shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for OpBankError {}

// ── Bank ────────────────────────────────────────────────────────────────

/// Basis matrix `[d_op_vec, N_op]`; column `k` is operation `k`'s vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OperationBank {
    m_op: Tensor<f64>,
}

impl OperationBank {
    pub fn new(m_op: Tensor<f64>) -> Result<Self, OpBankError> {
        if m_op.shape().len() != 2 {
            return Err(OpBankError::BadShape {
                shape: m_op.shape().to_vec(),
            });
        }
        Ok(OperationBank { m_op })
    }

    pub fn d_op_vec(&self) -> usize {
        self.m_op.shape()[0]
    }

    pub fn n_op(&self) -> usize {
        self.m_op.shape()[1]
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.m_op
    }

    /// Basis vector for operation `k` (column `k`).
    pub fn column(&self, k: usize) -> Result<Vec<f64>, OpBankError> {
        if k >= self.n_op() {
            return Err(OpBankError::IndexOutOfRange {
                index: k,
                n_op: self.n_op(),
            });
        }
        let n = self.n_op();
        Ok((0..self.d_op_vec())
            .map(|r| self.m_op.data()[r * n + k])
            .collect())
    }

    /// Mix the columns by `d_op`: `v_op = M_op · d_op`.
    pub fn op_vector(&self, d_op: &[f64]) -> Result<Vec<f64>, OpBankError> {
        let n = self.n_op();
        if d_op.len() != n {
            return Err(OpBankError::LengthMismatch {
                got: d_op.len(),
                want: n,
            });
        }
        let data = self.m_op.data();
        Ok((0..self.d_op_vec())
            .map(|r| {
                d_op.iter()
                    .enumerate()
                    .map(|(k, &w)| data[r * n + k] * w)
                    .sum()
            })
            .collect())
    }
}

// ── Distribution constructors ───────────────────────────────────────────

/// A valid `N_op`-simplex point with all mass at `k`.
pub fn inject_one_hot(k: usize, n_op: usize) -> Result<Vec<f64>, OpBankError> {
    if k >= n_op {
        return Err(OpBankError::IndexOutOfRange { index: k, n_op });
    }
    let mut d = vec![0.0; n_op];
    d[k] = 1.0;
    Ok(d)
}

/// Two-point blend: `alpha` at `k1`, `1 − alpha` at `k2`.
pub fn interpolate(
    k1: usize,
    k2: usize,
    alpha: f64,
    n_op: usize,
) -> Result<Vec<f64>, OpBankError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(OpBankError::BadAlpha { alpha });
    }
    for k in [k1, k2] {
        if k >= n_op {
            return Err(OpBankError::IndexOutOfRange { index: k, n_op });
        }
    }
    let mut d = vec![0.0; n_op];
    d[k1] += alpha;
    d[k2] += 1.0 - alpha;
    Ok(d)
}
