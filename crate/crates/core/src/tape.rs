//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every forward operation pushes one node holding its output value and an
//! op record naming its input node ids; node ids are strictly increasing,
//! so the tape order is already topological and [`Tape::backward`] is a
//! single reverse sweep. Gradients accumulate lazily: a node's gradient
//! buffer is allocated the first time something flows into it, and after
//! `backward` every *trainable* leaf is guaranteed a gradient (zeros if the
//! loss never touched it).
//!
//! A `Tape` is a single-threaded object; distinct tapes may run on distinct
//! threads. Tensors not attached to any tape are plain immutable values.

use crate::real::Real;
use crate::tensor::{Tensor, TensorError};

// ── Handles and op records ──────────────────────────────────────────────

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise nonlinearity selector for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemFn {
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Sin,
    Cos,
}

/// Geometry of one 3-D convolution, fixed at op construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    /// Low-side zero padding per axis; high side gets the remainder, so
    /// even kernels pad one more voxel on the high side and output spatial
    /// dims always equal input spatial dims.
    fn pads(&self) -> (usize, usize, usize) {
        ((self.kd - 1) / 2, (self.kh - 1) / 2, (self.kw - 1) / 2)
    }
    fn rows(&self) -> usize {
        self.d * self.h * self.w
    }
    fn cols(&self) -> usize {
        self.kd * self.kh * self.kw * self.c_in
    }
}

/// Whether batch normalization consumes batch statistics or running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Persistent running moments for one batch-norm site. Lives with the
/// model parameters, not on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<R> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
    pub momentum: f64,
}

impl<R: Real> BnStats<R> {
    pub fn new(features: usize, momentum: f64) -> Self {
        BnStats {
            mean: vec![R::ZERO; features],
            var: vec![R::ONE; features],
            momentum,
        }
    }
}

/// Cached normalization intermediates needed by the backward pass.
#[derive(Debug, Clone)]
struct BnCache<R> {
    xhat: Vec<R>,
    inv_std: Vec<R>,
}

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Map(Var, ElemFn),
    Atan2 { y: Var, x: Var },
    MatMul { lhs: Var, rhs: Var, m: usize, k: usize, n: usize },
    Softmax { input: Var, axis: usize },
    LogSumExp { input: Var },
    Entropy { input: Var },
    Pick { input: Var, index: usize },
    SliceFlat { input: Var, offset: usize },
    ConcatFlat { inputs: Vec<Var> },
    EmbedRows { table: Var, ids: Vec<usize> },
    Transpose2 { input: Var, rows: usize, cols: usize },
    Reshape { input: Var },
    Sum { input: Var },
    Conv3d { input: Var, kernel: Var, bias: Var, dims: ConvDims },
    // eps is folded into the cached inv_std, so backward needs no copy.
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        cache: BnCache<R>,
    },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
    grad: Option<Tensor<R>>,
}

// ── Tape ────────────────────────────────────────────────────────────────

pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // No finiteness assert here: runaway training must surface as a
    // non-finite loss the caller can detect and abort on, not a panic.
    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Place a trainable parameter on the tape.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf { trainable: true }, true)
    }

    /// Place a non-trainable value on the tape (inputs, coordinate grids…).
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf { trainable: false }, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// Gradient of the most recent [`Tape::backward`] seed w.r.t. `v`, if
    /// any signal reached it (trainable leaves always have one afterwards).
    pub fn grad(&self, v: Var) -> Option<&Tensor<R>> {
        self.nodes[v.0].grad.as_ref()
    }

    // ── Arithmetic ──────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].value.shape().to_vec(),
                rhs: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        let value = self.nodes[a.0].value.map(|v| v * c);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, R::ZERO - R::ONE)
    }

    // ── Elementwise nonlinearities ──────────────────────────────────

    pub fn elementwise(&mut self, x: Var, f: ElemFn) -> Result<Var, TensorError> {
        if f == ElemFn::Ln {
            if let Some(&bad) = self.nodes[x.0]
                .value
                .data()
                .iter()
                .find(|v| **v <= R::ZERO)
            {
                return Err(TensorError::LogDomain {
                    value: bad.to_f64(),
                });
            }
        }
        let value = self.nodes[x.0].value.map(|v| match f {
            ElemFn::Tanh => v.tanh(),
            ElemFn::Relu => v.maximum(R::ZERO),
            ElemFn::Sigmoid => R::ONE / (R::ONE + (R::ZERO - v).exp()),
            ElemFn::Exp => v.exp(),
            ElemFn::Ln => v.ln(),
            ElemFn::Sin => v.sin(),
            ElemFn::Cos => v.cos(),
        });
        let needs = self.needs(x);
        Ok(self.push(value, Op::Map(x, f), needs))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.elementwise(x, ElemFn::Tanh).expect("tanh is total")
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(x, ElemFn::Relu).expect("relu is total")
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(x, ElemFn::Sigmoid).expect("sigmoid is total")
    }
    pub fn sin(&mut self, x: Var) -> Var {
        self.elementwise(x, ElemFn::Sin).expect("sin is total")
    }
    pub fn cos(&mut self, x: Var) -> Var {
        self.elementwise(x, ElemFn::Cos).expect("cos is total")
    }

    /// Elementwise `atan2(y, x)`; with `y = sin(d)`, `x = cos(d)` this is
    /// the wrap-aware angle residual and its derivative w.r.t. `d` is 1.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var, TensorError> {
        self.same_shape("atan2", y, x)?;
        let data = self.nodes[y.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[x.0].value.data())
            .map(|(&a, &b)| a.atan2(b))
            .collect();
        let value = Tensor::new(self.nodes[y.0].value.shape().to_vec(), data)?;
        let needs = self.needs(y) || self.needs(x);
        Ok(self.push(value, Op::Atan2 { y, x }, needs))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Matrix product. Accepts `[m,k]×[k,n]`, matrix–vector `[m,k]×[k]`,
    /// and vector–matrix `[k]×[k,n]`; 1-D operands keep 1-D outputs.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            _ => {
                return Err(TensorError::MatMulShape { lhs: sa, rhs: sb });
            }
        };
        let mut out = vec![R::ZERO; m * n];
        R::gemm(
            m,
            k,
            n,
            R::ONE,
            self.nodes[a.0].value.data(),
            k as isize,
            1,
            self.nodes[b.0].value.data(),
            n as isize,
            1,
            R::ZERO,
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(out_shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { lhs: a, rhs: b, m, k, n }, needs))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose2",
                expected: 2,
                shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![R::ZERO; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose2 { input: x, rows, cols }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { input: x }, needs))
    }

    // ── Distributions and reductions ────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                ndim: shape.len(),
            });
        }
        let len = shape[axis];
        if len == 0 {
            return Err(TensorError::Empty { op: "softmax" });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.nodes[x.0].value.data();
        let mut out = vec![R::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = src[base];
                for j in 1..len {
                    mx = mx.maximum(src[base + j * inner]);
                }
                let mut total = R::ZERO;
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Softmax { input: x, axis }, needs))
    }

    /// `ln Σ exp(x)` over all elements (stable); scalar output.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var, TensorError> {
        let src = self.nodes[x.0].value.data();
        if src.is_empty() {
            return Err(TensorError::Empty { op: "logsumexp" });
        }
        let mut mx = src[0];
        for &v in &src[1..] {
            mx = mx.maximum(v);
        }
        let mut total = R::ZERO;
        for &v in src {
            total += (v - mx).exp();
        }
        let value = Tensor::scalar(mx + total.ln());
        let needs = self.needs(x);
        Ok(self.push(value, Op::LogSumExp { input: x }, needs))
    }

    /// Shannon entropy `−Σ p ln p` of a distribution, with the usual
    /// `0 ln 0 = 0` convention so fully peaked inputs are exact zeros.
    pub fn entropy(&mut self, p: Var) -> Result<Var, TensorError> {
        let src = self.nodes[p.0].value.data();
        if src.is_empty() {
            return Err(TensorError::Empty { op: "entropy" });
        }
        let mut h = R::ZERO;
        for &v in src {
            if v > R::ZERO {
                h -= v * v.ln();
            }
        }
        let value = Tensor::scalar(h);
        let needs = self.needs(p);
        Ok(self.push(value, Op::Entropy { input: p }, needs))
    }

    /// Extract one element by flat index; scalar output.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let src = self.nodes[x.0].value.data();
        if index >= src.len() {
            return Err(TensorError::OutOfRange {
                op: "pick",
                index,
                len: src.len(),
            });
        }
        let value = Tensor::scalar(src[index]);
        let needs = self.needs(x);
        Ok(self.push(value, Op::Pick { input: x, index }, needs))
    }

    /// Contiguous flat slice `[offset, offset+len)` as a 1-D tensor.
    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Result<Var, TensorError> {
        let src = self.nodes[x.0].value.data();
        if offset + len > src.len() {
            return Err(TensorError::OutOfRange {
                op: "slice",
                index: offset + len,
                len: src.len(),
            });
        }
        let value = Tensor::from_vec(src[offset..offset + len].to_vec());
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceFlat { input: x, offset }, needs))
    }

    /// Concatenate operand buffers in order into one 1-D tensor.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        let mut data = Vec::new();
        let mut needs = false;
        for &v in inputs {
            data.extend_from_slice(self.nodes[v.0].value.data());
            needs |= self.needs(v);
        }
        let value = Tensor::from_vec(data);
        Ok(self.push(
            value,
            Op::ConcatFlat {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    /// Gather rows of an embedding table `[V, d]` for each id; `[T, d]` out.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let shape = self.nodes[table.0].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "embed_rows",
                expected: 2,
                shape,
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Empty { op: "embed_rows" });
        }
        let (v, d) = (shape[0], shape[1]);
        let src = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::OutOfRange {
                    op: "embed_rows",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { input: x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum(x);
        self.scale(s, R::ONE / R::from_f64(n as f64))
    }

    /// Inner product of two same-shape tensors; scalar output.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    // ── Convolution ─────────────────────────────────────────────────

    /// 3-D convolution (cross-correlation) with same-padding.
    ///
    /// `input` is `[B, D, H, W, C_in]` channels-last, `kernel` is
    /// `[kd, kh, kw, C_in, C_out]`, `bias` is `[C_out]`; the output keeps
    /// the input's spatial dims: `[B, D, H, W, C_out]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        let si = self.nodes[input.0].value.shape().to_vec();
        let sk = self.nodes[kernel.0].value.shape().to_vec();
        if si.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "conv3d input",
                expected: 5,
                shape: si,
            });
        }
        if sk.len() != 5 {
            return Err(TensorError::RankMismatch {
                op: "conv3d kernel",
                expected: 5,
                shape: sk,
            });
        }
        if si[4] != sk[3] {
            return Err(TensorError::ChannelMismatch {
                input: si[4],
                kernel: sk[3],
            });
        }
        let sb = self.nodes[bias.0].value.shape().to_vec();
        if sb != [sk[4]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d bias",
                lhs: sb,
                rhs: vec![sk[4]],
            });
        }
        let dims = ConvDims {
            batch: si[0],
            d: si[1],
            h: si[2],
            w: si[3],
            c_in: si[4],
            c_out: sk[4],
            kd: sk[0],
            kh: sk[1],
            kw: sk[2],
        };
        let rows = dims.rows();
        let cols = dims.cols();
        let src = self.nodes[input.0].value.data();
        let kmat = self.nodes[kernel.0].value.data();
        let bias_data = self.nodes[bias.0].value.data();

        let mut out = vec![R::ZERO; dims.batch * rows * dims.c_out];
        // Pre-fill bias so the GEMM can accumulate on top (beta = 1).
        for row in out.chunks_exact_mut(dims.c_out) {
            row.copy_from_slice(bias_data);
        }
        let mut col = vec![R::ZERO; cols * rows];
        for b in 0..dims.batch {
            let out_b = &mut out[b * rows * dims.c_out..(b + 1) * rows * dims.c_out];
            if cols == dims.c_in {
                // 1x1x1 kernel: the input itself is the patch matrix.
                let in_b = &src[b * rows * dims.c_in..(b + 1) * rows * dims.c_in];
                R::gemm(
                    rows, cols, dims.c_out, R::ONE, in_b, cols as isize, 1, kmat,
                    dims.c_out as isize, 1, R::ONE, out_b, dims.c_out as isize, 1,
                );
            } else {
                im2col(src, &dims, b, &mut col);
                R::gemm(
                    rows, cols, dims.c_out, R::ONE, &col, cols as isize, 1, kmat,
                    dims.c_out as isize, 1, R::ONE, out_b, dims.c_out as isize, 1,
                );
            }
        }
        let value = Tensor::new(vec![dims.batch, dims.d, dims.h, dims.w, dims.c_out], out)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                kernel,
                bias,
                dims,
            },
            needs,
        ))
    }

    // ── Batch normalization ─────────────────────────────────────────

    /// Batch normalization over rows of `x: [N, C]` (callers flatten batch
    /// and spatial positions into N). Train mode standardizes with batch
    /// moments and folds them into `running`; eval mode reads `running`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut BnStats<R>,
        mode: BnMode,
        eps: R,
    ) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "batchnorm",
                expected: 2,
                shape,
            });
        }
        let (n, c) = (shape[0], shape[1]);
        if n == 0 {
            return Err(TensorError::Empty { op: "batchnorm" });
        }
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.nodes[v.0].value.shape();
            if s != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: if what == "gamma" {
                        "batchnorm gamma"
                    } else {
                        "batchnorm beta"
                    },
                    lhs: s.to_vec(),
                    rhs: vec![c],
                });
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm running stats",
                lhs: vec![running.mean.len()],
                rhs: vec![c],
            });
        }

        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data().to_vec();
        let bta = self.nodes[beta.0].value.data().to_vec();

        let (mean, var) = match mode {
            BnMode::Train => {
                let inv_n = R::ONE / R::from_f64(n as f64);
                let mut mean = vec![R::ZERO; c];
                for row in src.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m *= inv_n;
                }
                let mut var = vec![R::ZERO; c];
                for row in src.chunks_exact(c) {
                    for ((vr, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *vr += d * d;
                    }
                }
                for v in &mut var {
                    *v *= inv_n;
                }
                let mom = R::from_f64(running.momentum);
                let keep = R::ONE - mom;
                for i in 0..c {
                    running.mean[i] = keep * running.mean[i] + mom * mean[i];
                    running.var[i] = keep * running.var[i] + mom * var[i];
                }
                (mean, var)
            }
            BnMode::Eval => (running.mean.clone(), running.var.clone()),
        };

        let inv_std: Vec<R> = var.iter().map(|&v| R::ONE / (v + eps).sqrt()).collect();
        let mut xhat = vec![R::ZERO; src.len()];
        let mut out = vec![R::ZERO; src.len()];
        for (r, row) in src.chunks_exact(c).enumerate() {
            for j in 0..c {
                let xh = (row[j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = xh;
                out[r * c + j] = g[j] * xh + bta[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                mode,
                cache: BnCache { xhat, inv_std },
            },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar seed. After it returns, every trainable
    /// leaf holds a gradient (zeros if unreached); interior nodes hold one
    /// only if signal flowed through them.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&seed_shape, R::ONE));

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let (parents, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let g = node.grad.take().expect("checked above");
            backprop(&node.op, &node.value, &g, parents);
            node.grad = Some(g);
        }

        for node in &mut self.nodes {
            if let Op::Leaf { trainable: true } = node.op {
                if node.grad.is_none() {
                    node.grad = Some(Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(())
    }
}

// ── Backward dispatch ───────────────────────────────────────────────────

/// Accumulate `delta` into the gradient slot of `v` (a strict predecessor).
fn accumulate<R: Real>(parents: &mut [Node<R>], v: Var, delta: Tensor<R>) {
    let node = &mut parents[v.0];
    if !node.needs_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (acc, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                *acc += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Mutable access to the gradient buffer of `v`, allocating zeros on first
/// touch; `None` when the node does not participate in differentiation.
fn grad_slot<'a, R: Real>(parents: &'a mut [Node<R>], v: Var) -> Option<&'a mut Tensor<R>> {
    let node = &mut parents[v.0];
    if !node.needs_grad {
        return None;
    }
    if node.grad.is_none() {
        node.grad = Some(Tensor::zeros(node.value.shape()));
    }
    node.grad.as_mut()
}

fn backprop<R: Real>(op: &Op<R>, out: &Tensor<R>, g: &Tensor<R>, parents: &mut [Node<R>]) {
    match op {
        Op::Leaf { .. } => {}

        Op::Add(a, b) => {
            accumulate(parents, *a, g.clone());
            accumulate(parents, *b, g.clone());
        }

        Op::Sub(a, b) => {
            accumulate(parents, *a, g.clone());
            accumulate(parents, *b, g.map(|v| R::ZERO - v));
        }

        Op::Mul(a, b) => {
            let da = {
                let bv = parents[b.0].value.data();
                Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv).map(|(&gv, &v)| gv * v).collect(),
                )
                .expect("shape preserved")
            };
            let db = {
                let av = parents[a.0].value.data();
                Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(av).map(|(&gv, &v)| gv * v).collect(),
                )
                .expect("shape preserved")
            };
            accumulate(parents, *a, da);
            accumulate(parents, *b, db);
        }

        Op::Scale(a, c) => {
            accumulate(parents, *a, g.map(|v| v * *c));
        }

        Op::Map(x, f) => {
            let delta = match f {
                // Derivative expressible from the output value:
                ElemFn::Tanh => Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * (R::ONE - y * y))
                        .collect(),
                ),
                ElemFn::Sigmoid => Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * y * (R::ONE - y))
                        .collect(),
                ),
                ElemFn::Exp => Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * y)
                        .collect(),
                ),
                ElemFn::Relu => Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| if y > R::ZERO { gv } else { R::ZERO })
                        .collect(),
                ),
                // Derivative needs the input value:
                ElemFn::Ln => {
                    let xv = parents[x.0].value.data();
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(xv)
                            .map(|(&gv, &v)| gv / v)
                            .collect(),
                    )
                }
                ElemFn::Sin => {
                    let xv = parents[x.0].value.data();
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(xv)
                            .map(|(&gv, &v)| gv * v.cos())
                            .collect(),
                    )
                }
                ElemFn::Cos => {
                    let xv = parents[x.0].value.data();
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(xv)
                            .map(|(&gv, &v)| R::ZERO - gv * v.sin())
                            .collect(),
                    )
                }
            }
            .expect("shape preserved");
            accumulate(parents, *x, delta);
        }

        Op::Atan2 { y, x } => {
            let (dy, dx) = {
                let yv = parents[y.0].value.data();
                let xv = parents[x.0].value.data();
                let mut dy = Vec::with_capacity(g.numel());
                let mut dx = Vec::with_capacity(g.numel());
                for ((&gv, &a), &b) in g.data().iter().zip(yv).zip(xv) {
                    let denom = a * a + b * b;
                    dy.push(gv * b / denom);
                    dx.push(R::ZERO - gv * a / denom);
                }
                (
                    Tensor::new(g.shape().to_vec(), dy).expect("shape preserved"),
                    Tensor::new(g.shape().to_vec(), dx).expect("shape preserved"),
                )
            };
            accumulate(parents, *y, dy);
            accumulate(parents, *x, dx);
        }

        Op::MatMul { lhs, rhs, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            // dA = g @ B^T
            let da = {
                let bv = parents[rhs.0].value.data();
                let mut da = vec![R::ZERO; m * k];
                R::gemm(
                    m, n, k, R::ONE, g.data(), n as isize, 1, bv, 1, n as isize,
                    R::ZERO, &mut da, k as isize, 1,
                );
                Tensor::new(parents[lhs.0].value.shape().to_vec(), da).expect("lhs shape")
            };
            // dB = A^T @ g
            let db = {
                let av = parents[lhs.0].value.data();
                let mut db = vec![R::ZERO; k * n];
                R::gemm(
                    k, m, n, R::ONE, av, 1, k as isize, g.data(), n as isize, 1,
                    R::ZERO, &mut db, n as isize, 1,
                );
                Tensor::new(parents[rhs.0].value.shape().to_vec(), db).expect("rhs shape")
            };
            accumulate(parents, *lhs, da);
            accumulate(parents, *rhs, db);
        }

        Op::Softmax { input, axis } => {
            // dx = p ∘ (g − Σ g∘p) per slice, with p the forward output.
            let shape = out.shape().to_vec();
            let len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let p = out.data();
            let gv = g.data();
            let mut dx = vec![R::ZERO; p.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = R::ZERO;
                    for j in 0..len {
                        let idx = base + j * inner;
                        dot += gv[idx] * p[idx];
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        dx[idx] = p[idx] * (gv[idx] - dot);
                    }
                }
            }
            accumulate(
                parents,
                *input,
                Tensor::new(shape, dx).expect("shape preserved"),
            );
        }

        Op::LogSumExp { input } => {
            // d/dx_i = softmax(x)_i = exp(x_i − lse)
            let lse = out.item();
            let seed = g.item();
            let xv = parents[input.0].value.data();
            let delta: Vec<R> = xv.iter().map(|&v| seed * (v - lse).exp()).collect();
            accumulate(
                parents,
                *input,
                Tensor::new(parents[input.0].value.shape().to_vec(), delta).expect("input shape"),
            );
        }

        Op::Entropy { input } => {
            // d(−Σ p ln p)/dp_i = −(ln p_i + 1), zero where p_i = 0.
            let seed = g.item();
            let pv = parents[input.0].value.data();
            let delta: Vec<R> = pv
                .iter()
                .map(|&p| {
                    if p > R::ZERO {
                        R::ZERO - seed * (p.ln() + R::ONE)
                    } else {
                        R::ZERO
                    }
                })
                .collect();
            accumulate(
                parents,
                *input,
                Tensor::new(parents[input.0].value.shape().to_vec(), delta).expect("input shape"),
            );
        }

        Op::Pick { input, index } => {
            if let Some(slot) = grad_slot(parents, *input) {
                slot.data_mut()[*index] += g.item();
            }
        }

        Op::SliceFlat { input, offset } => {
            let len = g.numel();
            if let Some(slot) = grad_slot(parents, *input) {
                for (acc, &d) in slot.data_mut()[*offset..*offset + len]
                    .iter_mut()
                    .zip(g.data())
                {
                    *acc += d;
                }
            }
        }

        Op::ConcatFlat { inputs } => {
            let mut offset = 0;
            for &v in inputs {
                let n = parents[v.0].value.numel();
                let piece = Tensor::new(
                    parents[v.0].value.shape().to_vec(),
                    g.data()[offset..offset + n].to_vec(),
                )
                .expect("piece shape");
                accumulate(parents, v, piece);
                offset += n;
            }
        }

        Op::EmbedRows { table, ids } => {
            let d = parents[table.0].value.shape()[1];
            if let Some(slot) = grad_slot(parents, *table) {
                let gd = g.data();
                let td = slot.data_mut();
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        td[id * d + j] += gd[t * d + j];
                    }
                }
            }
        }

        Op::Transpose2 { input, rows, cols } => {
            // g has shape [cols, rows]; transpose it back.
            let gv = g.data();
            let mut dx = vec![R::ZERO; rows * cols];
            for c in 0..*cols {
                for r in 0..*rows {
                    dx[r * cols + c] = gv[c * rows + r];
                }
            }
            accumulate(
                parents,
                *input,
                Tensor::new(vec![*rows, *cols], dx).expect("input shape"),
            );
        }

        Op::Reshape { input } => {
            let delta = Tensor::new(parents[input.0].value.shape().to_vec(), g.data().to_vec())
                .expect("same numel");
            accumulate(parents, *input, delta);
        }

        Op::Sum { input } => {
            let seed = g.item();
            accumulate(
                parents,
                *input,
                Tensor::full(parents[input.0].value.shape(), seed),
            );
        }

        Op::Conv3d {
            input,
            kernel,
            bias,
            dims,
        } => {
            conv3d_backward(g, *input, *kernel, *bias, dims, parents);
        }

        Op::BatchNorm {
            input,
            gamma,
            beta,
            mode,
            cache,
            ..
        } => {
            let shape = out.shape().to_vec();
            let (n, c) = (shape[0], shape[1]);
            let gv = g.data();
            let gamma_v = parents[gamma.0].value.data().to_vec();

            // dβ_j = Σ_rows g, dγ_j = Σ_rows g · x̂
            let mut dbeta = vec![R::ZERO; c];
            let mut dgamma = vec![R::ZERO; c];
            for r in 0..n {
                for j in 0..c {
                    let idx = r * c + j;
                    dbeta[j] += gv[idx];
                    dgamma[j] += gv[idx] * cache.xhat[idx];
                }
            }

            let dx = match mode {
                BnMode::Train => {
                    // dx = γ·inv_std·(g − mean(g) − x̂·mean(g·x̂))
                    let inv_n = R::ONE / R::from_f64(n as f64);
                    let mut dx = vec![R::ZERO; n * c];
                    for j in 0..c {
                        let mg = dbeta[j] * inv_n;
                        let mgx = dgamma[j] * inv_n;
                        let scale = gamma_v[j] * cache.inv_std[j];
                        for r in 0..n {
                            let idx = r * c + j;
                            dx[idx] = scale * (gv[idx] - mg - cache.xhat[idx] * mgx);
                        }
                    }
                    dx
                }
                BnMode::Eval => {
                    // Running stats are constants: dx = g·γ·inv_std.
                    let mut dx = vec![R::ZERO; n * c];
                    for r in 0..n {
                        for j in 0..c {
                            let idx = r * c + j;
                            dx[idx] = gv[idx] * gamma_v[j] * cache.inv_std[j];
                        }
                    }
                    dx
                }
            };

            accumulate(
                parents,
                *input,
                Tensor::new(shape, dx).expect("input shape"),
            );
            accumulate(parents, *gamma, Tensor::from_vec(dgamma));
            accumulate(parents, *beta, Tensor::from_vec(dbeta));
        }
    }
}

fn conv3d_backward<R: Real>(
    g: &Tensor<R>,
    input: Var,
    kernel: Var,
    bias: Var,
    dims: &ConvDims,
    parents: &mut [Node<R>],
) {
    let rows = dims.rows();
    let cols = dims.cols();
    let gv = g.data();

    // Bias: sum over batch and positions.
    if let Some(slot) = grad_slot(parents, bias) {
        let gb = slot.data_mut();
        for row in gv.chunks_exact(dims.c_out) {
            for (acc, &d) in gb.iter_mut().zip(row) {
                *acc += d;
            }
        }
    }

    // Kernel: grad_K = Σ_b col_bᵀ @ g_b, accumulated straight into the slot.
    if parents[kernel.0].needs_grad {
        let mut col = vec![R::ZERO; cols * rows];
        for b in 0..dims.batch {
            let g_b = &gv[b * rows * dims.c_out..(b + 1) * rows * dims.c_out];
            {
                let src = parents[input.0].value.data();
                if cols == dims.c_in {
                    col.copy_from_slice(&src[b * rows * dims.c_in..(b + 1) * rows * dims.c_in]);
                } else {
                    im2col(src, dims, b, &mut col);
                }
            }
            let slot = grad_slot(parents, kernel).expect("needs_grad checked");
            R::gemm(
                cols, rows, dims.c_out, R::ONE, &col, 1, cols as isize, g_b,
                dims.c_out as isize, 1, R::ONE, slot.data_mut(), dims.c_out as isize, 1,
            );
        }
    }

    // Input: grad_col = g_b @ Kᵀ, then scatter-add back through the
    // same patch geometry the forward gather used.
    if parents[input.0].needs_grad {
        let kmat = parents[kernel.0].value.data().to_vec();
        let mut grad_col = vec![R::ZERO; rows * cols];
        for b in 0..dims.batch {
            let g_b = &gv[b * rows * dims.c_out..(b + 1) * rows * dims.c_out];
            R::gemm(
                rows, dims.c_out, cols, R::ONE, g_b, dims.c_out as isize, 1, &kmat,
                1, dims.c_out as isize, R::ZERO, &mut grad_col, cols as isize, 1,
            );
            let slot = grad_slot(parents, input).expect("needs_grad checked");
            col2im_add(&grad_col, dims, b, slot.data_mut());
        }
    }
}

// ── Patch-matrix helpers ────────────────────────────────────────────────

/// Gather padded patches of example `b` into `col: [rows, cols]`. For each
/// output position the kw·C_in span of a (di, dj) slab is contiguous in
/// both the input and the patch row, so the inner move is one slice copy.
fn im2col<R: Real>(src: &[R], dims: &ConvDims, b: usize, col: &mut [R]) {
    let (pd, ph, pw) = dims.pads();
    let cols = dims.cols();
    let c = dims.c_in;
    for v in col.iter_mut() {
        *v = R::ZERO;
    }
    for i in 0..dims.d {
        for j in 0..dims.h {
            for k in 0..dims.w {
                let row = (i * dims.h + j) * dims.w + k;
                let row_base = row * cols;
                for di in 0..dims.kd {
                    let ii = (i + di) as isize - pd as isize;
                    if ii < 0 || ii >= dims.d as isize {
                        continue;
                    }
                    for dj in 0..dims.kh {
                        let jj = (j + dj) as isize - ph as isize;
                        if jj < 0 || jj >= dims.h as isize {
                            continue;
                        }
                        // Valid dk range so that k + dk − pw ∈ [0, W).
                        let dk0 = pw.saturating_sub(k);
                        let dk1 = dims.kw.min(dims.w + pw - k);
                        if dk0 >= dk1 {
                            continue;
                        }
                        let kk = k + dk0 - pw;
                        let src_base = (((b * dims.d + ii as usize) * dims.h + jj as usize)
                            * dims.w
                            + kk)
                            * c;
                        let dst_base = row_base + ((di * dims.kh + dj) * dims.kw + dk0) * c;
                        let span = (dk1 - dk0) * c;
                        col[dst_base..dst_base + span]
                            .copy_from_slice(&src[src_base..src_base + span]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch-row gradients back onto the
/// input gradient of example `b`.
fn col2im_add<R: Real>(grad_col: &[R], dims: &ConvDims, b: usize, grad_in: &mut [R]) {
    let (pd, ph, pw) = dims.pads();
    let cols = dims.cols();
    let c = dims.c_in;
    for i in 0..dims.d {
        for j in 0..dims.h {
            for k in 0..dims.w {
                let row = (i * dims.h + j) * dims.w + k;
                let row_base = row * cols;
                for di in 0..dims.kd {
                    let ii = (i + di) as isize - pd as isize;
                    if ii < 0 || ii >= dims.d as isize {
                        continue;
                    }
                    for dj in 0..dims.kh {
                        let jj = (j + dj) as isize - ph as isize;
                        if jj < 0 || jj >= dims.h as isize {
                            continue;
                        }
                        let dk0 = pw.saturating_sub(k);
                        let dk1 = dims.kw.min(dims.w + pw - k);
                        if dk0 >= dk1 {
                            continue;
                        }
                        let kk = k + dk0 - pw;
                        let dst_base = (((b * dims.d + ii as usize) * dims.h + jj as usize)
                            * dims.w
                            + kk)
                            * c;
                        let src_base = row_base + ((di * dims.kh + dj) * dims.kw + dk0) * c;
                        let span = (dk1 - dk0) * c;
                        for s in 0..span {
                            grad_in[dst_base + s] += grad_col[src_base + s];
                        }
                    }
                }
            }
        }
    }
}
