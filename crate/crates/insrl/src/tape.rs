//! Recorded computations with reverse-mode differentiation.
//!
//! A [`Tape`] is built per forward pass (dynamic graph): each operation runs
//! eagerly, stores its output, and is replayed in reverse by [`Tape::backward`]
//! to accumulate gradients into a [`Gradients`] keyed by the parameter store.
//!
//! Only the operations the model needs exist here; there is no broadcasting
//! beyond explicit row/scalar variants. Vectors are `[1, n]` rows.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a buffer on the tape.
pub type BufId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Source<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

struct Buf<T> {
    shape: Vec<usize>,
    src: Source<T>,
}

enum Op<T> {
    MatMul { a: BufId, b: BufId, out: BufId },
    MatMulTA { a: BufId, b: BufId, out: BufId },
    MatMulTB { a: BufId, b: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Scale { x: BufId, c: T, out: BufId },
    AddRow { m: BufId, row: BufId, out: BufId },
    MulRow { m: BufId, row: BufId, out: BufId },
    AddScalar { x: BufId, s: BufId, out: BufId },
    ScaleBy { x: BufId, s: BufId, out: BufId },
    Tanh { x: BufId, out: BufId },
    Relu { x: BufId, out: BufId },
    Reshape { x: BufId, out: BufId },
    ConcatCols { parts: Vec<BufId>, out: BufId },
    SliceCols { x: BufId, start: usize, len: usize, out: BufId },
    GatherRows { table: BufId, rows: Vec<usize>, out: BufId },
    MaskRows { x: BufId, valid: usize, out: BufId },
    MeanRows { x: BufId, valid: usize, out: BufId },
    RowSoftmax { x: BufId, valid: usize, out: BufId },
    LayerNorm { x: BufId, gain: BufId, bias: BufId, out: BufId },
    Conv1d { x: BufId, kernels: BufId, out: BufId },
    SumSquares { x: BufId, out: BufId },
    AddDiag { x: BufId, out: BufId },
    SpdSolve { a: BufId, b: BufId, out: BufId },
    CrossEntropy { logits: BufId, target: usize, out: BufId },
}

/// Recorded forward computation over a read-only parameter store.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    bufs: Vec<Buf<T>>,
    ops: Vec<Op<T>>,
    param_bufs: HashMap<ParamId, BufId>,
    check_finite: bool,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            bufs: Vec::new(),
            ops: Vec::new(),
            param_bufs: HashMap::new(),
            check_finite: false,
        }
    }

    /// Validate every operation output for NaN/Inf (used by tests and the
    /// gradient suite; training checks the loss instead).
    pub fn with_finite_checks(params: &'p ParamStore<T>) -> Self {
        let mut t = Tape::new(params);
        t.check_finite = true;
        t
    }

    // ── buffers ──────────────────────────────────────────────────────

    /// Reference a parameter. Memoized: every use of the same parameter
    /// shares one buffer, so gradients from all paths accumulate together.
    pub fn param(&mut self, id: ParamId) -> BufId {
        if let Some(&buf) = self.param_bufs.get(&id) {
            return buf;
        }
        let shape = self.params.value(id).shape().to_vec();
        let buf = self.alloc(shape, Source::Param(id));
        self.param_bufs.insert(id, buf);
        buf
    }

    pub fn param_named(&mut self, name: &str) -> Result<BufId> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    /// Non-learnable leaf (inputs, frozen copies).
    pub fn constant(&mut self, tensor: Tensor<T>) -> BufId {
        let shape = tensor.shape().to_vec();
        self.alloc(shape, Source::Owned(tensor.into_data()))
    }

    fn alloc(&mut self, shape: Vec<usize>, src: Source<T>) -> BufId {
        let id = self.bufs.len();
        self.bufs.push(Buf { shape, src });
        id
    }

    pub fn data(&self, id: BufId) -> &[T] {
        match &self.bufs[id].src {
            Source::Owned(v) => v,
            Source::Param(p) => self.params.value(*p).data(),
        }
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn numel(&self, id: BufId) -> usize {
        self.bufs[id].shape.iter().product()
    }

    pub fn value(&self, id: BufId) -> Tensor<T> {
        Tensor::from_vec(&self.bufs[id].shape, self.data(id).to_vec()).expect("buffer shape")
    }

    /// Scalar value of a `[1, 1]` buffer.
    pub fn scalar(&self, id: BufId) -> T {
        debug_assert_eq!(self.numel(id), 1);
        self.data(id)[0]
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn rc(&self, id: BufId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.bufs[id].shape;
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op,
                shape: s.clone(),
                reason: "expected a matrix".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, build: impl FnOnce(BufId) -> Op<T>) -> Result<BufId> {
        let out = self.alloc(shape, Source::Owned(data));
        let op = build(out);
        if self.check_finite && !self.data(out).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        self.ops.push(op);
        Ok(out)
    }

    // ── matrix products ──────────────────────────────────────────────

    /// `a · b`, shapes `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.rc(a, "matmul")?;
        let (k2, n) = self.rc(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm(self.data(a), self.data(b), m, k, n, &mut out);
        self.push(vec![m, n], out, |o| Op::MatMul { a, b, out: o })
    }

    /// `aᵀ · b`, shapes `[k,m]ᵀ · [k,n] → [m,n]`.
    pub fn matmul_ta(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (k, m) = self.rc(a, "matmul_ta")?;
        let (k2, n) = self.rc(b, "matmul_ta")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_ta",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm_ta(self.data(a), self.data(b), k, m, n, &mut out);
        self.push(vec![m, n], out, |o| Op::MatMulTA { a, b, out: o })
    }

    /// `a · bᵀ`, shapes `[m,k] · [n,k]ᵀ → [m,n]`.
    pub fn matmul_tb(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.rc(a, "matmul_tb")?;
        let (n, k2) = self.rc(b, "matmul_tb")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm_tb(self.data(a), self.data(b), m, k, n, &mut out);
        self.push(vec![m, n], out, |o| Op::MatMulTB { a, b, out: o })
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: BufId, b: BufId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.binary_same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, |o| Op::Add { a, b, out: o })
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.binary_same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        self.push(self.shape(a).to_vec(), out, |o| Op::Sub { a, b, out: o })
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.binary_same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        self.push(self.shape(a).to_vec(), out, |o| Op::Mul { a, b, out: o })
    }

    pub fn scale(&mut self, x: BufId, c: f64) -> Result<BufId> {
        let c = T::from_f64(c);
        let out = self.data(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, |o| Op::Scale { x, c, out: o })
    }

    pub fn tanh(&mut self, x: BufId) -> Result<BufId> {
        let out = self.data(x).iter().map(|v| v.tanh()).collect();
        self.push(self.shape(x).to_vec(), out, |o| Op::Tanh { x, out: o })
    }

    pub fn relu(&mut self, x: BufId) -> Result<BufId> {
        let z = T::zero();
        let out = self.data(x).iter().map(|&v| if v > z { v } else { z }).collect();
        self.push(self.shape(x).to_vec(), out, |o| Op::Relu { x, out: o })
    }

    // ── broadcasts ───────────────────────────────────────────────────

    fn row_broadcast_check(&self, m: BufId, row: BufId, op: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.rc(m, op)?;
        let (rr, rc_) = self.rc(row, op)?;
        if rr != 1 || rc_ != c {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(m).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        Ok((r, c))
    }

    /// Add a `[1,c]` row to every row of `[r,c]`.
    pub fn add_row(&mut self, m: BufId, row: BufId) -> Result<BufId> {
        let (r, c) = self.row_broadcast_check(m, row, "add_row")?;
        let mut out = self.data(m).to_vec();
        let rd = self.data(row);
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rd[j];
            }
        }
        self.push(vec![r, c], out, |o| Op::AddRow { m, row, out: o })
    }

    /// Multiply every row of `[r,c]` elementwise by a `[1,c]` row.
    pub fn mul_row(&mut self, m: BufId, row: BufId) -> Result<BufId> {
        let (r, c) = self.row_broadcast_check(m, row, "mul_row")?;
        let mut out = self.data(m).to_vec();
        let rd = self.data(row);
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= rd[j];
            }
        }
        self.push(vec![r, c], out, |o| Op::MulRow { m, row, out: o })
    }

    /// Add a `[1,1]` scalar buffer to every element.
    pub fn add_scalar(&mut self, x: BufId, s: BufId) -> Result<BufId> {
        if self.numel(s) != 1 {
            return Err(Error::InvalidShape {
                op: "add_scalar",
                shape: self.shape(s).to_vec(),
                reason: "scalar operand must have one element".into(),
            });
        }
        let sv = self.data(s)[0];
        let out = self.data(x).iter().map(|&v| v + sv).collect();
        self.push(self.shape(x).to_vec(), out, |o| Op::AddScalar { x, s, out: o })
    }

    /// Multiply every element by a `[1,1]` scalar buffer.
    pub fn scale_by(&mut self, x: BufId, s: BufId) -> Result<BufId> {
        if self.numel(s) != 1 {
            return Err(Error::InvalidShape {
                op: "scale_by",
                shape: self.shape(s).to_vec(),
                reason: "scalar operand must have one element".into(),
            });
        }
        let sv = self.data(s)[0];
        let out = self.data(x).iter().map(|&v| v * sv).collect();
        self.push(self.shape(x).to_vec(), out, |o| Op::ScaleBy { x, s, out: o })
    }

    // ── structure ────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: BufId, shape: &[usize]) -> Result<BufId> {
        let n: usize = shape.iter().product();
        if n != self.numel(x) {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count must stay {}", self.numel(x)),
            });
        }
        let out = self.data(x).to_vec();
        self.push(shape.to_vec(), out, |o| Op::Reshape { x, out: o })
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[BufId]) -> Result<BufId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let (r, _) = self.rc(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.rc(p, "concat_cols")?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let parts = parts.to_vec();
        self.push(vec![r, total], out, |o| Op::ConcatCols { parts, out: o })
    }

    pub fn slice_cols(&mut self, x: BufId, start: usize, len: usize) -> Result<BufId> {
        let (r, c) = self.rc(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: self.shape(x).to_vec(),
                reason: format!("slice {start}..{} out of {c} columns", start + len),
            });
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        self.push(vec![r, len], out, |o| Op::SliceCols { x, start, len, out: o })
    }

    /// Gather rows of a `[v, d]` table; backward scatter-adds per row.
    pub fn gather_rows(&mut self, table: BufId, rows: &[usize]) -> Result<BufId> {
        let (v, d) = self.rc(table, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::EmptyInput("gather_rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::IndexOutOfRange {
                what: "embedding row",
                index: bad,
                size: v,
            });
        }
        let td = self.data(table);
        let mut out = vec![T::zero(); rows.len() * d];
        for (i, &r) in rows.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&td[r * d..(r + 1) * d]);
        }
        let n = rows.len();
        let rows = rows.to_vec();
        self.push(vec![n, d], out, |o| Op::GatherRows { table, rows, out: o })
    }

    /// Zero every row at index `valid` or beyond.
    pub fn mask_rows(&mut self, x: BufId, valid: usize) -> Result<BufId> {
        let (r, c) = self.rc(x, "mask_rows")?;
        if valid == 0 || valid > r {
            return Err(Error::InvalidShape {
                op: "mask_rows",
                shape: self.shape(x).to_vec(),
                reason: format!("valid rows {valid} out of {r}"),
            });
        }
        let mut out = self.data(x).to_vec();
        for v in out[valid * c..].iter_mut() {
            *v = T::zero();
        }
        self.push(vec![r, c], out, |o| Op::MaskRows { x, valid, out: o })
    }

    /// Mean over the first `valid` rows → `[1, c]`.
    pub fn mean_rows(&mut self, x: BufId, valid: usize) -> Result<BufId> {
        let (r, c) = self.rc(x, "mean_rows")?;
        if valid == 0 || valid > r {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let xd = self.data(x);
        let inv = T::from_f64(1.0 / valid as f64);
        let mut out = vec![T::zero(); c];
        for i in 0..valid {
            for j in 0..c {
                out[j] += xd[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        self.push(vec![1, c], out, |o| Op::MeanRows { x, valid, out: o })
    }

    // ── nonlinear blocks ─────────────────────────────────────────────

    /// Per-row softmax over the first `valid` columns (max-subtracted);
    /// columns at `valid` or beyond produce exact zeros.
    pub fn row_softmax(&mut self, x: BufId, valid: usize) -> Result<BufId> {
        let (r, c) = self.rc(x, "softmax")?;
        if valid == 0 {
            return Err(Error::EmptyInput("softmax"));
        }
        if valid > c {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: self.shape(x).to_vec(),
                reason: format!("valid columns {valid} out of {c}"),
            });
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..i * c + valid];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..valid {
                out[i * c + j] /= sum;
            }
        }
        self.push(vec![r, c], out, |o| Op::RowSoftmax { x, valid, out: o })
    }

    /// Per-row layer normalization with learned gain and bias (`[1, c]` each).
    pub fn layer_norm(&mut self, x: BufId, gain: BufId, bias: BufId) -> Result<BufId> {
        let (r, c) = self.rc(x, "layer_norm")?;
        if c < 2 {
            return Err(Error::InvalidShape {
                op: "layer_norm",
                shape: self.shape(x).to_vec(),
                reason: "needs at least 2 features per row".into(),
            });
        }
        self.row_broadcast_check(x, gain, "layer_norm")?;
        self.row_broadcast_check(x, bias, "layer_norm")?;
        let xd = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = vec![T::zero(); r * c];
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_c = T::from_f64(1.0 / c as f64);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let istd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * istd * g[j] + b[j];
            }
        }
        self.push(vec![r, c], out, |o| Op::LayerNorm { x, gain, bias, out: o })
    }

    /// Same-length 1-D convolution over the row (position) axis.
    /// Input `[l, d_in]`, kernels `[width, d_in, d_out]`, zero padding.
    pub fn conv1d_same(&mut self, x: BufId, kernels: BufId) -> Result<BufId> {
        let (l, din) = self.rc(x, "conv1d")?;
        let ks = self.shape(kernels);
        if ks.len() != 3 {
            return Err(Error::InvalidShape {
                op: "conv1d",
                shape: ks.to_vec(),
                reason: "kernels must be [width, in, out]".into(),
            });
        }
        let (w, kin, dout) = (ks[0], ks[1], ks[2]);
        if w % 2 == 0 {
            return Err(Error::Config(format!("conv1d width must be odd, got {w}")));
        }
        if kin != din {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: self.shape(x).to_vec(),
                right: ks.to_vec(),
            });
        }
        let xd = self.data(x);
        let kd = self.data(kernels);
        let mut out = vec![T::zero(); l * dout];
        conv_forward(xd, kd, l, din, dout, w, &mut out);
        self.push(vec![l, dout], out, |o| Op::Conv1d { x, kernels, out: o })
    }

    /// Sum of squared elements → `[1, 1]`.
    pub fn sum_squares(&mut self, x: BufId) -> Result<BufId> {
        let mut acc = T::zero();
        for &v in self.data(x) {
            acc += v * v;
        }
        self.push(vec![1, 1], vec![acc], |o| Op::SumSquares { x, out: o })
    }

    /// `x + c·I` for a square matrix.
    pub fn add_diag(&mut self, x: BufId, c: f64) -> Result<BufId> {
        let (r, cc) = self.rc(x, "add_diag")?;
        if r != cc {
            return Err(Error::InvalidShape {
                op: "add_diag",
                shape: self.shape(x).to_vec(),
                reason: "matrix must be square".into(),
            });
        }
        let cv = T::from_f64(c);
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            out[i * r + i] += cv;
        }
        self.push(vec![r, r], out, |o| Op::AddDiag { x, out: o })
    }

    /// Solve `A·yᵀ = bᵀ` for symmetric positive-definite `A` via Cholesky.
    /// `a` is `[n, n]`, `b` and the result are `[1, n]` rows.
    pub fn spd_solve(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (n, n2) = self.rc(a, "spd_solve")?;
        let (br, bc) = self.rc(b, "spd_solve")?;
        if n != n2 || br != 1 || bc != n {
            return Err(Error::ShapeMismatch {
                op: "spd_solve",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let l = cholesky(self.data(a), n)?;
        let y = chol_solve(&l, self.data(b), n);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("spd_solve".into()));
        }
        self.push(vec![1, n], y, |o| Op::SpdSolve { a, b, out: o })
    }

    /// Numerically stable `−log softmax(logits)[target]` → `[1, 1]`.
    pub fn cross_entropy(&mut self, logits: BufId, target: usize) -> Result<BufId> {
        let (r, n) = self.rc(logits, "cross_entropy")?;
        if r != 1 {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: self.shape(logits).to_vec(),
                reason: "logits must be a [1, n] row".into(),
            });
        }
        if target >= n {
            return Err(Error::IndexOutOfRange {
                what: "target class",
                index: target,
                size: n,
            });
        }
        let xd = self.data(logits);
        let max = xd.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in xd {
            sum += (v - max).exp();
        }
        let loss = max + sum.ln() - xd[target];
        self.push(vec![1, 1], vec![loss], |o| Op::CrossEntropy { logits, target, out: o })
    }

    /// `tanh(x · Wᵀ + b)` for row `x [1,k]`, `W [d,k]`, `b [1,d]`.
    pub fn tanh_affine(&mut self, w: BufId, x: BufId, b: BufId) -> Result<BufId> {
        let wx = self.matmul_tb(x, w)?;
        let pre = self.add(wx, b)?;
        self.tanh(pre)
    }

    // ── introspection ────────────────────────────────────────────────

    /// Output buffers of every recorded softmax, with their valid widths.
    pub fn softmax_outputs(&self) -> Vec<(BufId, usize)> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::RowSoftmax { out, valid, .. } => Some((*out, *valid)),
                _ => None,
            })
            .collect()
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; accumulates parameter gradients
    /// (dense for ordinary parameters, scatter rows for embedding tables).
    pub fn backward(&self, loss: BufId, grads: &mut Gradients<T>) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.shape(loss).to_vec(),
                reason: "loss must be scalar".into(),
            });
        }
        let mut accs: Vec<Acc<T>> = (0..self.bufs.len()).map(|_| Acc::Empty).collect();
        accs[loss] = Acc::Dense(vec![T::one()]);

        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut accs);
        }

        for (&pid, &buf) in &self.param_bufs {
            let width = self.params.value(pid).shape().last().copied().unwrap_or(1);
            match std::mem::replace(&mut accs[buf], Acc::Empty) {
                Acc::Empty => {}
                Acc::Dense(g) => grads.add_dense(pid, &g),
                Acc::Rows(rows) => {
                    for (r, g) in rows {
                        grads.add_row(pid, r, width, &g);
                    }
                }
            }
        }
        Ok(())
    }

    fn take_out_grad(&self, accs: &mut [Acc<T>], out: BufId) -> Option<Vec<T>> {
        match std::mem::replace(&mut accs[out], Acc::Empty) {
            Acc::Empty => None,
            Acc::Dense(g) => Some(g),
            Acc::Rows(rows) => {
                // An op output received scattered rows; densify.
                let width = *self.bufs[out].shape.last().unwrap();
                let mut g = vec![T::zero(); self.numel(out)];
                for (r, row) in rows {
                    for (dst, src) in g[r * width..(r + 1) * width].iter_mut().zip(&row) {
                        *dst += *src;
                    }
                }
                Some(g)
            }
        }
    }

    fn add_grad(&self, accs: &mut [Acc<T>], id: BufId, grad: &[T]) {
        match &mut accs[id] {
            Acc::Dense(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += *g;
                }
            }
            acc => {
                if let Acc::Rows(rows) = acc {
                    // Upgrade scattered rows to dense before dense accumulation.
                    let width = *self.bufs[id].shape.last().unwrap();
                    let mut dense = vec![T::zero(); self.numel(id)];
                    for (r, row) in rows.drain(..) {
                        for (dst, src) in dense[r * width..(r + 1) * width].iter_mut().zip(&row) {
                            *dst += *src;
                        }
                    }
                    for (e, g) in dense.iter_mut().zip(grad) {
                        *e += *g;
                    }
                    *acc = Acc::Dense(dense);
                    return;
                }
                *acc = Acc::Dense(grad.to_vec());
            }
        }
    }

    fn add_grad_row(&self, accs: &mut [Acc<T>], id: BufId, row: usize, grad_row: &[T]) {
        match &mut accs[id] {
            Acc::Dense(existing) => {
                let width = grad_row.len();
                for (e, g) in existing[row * width..(row + 1) * width].iter_mut().zip(grad_row) {
                    *e += *g;
                }
            }
            Acc::Rows(rows) => rows.push((row, grad_row.to_vec())),
            acc @ Acc::Empty => *acc = Acc::Rows(vec![(row, grad_row.to_vec())]),
        }
    }

    fn backward_op(&self, op: &Op<T>, accs: &mut [Acc<T>]) {
        match op {
            Op::MatMul { a, b, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let (m, k) = (self.bufs[*a].shape[0], self.bufs[*a].shape[1]);
                    let n = self.bufs[*b].shape[1];
                    let mut da = vec![T::zero(); m * k];
                    mm_tb(&d, self.data(*b), m, n, k, &mut da);
                    self.add_grad(accs, *a, &da);
                    let mut db = vec![T::zero(); k * n];
                    mm_ta(self.data(*a), &d, m, k, n, &mut db);
                    self.add_grad(accs, *b, &db);
                }
            }
            Op::MatMulTA { a, b, out } => {
                // out = aᵀ·b, a [k,m], b [k,n]
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let (k, m) = (self.bufs[*a].shape[0], self.bufs[*a].shape[1]);
                    let n = self.bufs[*b].shape[1];
                    let mut da = vec![T::zero(); k * m];
                    mm_tb(self.data(*b), &d, k, n, m, &mut da); // b·dᵀ → [k,m]
                    self.add_grad(accs, *a, &da);
                    let mut db = vec![T::zero(); k * n];
                    mm(self.data(*a), &d, k, m, n, &mut db); // a·d → [k,n]
                    self.add_grad(accs, *b, &db);
                }
            }
            Op::MatMulTB { a, b, out } => {
                // out = a·bᵀ, a [m,k], b [n,k]
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let (m, k) = (self.bufs[*a].shape[0], self.bufs[*a].shape[1]);
                    let n = self.bufs[*b].shape[0];
                    let mut da = vec![T::zero(); m * k];
                    mm(&d, self.data(*b), m, n, k, &mut da); // d·b → [m,k]
                    self.add_grad(accs, *a, &da);
                    let mut db = vec![T::zero(); n * k];
                    mm_ta(&d, self.data(*a), m, n, k, &mut db); // dᵀ·a → [n,k]
                    self.add_grad(accs, *b, &db);
                }
            }
            Op::Add { a, b, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    self.add_grad(accs, *a, &d);
                    self.add_grad(accs, *b, &d);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    self.add_grad(accs, *a, &d);
                    let neg: Vec<T> = d.iter().map(|&v| -v).collect();
                    self.add_grad(accs, *b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let da: Vec<T> = d.iter().zip(self.data(*b)).map(|(&g, &v)| g * v).collect();
                    self.add_grad(accs, *a, &da);
                    let db: Vec<T> = d.iter().zip(self.data(*a)).map(|(&g, &v)| g * v).collect();
                    self.add_grad(accs, *b, &db);
                }
            }
            Op::Scale { x, c, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let dx: Vec<T> = d.iter().map(|&g| g * *c).collect();
                    self.add_grad(accs, *x, &dx);
                }
            }
            Op::AddRow { m, row, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let (r, c) = (self.bufs[*m].shape[0], self.bufs[*m].shape[1]);
                    self.add_grad(accs, *m, &d);
                    let mut drow = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            drow[j] += d[i * c + j];
                        }
                    }
                    self.add_grad(accs, *row, &drow);
                }
            }
            Op::MulRow { m, row, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let (r, c) = (self.bufs[*m].shape[0], self.bufs[*m].shape[1]);
                    let md = self.data(*m);
                    let rd = self.data(*row);
                    let mut dm = vec![T::zero(); r * c];
                    let mut drow = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] = d[i * c + j] * rd[j];
                            drow[j] += d[i * c + j] * md[i * c + j];
                        }
                    }
                    self.add_grad(accs, *m, &dm);
                    self.add_grad(accs, *row, &drow);
                }
            }
            Op::AddScalar { x, s, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    self.add_grad(accs, *x, &d);
                    let mut ds = T::zero();
                    for &g in &d {
                        ds += g;
                    }
                    self.add_grad(accs, *s, &[ds]);
                }
            }
            Op::ScaleBy { x, s, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let sv = self.data(*s)[0];
                    let dx: Vec<T> = d.iter().map(|&g| g * sv).collect();
                    self.add_grad(accs, *x, &dx);
                    let mut ds = T::zero();
                    for (&g, &v) in d.iter().zip(self.data(*x)) {
                        ds += g * v;
                    }
                    self.add_grad(accs, *s, &[ds]);
                }
            }
            Op::Tanh { x, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let y = self.data(*out);
                    let dx: Vec<T> = d
                        .iter()
                        .zip(y)
                        .map(|(&g, &yv)| g * (T::one() - yv * yv))
                        .collect();
                    self.add_grad(accs, *x, &dx);
                }
            }
            Op::Relu { x, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let xd = self.data(*x);
                    let z = T::zero();
                    let dx: Vec<T> = d
                        .iter()
                        .zip(xd)
                        .map(|(&g, &xv)| if xv > z { g } else { z })
                        .collect();
                    self.add_grad(accs, *x, &dx);
                }
            }
            Op::Reshape { x, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    self.add_grad(accs, *x, &d);
                }
            }
            Op::ConcatCols { parts, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let r = self.bufs[*out].shape[0];
                    let total = self.bufs[*out].shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let w = self.bufs[p].shape[1];
                        let mut dp = vec![T::zero(); r * w];
                        for i in 0..r {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&d[i * total + off..i * total + off + w]);
                        }
                        self.add_grad(accs, p, &dp);
                        off += w;
                    }
                }
            }
            Op::SliceCols { x, start, len, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let (r, c) = (self.bufs[*x].shape[0], self.bufs[*x].shape[1]);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&d[i * len..(i + 1) * len]);
                    }
                    self.add_grad(accs, *x, &dx);
                }
            }
            Op::GatherRows { table, rows, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let w = self.bufs[*out].shape[1];
                    for (i, &r) in rows.iter().enumerate() {
                        self.add_grad_row(accs, *table, r, &d[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::MaskRows { x, valid, out } => {
                if let Some(mut d) = self.take_out_grad(accs, *out) {
                    let c = self.bufs[*x].shape[1];
                    for v in d[valid * c..].iter_mut() {
                        *v = T::zero();
                    }
                    self.add_grad(accs, *x, &d);
                }
            }
            Op::MeanRows { x, valid, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let (r, c) = (self.bufs[*x].shape[0], self.bufs[*x].shape[1]);
                    let inv = T::from_f64(1.0 / *valid as f64);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..*valid {
                        for j in 0..c {
                            dx[i * c + j] = d[j] * inv;
                        }
                    }
                    self.add_grad(accs, *x, &dx);
                }
            }
            Op::RowSoftmax { x, valid, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let (r, c) = (self.bufs[*x].shape[0], self.bufs[*x].shape[1]);
                    let y = self.data(*out);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let mut dot = T::zero();
                        for j in 0..*valid {
                            dot += d[i * c + j] * y[i * c + j];
                        }
                        for j in 0..*valid {
                            dx[i * c + j] = y[i * c + j] * (d[i * c + j] - dot);
                        }
                    }
                    self.add_grad(accs, *x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let (r, c) = (self.bufs[*x].shape[0], self.bufs[*x].shape[1]);
                    let xd = self.data(*x);
                    let g = self.data(*gain);
                    let eps = T::from_f64(LAYER_NORM_EPS);
                    let inv_c = T::from_f64(1.0 / c as f64);
                    let mut dx = vec![T::zero(); r * c];
                    let mut dgain = vec![T::zero(); c];
                    let mut dbias = vec![T::zero(); c];
                    for i in 0..r {
                        let row = &xd[i * c..(i + 1) * c];
                        let drow = &d[i * c..(i + 1) * c];
                        let mut mean = T::zero();
                        for &v in row {
                            mean += v;
                        }
                        mean *= inv_c;
                        let mut var = T::zero();
                        for &v in row {
                            let dv = v - mean;
                            var += dv * dv;
                        }
                        var *= inv_c;
                        let istd = T::one() / (var + eps).sqrt();
                        let mut m1 = T::zero(); // mean(dy0)
                        let mut m2 = T::zero(); // mean(dy0 ⊙ y0)
                        for j in 0..c {
                            let y0 = (row[j] - mean) * istd;
                            let dy0 = drow[j] * g[j];
                            dgain[j] += drow[j] * y0;
                            dbias[j] += drow[j];
                            m1 += dy0;
                            m2 += dy0 * y0;
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let y0 = (row[j] - mean) * istd;
                            let dy0 = drow[j] * g[j];
                            dx[i * c + j] = istd * (dy0 - m1 - y0 * m2);
                        }
                    }
                    self.add_grad(accs, *x, &dx);
                    self.add_grad(accs, *gain, &dgain);
                    self.add_grad(accs, *bias, &dbias);
                }
            }
            Op::Conv1d { x, kernels, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let (l, din) = (self.bufs[*x].shape[0], self.bufs[*x].shape[1]);
                    let ks = &self.bufs[*kernels].shape;
                    let (w, dout) = (ks[0], ks[2]);
                    let half = w / 2;
                    let xd = self.data(*x);
                    let kd = self.data(*kernels);
                    let mut dx = vec![T::zero(); l * din];
                    let mut dk = vec![T::zero(); w * din * dout];
                    for p in 0..l {
                        let dr = &d[p * dout..(p + 1) * dout];
                        for t in 0..w {
                            let src = p + t;
                            if src < half || src - half >= l {
                                continue;
                            }
                            let s = src - half;
                            for i in 0..din {
                                let kbase = (t * din + i) * dout;
                                let xv = xd[s * din + i];
                                let mut acc = T::zero();
                                for o in 0..dout {
                                    acc += kd[kbase + o] * dr[o];
                                    dk[kbase + o] += xv * dr[o];
                                }
                                dx[s * din + i] += acc;
                            }
                        }
                    }
                    self.add_grad(accs, *x, &dx);
                    self.add_grad(accs, *kernels, &dk);
                }
            }
            Op::SumSquares { x, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let two = T::from_f64(2.0);
                    let dx: Vec<T> = self.data(*x).iter().map(|&v| two * d[0] * v).collect();
                    self.add_grad(accs, *x, &dx);
                }
            }
            Op::AddDiag { x, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    self.add_grad(accs, *x, &d);
                }
            }
            Op::SpdSolve { a, b, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let n = self.bufs[*a].shape[0];
                    // y = A⁻¹b, so db = A⁻¹·d and dA = −db ⊗ y (A symmetric).
                    let l = cholesky(self.data(*a), n).expect("factorized in forward");
                    let db = chol_solve(&l, &d, n);
                    let y = self.data(*out);
                    let mut da = vec![T::zero(); n * n];
                    for i in 0..n {
                        for j in 0..n {
                            da[i * n + j] = -db[i] * y[j];
                        }
                    }
                    self.add_grad(accs, *a, &da);
                    self.add_grad(accs, *b, &db);
                }
            }
            Op::CrossEntropy { logits, target, out } => {
                if let Some(d) = self.take_out_grad(accs, *out) {
                    let xd = self.data(*logits);
                    let max = xd.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    let mut p: Vec<T> = xd.iter().map(|&v| (v - max).exp()).collect();
                    for &e in &p {
                        sum += e;
                    }
                    for (j, e) in p.iter_mut().enumerate() {
                        *e /= sum;
                        if j == *target {
                            *e -= T::one();
                        }
                        *e *= d[0];
                    }
                    self.add_grad(accs, *logits, &p);
                }
            }
        }
    }
}

enum Acc<T> {
    Empty,
    Dense(Vec<T>),
    Rows(Vec<(usize, Vec<T>)>),
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::MatMul { .. } => "matmul",
        Op::MatMulTA { .. } => "matmul_ta",
        Op::MatMulTB { .. } => "matmul_tb",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddRow { .. } => "add_row",
        Op::MulRow { .. } => "mul_row",
        Op::AddScalar { .. } => "add_scalar",
        Op::ScaleBy { .. } => "scale_by",
        Op::Tanh { .. } => "tanh",
        Op::Relu { .. } => "relu",
        Op::Reshape { .. } => "reshape",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::MaskRows { .. } => "mask_rows",
        Op::MeanRows { .. } => "mean_rows",
        Op::RowSoftmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1d { .. } => "conv1d",
        Op::SumSquares { .. } => "sum_squares",
        Op::AddDiag { .. } => "add_diag",
        Op::SpdSolve { .. } => "spd_solve",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

// ── raw kernels (accumulate into `out`) ──────────────────────────────

fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ·b` with `a [k,m]`, `b [k,n]`.
fn mm_ta<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a·bᵀ` with `a [m,k]`, `b [n,k]`.
fn mm_tb<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

fn conv_forward<T: Scalar>(
    x: &[T],
    kernels: &[T],
    l: usize,
    din: usize,
    dout: usize,
    width: usize,
    out: &mut [T],
) {
    let half = width / 2;
    for p in 0..l {
        let out_row = &mut out[p * dout..(p + 1) * dout];
        for t in 0..width {
            let src = p + t;
            if src < half || src - half >= l {
                continue;
            }
            let s = src - half;
            for i in 0..din {
                let xv = x[s * din + i];
                let k_row = &kernels[(t * din + i) * dout..(t * din + i + 1) * dout];
                for (o, &kv) in out_row.iter_mut().zip(k_row) {
                    *o += xv * kv;
                }
            }
        }
    }
}

// ── dense Cholesky ───────────────────────────────────────────────────

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub(crate) fn cholesky<T: Scalar>(a: &[T], n: usize) -> Result<Vec<T>> {
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= T::zero() || !sum.is_finite() {
                    return Err(Error::Solve(format!(
                        "matrix not positive definite at pivot {i}"
                    )));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve `L·Lᵀ·x = b` given the Cholesky factor `L`.
pub(crate) fn chol_solve<T: Scalar>(l: &[T], b: &[T], n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_store() -> ParamStore<f64> {
        ParamStore::new()
    }

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Scalar triple-loop oracle, independent of the tape kernels.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_passthrough() {
        let store = empty_store();
        let mut tape = Tape::with_finite_checks(&store);
        let eye = tape.constant(Tensor::eye(2));
        let b = tape.constant(tensor(&[2, 1], &[3.0, 7.0]));
        let out = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.data(out), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let a = tape.constant(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(tensor(&[2, 1], &[1.0, 1.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(out), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = matmul_oracle(&a, &b, m, k, n);

        let store = empty_store();
        let mut tape = Tape::new(&store);
        let ta = tape.constant(tensor(&[m, k], &a));
        let tb = tape.constant(tensor(&[k, n], &b));
        let out = tape.matmul(ta, tb).unwrap();
        for (got, want) in tape.data(out).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn transposed_variants_match_plain_matmul() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let at: Vec<f64> = {
            let mut t = vec![0.0; k * m];
            for i in 0..m {
                for j in 0..k {
                    t[j * m + i] = a[i * k + j];
                }
            }
            t
        };
        let bt: Vec<f64> = {
            let mut t = vec![0.0; n * k];
            for i in 0..k {
                for j in 0..n {
                    t[j * k + i] = b[i * n + j];
                }
            }
            t
        };
        let expected = matmul_oracle(&a, &b, m, k, n);

        let store = empty_store();
        let mut tape = Tape::new(&store);
        let a_t = tape.constant(tensor(&[k, m], &at));
        let b_n = tape.constant(tensor(&[k, n], &b));
        let out_ta = tape.matmul_ta(a_t, b_n).unwrap();
        let a_n = tape.constant(tensor(&[m, k], &a));
        let b_t = tape.constant(tensor(&[n, k], &bt));
        let out_tb = tape.matmul_tb(a_n, b_t).unwrap();
        for (got, want) in tape.data(out_ta).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in tape.data(out_tb).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(tensor(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.row_softmax(x, 3).unwrap();
        for &v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = tape.constant(tensor(&[1, 2], &[1000.0, 0.0]));
        let y = tape.row_softmax(big, 2).unwrap();
        let d = tape.data(y);
        assert!(d[0] > 1.0 - 1e-9 && d[1] < 1e-9);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_direct_exp_normalization() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(tensor(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = tape.row_softmax(x, 3).unwrap();
        // Direct exp-sum oracle.
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (got, want) in tape.data(y).iter().zip(exps.iter().map(|e| e / sum)) {
            assert!((got - want).abs() < 1e-15);
        }
        let total: f64 = tape.data(y).iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rejects_empty_support() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(tensor(&[1, 3], &[1.0, 2.0, 3.0]));
        assert!(tape.row_softmax(x, 0).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(tensor(&[1, 4], &[1.0, 1.0, 50.0, 50.0]));
        let y = tape.row_softmax(x, 2).unwrap();
        let d = tape.data(y);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], 0.0);
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_vector_is_zeroed() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(tensor(&[1, 4], &[5.0, 5.0, 5.0, 5.0]));
        let g = tape.constant(tensor(&[1, 4], &[1.0; 4]));
        let b = tape.constant(tensor(&[1, 4], &[0.0; 4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_case() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(tensor(&[1, 2], &[1.0, -1.0]));
        let g = tape.constant(tensor(&[1, 2], &[1.0, 1.0]));
        let b = tape.constant(tensor(&[1, 2], &[0.0, 0.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_statistics_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 16;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(tensor(&[1, n], &xs));
        let g = tape.constant(Tensor::filled(&[1, n], 1.0));
        let b = tape.constant(Tensor::zeros(&[1, n]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let out = tape.data(y);
        let mean: f64 = out.iter().sum::<f64>() / n as f64;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // epsilon shifts variance slightly
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[3, 1]));
        let g = tape.constant(Tensor::zeros(&[1, 1]));
        let b = tape.constant(Tensor::zeros(&[1, 1]));
        assert!(tape.layer_norm(x, g, b).is_err());
    }

    /// Explicit sliding-window convolution oracle.
    fn conv_oracle(
        x: &[f64],
        k: &[f64],
        l: usize,
        din: usize,
        dout: usize,
        w: usize,
    ) -> Vec<f64> {
        let half = (w / 2) as isize;
        let mut out = vec![0.0; l * dout];
        for p in 0..l as isize {
            for o in 0..dout {
                let mut acc = 0.0;
                for t in 0..w as isize {
                    let s = p + t - half;
                    if s < 0 || s >= l as isize {
                        continue;
                    }
                    for i in 0..din {
                        acc += x[s as usize * din + i] * k[((t as usize) * din + i) * dout + o];
                    }
                }
                out[p as usize * dout + o] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_zero_kernels_zero_output() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(tensor(&[5, 3], &[1.0; 15]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 3]));
        let y = tape.conv1d_same(x, k).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_width_one_identity_kernel() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let xs: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = tape.constant(tensor(&[4, 3], &xs));
        // kernels [1, 3, 3] = identity mapping
        let k = tape.constant(tensor(&[1, 3, 3], Tensor::<f64>::eye(3).data()));
        let y = tape.conv1d_same(x, k).unwrap();
        assert_eq!(tape.data(y), xs.as_slice());
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (l, din, dout, w) = (6, 4, 4, 3);
        let xs: Vec<f64> = (0..l * din).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ks: Vec<f64> = (0..w * din * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = conv_oracle(&xs, &ks, l, din, dout, w);

        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(tensor(&[l, din], &xs));
        let k = tape.constant(tensor(&[w, din, dout], &ks));
        let y = tape.conv1d_same(x, k).unwrap();
        for (got, want) in tape.data(y).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_even_width() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        let k = tape.constant(Tensor::zeros(&[2, 2, 2]));
        match tape.conv1d_same(x, k) {
            Err(Error::Config(_)) => {}
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    #[test]
    fn tanh_affine_hand_cases() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        // W = 0, b = 0 → zeros
        let w = tape.constant(Tensor::zeros(&[3, 2]));
        let x = tape.constant(tensor(&[1, 2], &[0.7, -0.3]));
        let b = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.tanh_affine(w, x, b).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));

        // W = I, b = 0, x = [0.5] → [tanh(0.5)]
        let w = tape.constant(Tensor::eye(2));
        let x = tape.constant(tensor(&[1, 2], &[0.5, 0.0]));
        let b = tape.constant(Tensor::zeros(&[1, 2]));
        let y = tape.tanh_affine(w, x, b).unwrap();
        assert!((tape.data(y)[0] - 0.5f64.tanh()).abs() < 1e-15);
        // outputs stay inside (−1, 1)
        assert!(tape.data(y).iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn spd_solve_recovers_known_solution() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        // A = [[4,1],[1,3]] (SPD), x = [1, 2] → b = A x = [6, 7]
        let a = tape.constant(tensor(&[2, 2], &[4.0, 1.0, 1.0, 3.0]));
        let b = tape.constant(tensor(&[1, 2], &[6.0, 7.0]));
        let y = tape.spd_solve(a, b).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spd_solve_rejects_indefinite_matrix() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let a = tape.constant(tensor(&[2, 2], &[1.0, 2.0, 2.0, 1.0]));
        let b = tape.constant(tensor(&[1, 2], &[1.0, 1.0]));
        assert!(tape.spd_solve(a, b).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let store = empty_store();
        let mut tape = Tape::new(&store);
        let logits = tape.constant(tensor(&[1, 4], &[0.0; 4]));
        let loss = tape.cross_entropy(logits, 2).unwrap();
        assert!((tape.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_through_shared_buffer_accumulates() {
        // loss = sum_squares(x) + sum_squares(x) → d/dx = 4x
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", tensor(&[1, 2], &[1.5, -2.0]));
        let mut tape = Tape::new(&store);
        let xb = tape.param(x);
        let s1 = tape.sum_squares(xb).unwrap();
        let s2 = tape.sum_squares(xb).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(loss, &mut grads).unwrap();
        let g = grads.get(x).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-12);
        assert!((g[1] + 8.0).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_produces_sparse_gradients() {
        let mut store = ParamStore::<f64>::new();
        let table = store.add("table", tensor(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut tape = Tape::new(&store);
        let tb = tape.param(table);
        let rows = tape.gather_rows(tb, &[2, 0, 2]).unwrap();
        let loss = tape.sum_squares(rows).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(loss, &mut grads).unwrap();
        let g = grads.get(table).unwrap();
        // row 0 gathered once: 2*[1,2]; row 2 twice: 2*2*[5,6]
        assert_eq!(g, &[2.0, 4.0, 0.0, 0.0, 20.0, 24.0]);
    }

    #[test]
    fn gather_rows_rejects_out_of_range_id() {
        let mut store = ParamStore::<f64>::new();
        let table = store.add("table", Tensor::zeros(&[3, 2]));
        let mut tape = Tape::new(&store);
        let tb = tape.param(table);
        assert!(tape.gather_rows(tb, &[3]).is_err());
    }

    #[test]
    fn forward_replay_is_bit_identical() {
        use rand::{Rng, SeedableRng};
        let run = || -> Vec<f64> {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
            let xs: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let store = ParamStore::<f64>::new();
            let mut tape = Tape::new(&store);
            let x = tape.constant(tensor(&[3, 4], &xs));
            let g = tape.constant(Tensor::filled(&[1, 4], 1.0));
            let b = tape.constant(Tensor::zeros(&[1, 4]));
            let ln = tape.layer_norm(x, g, b).unwrap();
            let sm = tape.row_softmax(ln, 4).unwrap();
            tape.data(sm).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed + same inputs must be bit-identical");
    }
}
