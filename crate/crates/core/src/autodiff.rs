//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass. Leaves are either
//! trainable (`param`) or constant (`constant` / `shared`); constants never
//! receive gradient storage, which is how frozen backbone weights stay out
//! of the gradient map. [`Tape::backward`] walks the tape once in reverse
//! and returns the gradients of every trainable leaf.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `x · σ(x)`
    Silu,
    /// tanh approximation of GELU
    Gelu,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Gelu => {
                let c = T::of(0.797_884_560_802_865_4);
                let k = T::of(0.044_715);
                T::of(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
            }
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Gelu => {
                let c = T::of(0.797_884_560_802_865_4);
                let k = T::of(0.044_715);
                let inner = c * (x + k * x * x * x);
                let t = inner.tanh();
                let dinner = c * (T::one() + T::of(3.0) * k * x * x);
                T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
            }
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    SegmentMean {
        x: Var,
        seg: Arc<Vec<usize>>,
        counts: Vec<usize>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RowCosine {
        a: Var,
        b: Var,
        norms: Vec<(T, T)>,
    },
    MulCol(Var, Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Arc<Matrix<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Norm below which a row counts as the zero vector in [`Tape::row_cosine`].
pub const COSINE_ZERO_NORM: f64 = 1e-12;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Matrix<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant leaf sharing storage with the caller (frozen weights).
    pub fn shared(&mut self, value: Arc<Matrix<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNt(a, b), ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Matrix::from_vec(x.rows(), x.cols(), data).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let mut v = self.value(a).clone();
        let r = r.row(0).to_vec();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let v = self.value(a).map(|x| act.apply(x));
        let ng = self.ng(a);
        self.push(v, Op::Act(a, act), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1×c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let mut rstd = Vec::with_capacity(n);
        let inv_c = T::one() / T::of_usize(c);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let hrow = xhat.row_mut(i);
            for (h, &v) in hrow.iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
            let hrow = xhat.row(i).to_vec();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = hrow[j] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Row-wise softmax. Entries whose `mask` bit is false get probability 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        if let Some(m) = mask {
            assert_eq!(m.len(), n * c, "mask shape");
        }
        let mut out = Matrix::zeros(n, c);
        for i in 0..n {
            let row = xv.row(i);
            let keep = |j: usize| mask.map_or(true, |m| m[i * c + j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            let orow = out.row_mut(i);
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            let inv = T::one() / total;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Matrix::zeros(idx.len(), c);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        self.push(out, Op::GatherRows(x, idx), ng)
    }

    /// Mean over rows sharing a segment id; output has `n_segments` rows.
    pub fn segment_mean(&mut self, x: Var, seg: Arc<Vec<usize>>, n_segments: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(seg.len(), xv.rows(), "segment ids per row");
        let c = xv.cols();
        let mut out = Matrix::zeros(n_segments, c);
        let mut counts = vec![0usize; n_segments];
        for (r, &s) in seg.iter().enumerate() {
            counts[s] += 1;
            axpy(T::one(), xv.row(r), out.row_mut(s));
        }
        for (s, &k) in counts.iter().enumerate() {
            if k > 0 {
                let inv = T::one() / T::of_usize(k);
                for v in out.row_mut(s) {
                    *v *= inv;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean { x, seg, counts }, ng)
    }

    /// Column-wise max over rows sharing a segment id. Ties resolve to the
    /// lowest row index. Every segment must be nonempty.
    pub fn segment_max(&mut self, x: Var, seg: &[usize], n_segments: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(seg.len(), xv.rows(), "segment ids per row");
        let c = xv.cols();
        let mut out = Matrix::filled(n_segments, c, T::neg_infinity());
        let mut argmax = vec![usize::MAX; n_segments * c];
        for (r, &s) in seg.iter().enumerate() {
            let row = xv.row(r);
            for j in 0..c {
                if row[j] > out.get(s, j) {
                    out.set(s, j, row[j]);
                    argmax[s * c + j] = r;
                }
            }
        }
        assert!(argmax.iter().all(|&a| a != usize::MAX), "empty segment in segment_max");
        let ng = self.ng(x);
        self.push(out, Op::SegmentMax { x, argmax }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(n, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), n, "concat_cols row count");
            let c = pv.cols();
            for i in 0..n {
                out.row_mut(i)[off..off + c].copy_from_slice(pv.row(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows column count");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Matrix::from_vec(rows, c, data).expect("shape");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let out = Matrix::from_vec(end - start, c, xv.data()[start * c..end * c].to_vec())
            .expect("shape");
        let ng = self.ng(x);
        self.push(out, Op::SliceRows(x, start), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let mut out = Matrix::zeros(n, end - start);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..end]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols(x, start), ng)
    }

    /// Per-row cosine similarity, `n×1`. A row with norm below
    /// [`COSINE_ZERO_NORM`] on either side has similarity 0.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_cosine shapes");
        let n = av.rows();
        let mut out = Matrix::zeros(n, 1);
        let mut norms = Vec::with_capacity(n);
        let floor = T::of(COSINE_ZERO_NORM);
        for i in 0..n {
            let (ra, rb) = (av.row(i), bv.row(i));
            let na = dot(ra, ra).sqrt();
            let nb = dot(rb, rb).sqrt();
            if na < floor || nb < floor {
                norms.push((T::zero(), T::zero()));
            } else {
                out.set(i, 0, dot(ra, rb) / (na * nb));
                norms.push((na, nb));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::RowCosine { a, b, norms }, ng)
    }

    /// Scales row `i` of `x` by `w[i]` (`w` is `n×1`).
    pub fn mul_col(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(wv.shape(), (xv.rows(), 1), "mul_col weight shape");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let s = wv.get(i, 0);
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::MulCol(x, w), ng)
    }

    /// Mean softmax cross-entropy over the rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        assert_eq!(labels.len(), n, "one label per row");
        let mut probs = Matrix::zeros(n, c);
        let mut loss = T::zero();
        for i in 0..n {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + total.ln();
            for (j, p) in probs.row_mut(i).iter_mut().enumerate() {
                *p = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        loss /= T::of_usize(n);
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Matrix::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.ng(loss) {
            grads[loss.0] = Some(Matrix::scalar(T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Matrix<T>, g: Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).matmul_tn(&g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let m = hadamard(&g, self.value(*b));
                    self.acc(grads, *a, m);
                }
                if self.ng(*b) {
                    let m = hadamard(&g, self.value(*a));
                    self.acc(grads, *b, m);
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    self.acc(grads, *row, column_sums(&g));
                }
                self.acc(grads, *a, g);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| x * s));
            }
            Op::Act(a, act) => {
                let xv = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &x)| gv * act.derivative(x))
                    .collect();
                self.acc(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, c) = g.shape();
                if self.ng(*gamma) {
                    self.acc(grads, *gamma, column_sums(&hadamard(&g, xhat)));
                }
                if self.ng(*beta) {
                    self.acc(grads, *beta, column_sums(&g));
                }
                if self.ng(*x) {
                    let gam = self.value(*gamma).row(0);
                    let inv_c = T::one() / T::of_usize(c);
                    let mut dx = Matrix::zeros(n, c);
                    for i in 0..n {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            m1 += d;
                            m2 += d * hr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        let rs = rstd[i];
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = rs * (gr[j] * gam[j] - m1 - hr[j] * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let (n, c) = g.shape();
                let mut dx = Matrix::zeros(n, c);
                for i in 0..n {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let s = dot(gr, y);
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = y[j] * (gr[j] - s);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    axpy(T::one(), g.row(r), dx.row_mut(i));
                }
                self.acc(grads, *x, dx);
            }
            Op::SegmentMean { x, seg, counts } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &s) in seg.iter().enumerate() {
                    let inv = T::one() / T::of_usize(counts[s]);
                    axpy(inv, g.row(s), dx.row_mut(r));
                }
                self.acc(grads, *x, dx);
            }
            Op::SegmentMax { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Matrix::zeros(xv.rows(), c);
                for (k, &r) in argmax.iter().enumerate() {
                    let (s, j) = (k / c, k % c);
                    let cur = dx.get(r, j);
                    dx.set(r, j, cur + g.get(s, j));
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let mut dp = Matrix::zeros(g.rows(), c);
                        for i in 0..g.rows() {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.acc(grads, p, dp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.ng(p) {
                        let dp = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec())
                            .expect("shape");
                        self.acc(grads, p, dp);
                    }
                    off += r;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Matrix::zeros(xv.rows(), c);
                dx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                self.acc(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let w = g.cols();
                for i in 0..g.rows() {
                    dx.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                }
                self.acc(grads, *x, dx);
            }
            Op::RowCosine { a, b, norms } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, c) = av.shape();
                let mut da = Matrix::zeros(n, c);
                let mut db = Matrix::zeros(n, c);
                for i in 0..n {
                    let (na, nb) = norms[i];
                    if na == T::zero() {
                        continue;
                    }
                    let gi = g.get(i, 0);
                    let s = out.get(i, 0);
                    let (ra, rb) = (av.row(i), bv.row(i));
                    let inv = T::one() / (na * nb);
                    let (ka, kb) = (s / (na * na), s / (nb * nb));
                    let dar = da.row_mut(i);
                    for j in 0..c {
                        dar[j] = gi * (rb[j] * inv - ka * ra[j]);
                    }
                    let dbr = db.row_mut(i);
                    for j in 0..c {
                        dbr[j] = gi * (ra[j] * inv - kb * rb[j]);
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::MulCol(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.ng(*w) {
                    let mut dw = Matrix::zeros(xv.rows(), 1);
                    for i in 0..xv.rows() {
                        dw.set(i, 0, dot(g.row(i), xv.row(i)));
                    }
                    self.acc(grads, *w, dw);
                }
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for i in 0..dx.rows() {
                        let s = wv.get(i, 0);
                        for v in dx.row_mut(i) {
                            *v *= s;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let scale = g.get(0, 0) / T::of_usize(labels.len());
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    let cur = d.get(i, l);
                    d.set(i, l, cur - T::one());
                }
                d.scale_in_place(scale);
                self.acc(grads, *logits, d);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, Matrix::filled(xv.rows(), xv.cols(), g.get(0, 0)));
            }
        }
    }
}

fn hadamard<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape")
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        axpy(T::one(), g.row(i), out.row_mut(0));
    }
    out
}

/// Gradients of the trainable leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for constants and for leaves the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
