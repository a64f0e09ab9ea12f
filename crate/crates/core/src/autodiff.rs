//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! records in reverse and accumulates adjoints. Only the operations needed by
//! the link-prediction network are provided, several of them fused
//! (layer norm, multi-head attention, the two losses) so that their backward
//! passes are written out explicitly.

use crate::tensor::{gemm, Mat, Real, View};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of token rows that attend only to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
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
    Abs(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<Mat<T>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    RowNormalize {
        x: Var,
        norms: Vec<T>,
    },
    MulConst(Var, Mat<T>),
    Reshape(Var),
    SumAll(Var),
    MeanRows(Var),
    BceLogits {
        logits: Var,
        targets: Mat<T>,
        pos_weight: T,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn acc<'g, T: Real>(grads: &'g mut [Option<Mat<T>>], nodes: &[Node<T>], v: Var) -> &'g mut Mat<T> {
    let (r, c) = nodes[v.0].value.shape();
    grads[v.0].get_or_insert_with(|| Mat::zeros(r, c))
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols(), bm.cols(), "matmul_nt inner dimension");
        let mut out = Mat::zeros(am.rows(), bm.rows());
        gemm(
            T::one(),
            am.data(),
            View::dense(am.rows(), am.cols()),
            bm.data(),
            View::dense(bm.rows(), bm.cols()).t(),
            T::zero(),
            out.data_mut(),
            View::dense(am.rows(), bm.rows()),
        );
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Mat<T> {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "elementwise shape mismatch");
        let data = am.data().iter().zip(bm.data()).map(|(&x, &y)| f(x, y)).collect();
        Mat::from_vec(am.rows(), am.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the `1 x cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(bm.rows(), 1, "add_row expects a single row");
        assert_eq!(am.cols(), bm.cols(), "add_row width mismatch");
        let mut out = am.clone();
        for i in 0..out.rows() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(bm.data()) {
                *o = *o + bv;
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(out, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        let ng = self.ng(&[a]);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(&[a]);
        self.push(value, Op::Silu(a), ng)
    }

    /// Row-wise layer normalization with affine parameters of shape `1 x d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (n, d) = xm.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, d), "layer_norm gamma shape");
        assert_eq!(b.shape(), (1, d), "layer_norm beta shape");
        let eps = T::from_f64_lossy(LN_EPS);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xm.row(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g.get(0, j) + b.get(0, j));
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Scaled dot-product multi-head attention. Tokens attend only within their
    /// segment; keys flagged `false` in `key_visible` are masked out.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        key_visible: Option<&[bool]>,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = qm.shape();
        assert_eq!(km.shape(), (t, d), "attention key shape");
        assert_eq!(vm.shape(), (t, d), "attention value shape");
        assert!(heads > 0 && d % heads == 0, "heads must divide the width");
        if let Some(mask) = key_visible {
            assert_eq!(mask.len(), t, "attention mask length");
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = Mat::zeros(t, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            assert!(seg.start + seg.len <= t, "segment out of range");
            for h in 0..heads {
                let blk = View::block(d, seg.start, seg.len, h * dh, dh);
                let mut p = Mat::zeros(seg.len, seg.len);
                gemm(
                    scale,
                    qm.data(),
                    blk,
                    km.data(),
                    blk.t(),
                    T::zero(),
                    p.data_mut(),
                    View::dense(seg.len, seg.len),
                );
                for i in 0..seg.len {
                    let row = p.row_mut(i);
                    if let Some(mask) = key_visible {
                        for (j, r) in row.iter_mut().enumerate() {
                            if !mask[seg.start + j] {
                                *r = T::neg_infinity();
                            }
                        }
                    }
                    let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                    assert!(mx.is_finite(), "attention row has no visible key");
                    let mut s = T::zero();
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        s = s + *r;
                    }
                    for r in row.iter_mut() {
                        *r = *r / s;
                    }
                }
                gemm(
                    T::one(),
                    p.data(),
                    View::dense(seg.len, seg.len),
                    vm.data(),
                    blk,
                    T::zero(),
                    out.data_mut(),
                    blk,
                );
                probs.push(p);
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[c0..c0 + m.cols()].copy_from_slice(m.row(i));
            }
            c0 += m.cols();
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let ng = self.ng(parts);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    /// Output row `r` is row `idx[r]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_rows(idx);
        let ng = self.ng(&[a]);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let n = (m.row(i).iter().map(|&x| x * x).sum::<T>() + T::from_f64_lossy(NORM_EPS)).sqrt();
            norms.push(n);
            for x in out.row_mut(i) {
                *x = *x / n;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::RowNormalize { x: a, norms }, ng)
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Mat<T>) -> Var {
        let am = self.value(a);
        assert_eq!(am.shape(), c.shape(), "mul_const shape mismatch");
        let data = am.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let value = Mat::from_vec(am.rows(), am.cols(), data);
        let ng = self.ng(&[a]);
        self.push(value, Op::MulConst(a, c), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        let ng = self.ng(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Mat::filled(1, 1, s), Op::SumAll(a), ng)
    }

    /// Column-wise mean over rows, giving a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let inv = T::one() / T::from_usize(m.rows().max(1)).unwrap();
        let mut out = Mat::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, &x) in out.row_mut(0).iter_mut().zip(m.row(i)) {
                *o = *o + x;
            }
        }
        out.scale_in_place(inv);
        let ng = self.ng(&[a]);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Weighted binary cross-entropy summed over all entries, evaluated from
    /// pre-sigmoid logits: `-sum(w * y * log s + (1 - y) * log(1 - s))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat<T>, pos_weight: T) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce shape mismatch");
        let mut loss = T::zero();
        for (&zi, &yi) in z.data().iter().zip(targets.data()) {
            loss = loss + pos_weight * yi * softplus(-zi) + (T::one() - yi) * softplus(zi);
        }
        let ng = self.ng(&[logits]);
        self.push(
            Mat::filled(1, 1, loss),
            Op::BceLogits {
                logits,
                targets,
                pos_weight,
            },
            ng,
        )
    }

    /// Softmax cross-entropy summed over rows with a target; rows with `None`
    /// contribute nothing.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows(), targets.len(), "cross-entropy target count");
        let mut loss = T::zero();
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = z.row(i);
                let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
                loss = loss + lse - row[t];
            }
        }
        let ng = self.ng(&[logits]);
        self.push(
            Mat::filled(1, 1, loss),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    gemm(
                        T::one(),
                        g.data(),
                        View::dense(g.rows(), g.cols()),
                        bm.data(),
                        View::dense(bm.rows(), bm.cols()).t(),
                        T::one(),
                        ga.data_mut(),
                        View::dense(am.rows(), am.cols()),
                    );
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    gemm(
                        T::one(),
                        am.data(),
                        View::dense(am.rows(), am.cols()).t(),
                        g.data(),
                        View::dense(g.rows(), g.cols()),
                        T::one(),
                        gb.data_mut(),
                        View::dense(bm.rows(), bm.cols()),
                    );
                }
            }
            Op::MatMulNt(a, b) => {
                let (am, bm) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    gemm(
                        T::one(),
                        g.data(),
                        View::dense(g.rows(), g.cols()),
                        bm.data(),
                        View::dense(bm.rows(), bm.cols()),
                        T::one(),
                        ga.data_mut(),
                        View::dense(am.rows(), am.cols()),
                    );
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    gemm(
                        T::one(),
                        g.data(),
                        View::dense(g.rows(), g.cols()).t(),
                        am.data(),
                        View::dense(am.rows(), am.cols()),
                        T::one(),
                        gb.data_mut(),
                        View::dense(bm.rows(), bm.cols()),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc(grads, nodes, v).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, nodes, *a).add_assign(g);
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    for (x, &y) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x = *x - y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (am, bm) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for ((x, &gy), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(bm.data()) {
                        *x = *x + gy * bv;
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    for ((x, &gy), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(am.data()) {
                        *x = *x + gy * av;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    acc(grads, nodes, *a).add_assign(g);
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    for i in 0..g.rows() {
                        for (x, &gy) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *x = *x + gy;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for (x, &gy) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x = *x + gy * *s;
                    }
                }
            }
            Op::Abs(a) => {
                if wants(*a) {
                    let am = &nodes[a.0].value;
                    let ga = acc(grads, nodes, *a);
                    for ((x, &gy), &av) in ga.data_mut().iter_mut().zip(g.data()).zip(am.data()) {
                        let sign = if av > T::zero() {
                            T::one()
                        } else if av < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *x = *x + gy * sign;
                    }
                }
            }
            Op::Silu(a) => {
                if wants(*a) {
                    let am = &nodes[a.0].value;
                    let ga = acc(grads, nodes, *a);
                    for ((x, &gy), &av) in ga.data_mut().iter_mut().zip(g.data()).zip(am.data()) {
                        let s = sigmoid(av);
                        *x = *x + gy * s * (T::one() + av * (T::one() - s));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                let gm = &nodes[gamma.0].value;
                if wants(*gamma) {
                    let gg = acc(grads, nodes, *gamma);
                    for i in 0..n {
                        for j in 0..d {
                            let cur = gg.get(0, j);
                            gg.set(0, j, cur + g.get(i, j) * xhat.get(i, j));
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc(grads, nodes, *beta);
                    for i in 0..n {
                        for (x, &gy) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *x = *x + gy;
                        }
                    }
                }
                if wants(*x) {
                    let inv_d = T::one() / T::from_usize(d).unwrap();
                    let gx = acc(grads, nodes, *x);
                    let mut dxhat = vec![T::zero(); d];
                    for i in 0..n {
                        let mut mean_dx = T::zero();
                        let mut mean_dx_xhat = T::zero();
                        for j in 0..d {
                            dxhat[j] = g.get(i, j) * gm.get(0, j);
                            mean_dx = mean_dx + dxhat[j];
                            mean_dx_xhat = mean_dx_xhat + dxhat[j] * xhat.get(i, j);
                        }
                        mean_dx = mean_dx * inv_d;
                        mean_dx_xhat = mean_dx_xhat * inv_d;
                        let row = gx.row_mut(i);
                        for j in 0..d {
                            row[j] = row[j]
                                + inv_std[i] * (dxhat[j] - mean_dx - xhat.get(i, j) * mean_dx_xhat);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qm, km, vm) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let d = qm.cols();
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut gq = Mat::zeros(qm.rows(), d);
                let mut gk = Mat::zeros(km.rows(), d);
                let mut gv = Mat::zeros(vm.rows(), d);
                let mut pi = 0;
                for seg in segments {
                    let len = seg.len;
                    for h in 0..*heads {
                        let p = &probs[pi];
                        pi += 1;
                        let blk = View::block(d, seg.start, len, h * dh, dh);
                        let sq = View::dense(len, len);
                        // dV = P^T g
                        gemm(T::one(), p.data(), sq.t(), g.data(), blk, T::one(), gv.data_mut(), blk);
                        // dP = g V^T
                        let mut dp = Mat::zeros(len, len);
                        gemm(T::one(), g.data(), blk, vm.data(), blk.t(), T::zero(), dp.data_mut(), sq);
                        // dS = P * (dP - rowsum(dP * P))
                        for i in 0..len {
                            let prow = p.row(i);
                            let drow = dp.row_mut(i);
                            let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        gemm(scale, dp.data(), sq, km.data(), blk, T::one(), gq.data_mut(), blk);
                        gemm(scale, dp.data(), sq.t(), qm.data(), blk, T::one(), gk.data_mut(), blk);
                    }
                }
                for (var, gm) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if wants(var) {
                        acc(grads, nodes, var).add_assign(&gm);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if wants(p) {
                        let gp = acc(grads, nodes, p);
                        for i in 0..g.rows() {
                            for (x, &gy) in gp.row_mut(i).iter_mut().zip(&g.row(i)[c0..c0 + w]) {
                                *x = *x + gy;
                            }
                        }
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let h = nodes[p.0].value.rows();
                    if wants(p) {
                        let gp = acc(grads, nodes, p);
                        for i in 0..h {
                            for (x, &gy) in gp.row_mut(i).iter_mut().zip(g.row(r0 + i)) {
                                *x = *x + gy;
                            }
                        }
                    }
                    r0 += h;
                }
            }
            Op::SliceRows(a, start) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for i in 0..g.rows() {
                        for (x, &gy) in ga.row_mut(start + i).iter_mut().zip(g.row(i)) {
                            *x = *x + gy;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for (r, &src) in idx.iter().enumerate() {
                        for (x, &gy) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *x = *x + gy;
                        }
                    }
                }
            }
            Op::RowNormalize { x, norms } => {
                if wants(*x) {
                    let y = &node.value;
                    let gx = acc(grads, nodes, *x);
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = *o + (gv - yv * dot) / norms[i];
                        }
                    }
                }
            }
            Op::MulConst(a, c) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for ((x, &gy), &cv) in ga.data_mut().iter_mut().zip(g.data()).zip(c.data()) {
                        *x = *x + gy * cv;
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for (x, &gy) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x = *x + gy;
                    }
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let s = g.get(0, 0);
                    for x in acc(grads, nodes, *a).data_mut() {
                        *x = *x + s;
                    }
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    let inv = T::one() / T::from_usize(ga.rows().max(1)).unwrap();
                    for i in 0..ga.rows() {
                        for (x, &gy) in ga.row_mut(i).iter_mut().zip(g.row(0)) {
                            *x = *x + gy * inv;
                        }
                    }
                }
            }
            Op::BceLogits {
                logits,
                targets,
                pos_weight,
            } => {
                if wants(*logits) {
                    let s = g.get(0, 0);
                    let z = &nodes[logits.0].value;
                    let gz = acc(grads, nodes, *logits);
                    for ((x, &zi), &yi) in gz.data_mut().iter_mut().zip(z.data()).zip(targets.data()) {
                        let sg = sigmoid(zi);
                        let d = *pos_weight * yi * (sg - T::one()) + (T::one() - yi) * sg;
                        *x = *x + s * d;
                    }
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                if wants(*logits) {
                    let s = g.get(0, 0);
                    let z = &nodes[logits.0].value;
                    let gz = acc(grads, nodes, *logits);
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = z.row(i);
                        let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                        let denom: T = row.iter().map(|&x| (x - mx).exp()).sum();
                        for (j, o) in gz.row_mut(i).iter_mut().enumerate() {
                            let p = (row[j] - mx).exp() / denom;
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *o = *o + s * (p - onehot);
                        }
                    }
                }
            }
        }
    }
}
