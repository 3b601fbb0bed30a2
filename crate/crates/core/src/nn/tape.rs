//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] is an append-only arena: every operation pushes a node holding
//! its forward value and the handles of its parents, so parents always
//! precede children and [`Tape::backward`] is a single reverse sweep.
//!
//! Primitive ops panic on shape mismatch; the checked entry points live in
//! [`crate::nn::layers`].

use std::fmt::Debug;
use std::rc::Rc;

use super::Real;
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a hand-written backward rule, for fused kernels that are
/// awkward to express with primitive ops.
pub trait CustomOp<S: Real>: Debug {
    fn parents(&self) -> Vec<Var>;
    /// Accumulates into `parent_grads[i]` (same length as parent `i`'s value).
    fn backward(
        &self,
        out_value: &[S],
        out_grad: &[S],
        parent_values: &[&[S]],
        parent_grads: &mut [Vec<S>],
    );
}

#[derive(Debug)]
enum Op<S: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, S, S),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    SmoothL1(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<Segments>),
    SegmentSoftmax(Var, Rc<Segments>),
    RowDot(Var, Var),
    MulCol(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Sixd(Var),
    Mat3(Var, Var, bool, bool),
    Mat3Vec(Var, Var, bool),
    Sum(Var),
    Mean(Var),
    Custom(Box<dyn CustomOp<S>>),
}

#[derive(Debug)]
struct Node<S: Real> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    op: Op<S>,
}

/// Row-to-segment assignment in CSR form. Reductions over a segment sort the
/// contributions before summing, so the result does not depend on row order.
#[derive(Debug, Clone)]
pub struct Segments {
    n_segments: usize,
    of_row: Vec<usize>,
    offsets: Vec<usize>,
    rows: Vec<usize>,
}

impl Segments {
    pub fn new(of_row: Vec<usize>, n_segments: usize) -> Self {
        let mut counts = vec![0usize; n_segments + 1];
        for &s in &of_row {
            assert!(s < n_segments, "segment id {s} out of range {n_segments}");
            counts[s + 1] += 1;
        }
        for i in 0..n_segments {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut rows = vec![0usize; of_row.len()];
        for (r, &s) in of_row.iter().enumerate() {
            rows[fill[s]] = r;
            fill[s] += 1;
        }
        Segments {
            n_segments,
            of_row,
            offsets,
            rows,
        }
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn len(&self) -> usize {
        self.of_row.len()
    }

    pub fn is_empty(&self) -> bool {
        self.of_row.is_empty()
    }

    pub fn segment_rows(&self, s: usize) -> &[usize] {
        &self.rows[self.offsets[s]..self.offsets[s + 1]]
    }

    pub fn of_row(&self) -> &[usize] {
        &self.of_row
    }
}

fn sorted_sum<S: Real>(buf: &mut [S]) -> S {
    buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut acc = S::zero();
    for &x in buf.iter() {
        acc += x;
    }
    acc
}

pub struct Tape<S: Real> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter leaf.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<S>) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf data length");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn leaf_f64(&mut self, rows: usize, cols: usize, value: &[f64]) -> Var {
        let v = value.iter().map(|&x| S::from_f64(x)).collect();
        self.leaf(rows, cols, v)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(rows, cols, vec![S::zero(); rows * cols])
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn scalar(&self, v: Var) -> S {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "not a scalar");
        n.value[0]
    }

    /// `a [n,k] · b [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); n * m];
        matmul_into(self.value(a), self.value(b), &mut out, n, k, m);
        self.push(n, m, out, Op::MatMul(a, b))
    }

    /// `a [n,k] · bᵀ` for `b [m,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t inner dims {k} vs {k2}");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = dot(&av[i * k..(i + 1) * k], &bv[j * k..(j + 1) * k]);
            }
        }
        self.push(n, m, out, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let out = transposed(self.value(a), n, m);
        self.push(m, n, out, Op::Transpose(a))
    }

    /// Broadcast-add a `[1,m]` row to every row of `x [n,m]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(self.shape(b), (1, m), "add_row bias shape");
        let bv = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(&bv) {
                *o += *bb;
            }
        }
        self.push(n, m, out, Op::AddRow(x, b))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> (usize, usize) {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "{op}: shape mismatch");
        sa
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.same_shape(a, b, "add");
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(n, m, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.same_shape(a, b, "sub");
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(n, m, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.same_shape(a, b, "mul");
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(n, m, out, Op::Mul(a, b))
    }

    /// `scale·x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (n, m) = self.shape(x);
        let (s, c) = (S::from_f64(scale), S::from_f64(shift));
        let out = self.value(x).iter().map(|&v| s * v + c).collect();
        self.push(n, m, out, Op::Affine(x, s, c))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let (n, m) = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(n, m, out, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > S::zero() { v } else { S::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// `0.5x²` for `|x| < 1`, `|x| − 0.5` otherwise.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let half = S::from_f64(0.5);
        self.unary(
            x,
            move |v| {
                if v.abs() < S::one() {
                    half * v * v
                } else {
                    v.abs() - half
                }
            },
            Op::SmoothL1(x),
        )
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.rows(parts[0]);
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.rows(p), n, "concat row mismatch");
                self.cols(p)
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(n, total, out, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.shape(x);
        assert!(start + len <= m, "slice out of range");
        let v = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&v[i * m + start..i * m + start + len]);
        }
        self.push(n, len, out, Op::Slice(x, start))
    }

    /// Row gather: output row `i` is `x[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Rc<[usize]>) -> Var {
        let (n, m) = self.shape(x);
        let v = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * m);
        for &r in idx.iter() {
            assert!(r < n, "gather index {r} out of {n}");
            out.extend_from_slice(&v[r * m..(r + 1) * m]);
        }
        let rows = idx.len();
        self.push(rows, m, out, Op::Gather(x, idx))
    }

    /// Sums the rows of each segment; output has one row per segment.
    pub fn segment_sum(&mut self, x: Var, seg: Rc<Segments>) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(n, seg.len(), "segment_sum rows");
        let v = self.value(x);
        let ns = seg.n_segments();
        let mut out = vec![S::zero(); ns * m];
        let mut buf = Vec::new();
        for s in 0..ns {
            let rows = seg.segment_rows(s);
            for j in 0..m {
                buf.clear();
                buf.extend(rows.iter().map(|&r| v[r * m + j]));
                out[s * m + j] = sorted_sum(&mut buf);
            }
        }
        self.push(ns, m, out, Op::SegmentSum(x, seg))
    }

    /// Softmax of a `[E,1]` logit column within each segment.
    pub fn segment_softmax(&mut self, x: Var, seg: Rc<Segments>) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(m, 1, "segment_softmax expects a column");
        assert_eq!(n, seg.len(), "segment_softmax rows");
        let v = self.value(x);
        let mut out = vec![S::zero(); n];
        let mut buf = Vec::new();
        for s in 0..seg.n_segments() {
            let rows = seg.segment_rows(s);
            if rows.is_empty() {
                continue;
            }
            let mx = rows
                .iter()
                .map(|&r| v[r])
                .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
            buf.clear();
            for &r in rows {
                let e = (v[r] - mx).exp();
                out[r] = e;
                buf.push(e);
            }
            let z = sorted_sum(&mut buf);
            for &r in rows {
                out[r] = out[r] / z;
            }
        }
        self.push(n, 1, out, Op::SegmentSoftmax(x, seg))
    }

    /// Row-wise dot product, `[n,m]·[n,m] → [n,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (n, m) = self.same_shape(a, b, "row_dot");
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..n)
            .map(|i| dot(&av[i * m..(i + 1) * m], &bv[i * m..(i + 1) * m]))
            .collect();
        self.push(n, 1, out, Op::RowDot(a, b))
    }

    /// Scales each row of `x [n,m]` by `c [n,1]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(self.shape(c), (n, 1), "mul_col column shape");
        let (xv, cv) = (self.value(x), self.value(c));
        let mut out = xv.to_vec();
        for i in 0..n {
            for o in &mut out[i * m..(i + 1) * m] {
                *o *= cv[i];
            }
        }
        self.push(n, m, out, Op::MulCol(x, c))
    }

    /// Per-row standardization (`ε = 1e-5`) followed by per-feature gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(self.shape(gain), (1, m), "layer_norm gain");
        assert_eq!(self.shape(bias), (1, m), "layer_norm bias");
        let eps = S::from_f64(1e-5);
        let mf = S::from_f64(m as f64);
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![S::zero(); n * m];
        let mut inv_std = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / mf;
            let mut var = S::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var / mf;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = h * g[j] + b[j];
            }
        }
        self.push(
            n,
            m,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise 6D → row-major 3×3 rotation via Gram-Schmidt.
    pub fn sixd_to_rotation(&mut self, x: Var) -> Var {
        let (n, m) = self.shape(x);
        assert_eq!(m, 6, "sixd expects 6 columns");
        let xv = self.value(x);
        let mut out = vec![S::zero(); n * 9];
        for i in 0..n {
            let r = sixd_forward(&xv[i * 6..i * 6 + 6]).0;
            out[i * 9..i * 9 + 9].copy_from_slice(&r);
        }
        self.push(n, 9, out, Op::Sixd(x))
    }

    /// Row-wise 3×3 product `op(a)·op(b)` on row-major `[n,9]` tensors.
    pub fn mat3(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (n, m) = self.same_shape(a, b, "mat3");
        assert_eq!(m, 9, "mat3 expects 9 columns");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![S::zero(); n * 9];
        for i in 0..n {
            let c = m3_mul(
                &m3_maybe_t(&av[i * 9..i * 9 + 9], ta),
                &m3_maybe_t(&bv[i * 9..i * 9 + 9], tb),
            );
            out[i * 9..i * 9 + 9].copy_from_slice(&c);
        }
        self.push(n, 9, out, Op::Mat3(a, b, ta, tb))
    }

    /// Row-wise `op(m)·v` for `m [n,9]`, `v [n,3]`.
    pub fn mat3_vec(&mut self, m: Var, v: Var, tm: bool) -> Var {
        let n = self.rows(m);
        assert_eq!(self.shape(m), (n, 9), "mat3_vec matrix");
        assert_eq!(self.shape(v), (n, 3), "mat3_vec vector");
        let (mv, vv) = (self.value(m), self.value(v));
        let mut out = vec![S::zero(); n * 3];
        for i in 0..n {
            let a = m3_maybe_t(&mv[i * 9..i * 9 + 9], tm);
            for r in 0..3 {
                out[i * 3 + r] = a[r * 3] * vv[i * 3] + a[r * 3 + 1] * vv[i * 3 + 1]
                    + a[r * 3 + 2] * vv[i * 3 + 2];
            }
        }
        self.push(n, 3, out, Op::Mat3Vec(m, v, tm))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = S::zero();
        for &v in self.value(x) {
            s += v;
        }
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut s = S::zero();
        for &e in v {
            s += e;
        }
        let n = S::from_f64(v.len() as f64);
        self.push(1, 1, vec![s / n], Op::Mean(x))
    }

    pub fn custom(&mut self, rows: usize, cols: usize, value: Vec<S>, op: Box<dyn CustomOp<S>>) -> Var {
        assert_eq!(value.len(), rows * cols);
        for p in op.parents() {
            assert!(p.0 < self.nodes.len(), "custom op parent not on tape");
        }
        self.push(rows, cols, value, Op::Custom(op))
    }

    /// Hash of the branch taken at every non-smooth op (ReLU, |·|,
    /// smooth-L1). Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: bool| {
            h ^= bit as u64 + 1;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in &self.nodes[x.0].value {
                        mix(v > S::zero());
                    }
                }
                Op::Abs(x) => {
                    for &v in &self.nodes[x.0].value {
                        mix(v >= S::zero());
                    }
                }
                Op::SmoothL1(x) => {
                    for &v in &self.nodes[x.0].value {
                        mix(v.abs() < S::one());
                        mix(v >= S::zero());
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(Error::NonScalarLoss(r, c));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let (n, m) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.cols(*a);
                let (av, bv) = (self.value(*a), self.value(*b));
                // ga = g · bᵀ, computed row-wise against the transposed b.
                let bt = transposed(bv, k, m);
                let mut ga = vec![S::zero(); n * k];
                matmul_into(g, &bt, &mut ga, n, m, k);
                accumulate(grads, *a, &ga, self);
                // gb = aᵀ · g
                let at = transposed(av, n, k);
                let mut gb = vec![S::zero(); k * m];
                matmul_into(&at, g, &mut gb, k, n, m);
                accumulate(grads, *b, &gb, self);
            }
            Op::MatMulT(a, b) => {
                let k = self.cols(*a);
                let (av, bv) = (self.value(*a), self.value(*b));
                // out = a bᵀ: ga = g b, gb = gᵀ a
                let mut ga = vec![S::zero(); n * k];
                matmul_into(g, bv, &mut ga, n, m, k);
                accumulate(grads, *a, &ga, self);
                let gt = transposed(g, n, m);
                let mut gb = vec![S::zero(); m * k];
                matmul_into(&gt, av, &mut gb, m, n, k);
                accumulate(grads, *b, &gb, self);
            }
            Op::Transpose(a) => {
                let ga = transposed(g, n, m);
                accumulate(grads, *a, &ga, self);
            }
            Op::AddRow(x, b) => {
                accumulate(grads, *x, g, self);
                let mut gb = vec![S::zero(); m];
                for row in g.chunks(m) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += *v;
                    }
                }
                accumulate(grads, *b, &gb, self);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g, self);
                accumulate(grads, *b, g, self);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g, self);
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                accumulate(grads, *b, &neg, self);
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, self.value(*b), |x, y| x * y);
                let gb = zip_map(g, self.value(*a), |x, y| x * y);
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *b, &gb, self);
            }
            Op::Affine(x, s, _) => {
                let gx: Vec<S> = g.iter().map(|&v| v * *s).collect();
                accumulate(grads, *x, &gx, self);
            }
            Op::Relu(x) => {
                let gx = zip_map(g, self.value(*x), |gv, xv| {
                    if xv > S::zero() {
                        gv
                    } else {
                        S::zero()
                    }
                });
                accumulate(grads, *x, &gx, self);
            }
            Op::Sigmoid(x) => {
                let gx = zip_map(g, &node.value, |gv, y| gv * y * (S::one() - y));
                accumulate(grads, *x, &gx, self);
            }
            Op::Tanh(x) => {
                let gx = zip_map(g, &node.value, |gv, y| gv * (S::one() - y * y));
                accumulate(grads, *x, &gx, self);
            }
            Op::Softplus(x) => {
                let gx = zip_map(g, self.value(*x), |gv, xv| gv * sigmoid(xv));
                accumulate(grads, *x, &gx, self);
            }
            Op::Abs(x) => {
                let gx = zip_map(g, self.value(*x), |gv, xv| {
                    if xv > S::zero() {
                        gv
                    } else if xv < S::zero() {
                        -gv
                    } else {
                        S::zero()
                    }
                });
                accumulate(grads, *x, &gx, self);
            }
            Op::SmoothL1(x) => {
                let gx = zip_map(g, self.value(*x), |gv, xv| {
                    if xv.abs() < S::one() {
                        gv * xv
                    } else if xv > S::zero() {
                        gv
                    } else {
                        -gv
                    }
                });
                accumulate(grads, *x, &gx, self);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.cols(p);
                    let mut gp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        gp.extend_from_slice(&g[i * m + off..i * m + off + w]);
                    }
                    accumulate(grads, p, &gp, self);
                    off += w;
                }
            }
            Op::Slice(x, start) => {
                let (xn, xm) = self.shape(*x);
                let mut gx = vec![S::zero(); xn * xm];
                for i in 0..n {
                    gx[i * xm + start..i * xm + start + m].copy_from_slice(&g[i * m..(i + 1) * m]);
                }
                accumulate(grads, *x, &gx, self);
            }
            Op::Gather(x, idx) => {
                let (xn, xm) = self.shape(*x);
                let mut gx = vec![S::zero(); xn * xm];
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..xm {
                        gx[r * xm + j] += g[i * xm + j];
                    }
                }
                accumulate(grads, *x, &gx, self);
            }
            Op::SegmentSum(x, seg) => {
                let xn = self.rows(*x);
                let mut gx = vec![S::zero(); xn * m];
                for (r, &s) in seg.of_row().iter().enumerate() {
                    gx[r * m..(r + 1) * m].copy_from_slice(&g[s * m..(s + 1) * m]);
                }
                accumulate(grads, *x, &gx, self);
            }
            Op::SegmentSoftmax(x, seg) => {
                let y = &node.value;
                let mut gx = vec![S::zero(); n];
                for s in 0..seg.n_segments() {
                    let rows = seg.segment_rows(s);
                    let mut inner = S::zero();
                    for &r in rows {
                        inner += g[r] * y[r];
                    }
                    for &r in rows {
                        gx[r] = y[r] * (g[r] - inner);
                    }
                }
                accumulate(grads, *x, &gx, self);
            }
            Op::RowDot(a, b) => {
                let k = self.cols(*a);
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = vec![S::zero(); n * k];
                let mut gb = vec![S::zero(); n * k];
                for i in 0..n {
                    for j in 0..k {
                        ga[i * k + j] = g[i] * bv[i * k + j];
                        gb[i * k + j] = g[i] * av[i * k + j];
                    }
                }
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *b, &gb, self);
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (self.value(*x), self.value(*c));
                let mut gx = vec![S::zero(); n * m];
                let mut gc = vec![S::zero(); n];
                for i in 0..n {
                    let mut acc = S::zero();
                    for j in 0..m {
                        gx[i * m + j] = g[i * m + j] * cv[i];
                        acc += g[i * m + j] * xv[i * m + j];
                    }
                    gc[i] = acc;
                }
                accumulate(grads, *x, &gx, self);
                accumulate(grads, *c, &gc, self);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let mf = S::from_f64(m as f64);
                let mut gx = vec![S::zero(); n * m];
                let mut gg = vec![S::zero(); m];
                let mut gbias = vec![S::zero(); m];
                for i in 0..n {
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    for j in 0..m {
                        let go = g[i * m + j];
                        let h = xhat[i * m + j];
                        gg[j] += go * h;
                        gbias[j] += go;
                        let d = go * gv[j];
                        sum_d += d;
                        sum_dx += d * h;
                    }
                    for j in 0..m {
                        let d = g[i * m + j] * gv[j];
                        let h = xhat[i * m + j];
                        gx[i * m + j] = inv_std[i] * (d - sum_d / mf - h * sum_dx / mf);
                    }
                }
                accumulate(grads, *x, &gx, self);
                accumulate(grads, *gain, &gg, self);
                accumulate(grads, *bias, &gbias, self);
            }
            Op::Sixd(x) => {
                let xv = self.value(*x);
                let mut gx = vec![S::zero(); n * 6];
                for i in 0..n {
                    let gr = sixd_backward(&xv[i * 6..i * 6 + 6], &g[i * 9..i * 9 + 9]);
                    gx[i * 6..i * 6 + 6].copy_from_slice(&gr);
                }
                accumulate(grads, *x, &gx, self);
            }
            Op::Mat3(a, b, ta, tb) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = vec![S::zero(); n * 9];
                let mut gb = vec![S::zero(); n * 9];
                for i in 0..n {
                    let x = m3_maybe_t(&av[i * 9..i * 9 + 9], *ta);
                    let y = m3_maybe_t(&bv[i * 9..i * 9 + 9], *tb);
                    let gc: [S; 9] = std::array::from_fn(|k| g[i * 9 + k]);
                    // C = X Y: gX = gC Yᵀ, gY = Xᵀ gC
                    let gx = m3_mul(&gc, &m3_t(&y));
                    let gy = m3_mul(&m3_t(&x), &gc);
                    ga[i * 9..i * 9 + 9].copy_from_slice(&m3_maybe_t(&gx, *ta));
                    gb[i * 9..i * 9 + 9].copy_from_slice(&m3_maybe_t(&gy, *tb));
                }
                accumulate(grads, *a, &ga, self);
                accumulate(grads, *b, &gb, self);
            }
            Op::Mat3Vec(mm, v, tm) => {
                let (mv, vv) = (self.value(*mm), self.value(*v));
                let mut gm = vec![S::zero(); n * 9];
                let mut gvv = vec![S::zero(); n * 3];
                for i in 0..n {
                    let a = m3_maybe_t(&mv[i * 9..i * 9 + 9], *tm);
                    let gi = &g[i * 3..i * 3 + 3];
                    let vi = &vv[i * 3..i * 3 + 3];
                    // y = A v: gA = g vᵀ, gv = Aᵀ g
                    let mut ga = [S::zero(); 9];
                    for r in 0..3 {
                        for c in 0..3 {
                            ga[r * 3 + c] = gi[r] * vi[c];
                        }
                        gvv[i * 3 + r] = a[r] * gi[0] + a[3 + r] * gi[1] + a[6 + r] * gi[2];
                    }
                    gm[i * 9..i * 9 + 9].copy_from_slice(&m3_maybe_t(&ga, *tm));
                }
                accumulate(grads, *mm, &gm, self);
                accumulate(grads, *v, &gvv, self);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                accumulate(grads, *x, &vec![g[0]; len], self);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let gv = g[0] / S::from_f64(len as f64);
                accumulate(grads, *x, &vec![gv; len], self);
            }
            Op::Custom(op) => {
                let parents = op.parents();
                let pvals: Vec<&[S]> = parents.iter().map(|p| self.value(*p)).collect();
                let mut pgrads: Vec<Vec<S>> =
                    pvals.iter().map(|v| vec![S::zero(); v.len()]).collect();
                op.backward(&node.value, g, &pvals, &mut pgrads);
                for (p, gp) in parents.iter().zip(&pgrads) {
                    accumulate(grads, *p, gp, self);
                }
            }
        }
    }
}

fn accumulate<S: Real>(grads: &mut [Option<Vec<S>>], v: Var, g: &[S], tape: &Tape<S>) {
    debug_assert_eq!(g.len(), tape.value(v).len());
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<S: Real> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<S> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![S::zero(); len])
    }
}

pub(crate) fn sigmoid<S: Real>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softplus<S: Real>(v: S) -> S {
    // log(1 + e^v) = max(v, 0) + log(1 + e^{-|v|})
    let z = S::zero();
    let m = if v > z { v } else { z };
    m + (-v.abs()).exp().ln_1p()
}

fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn zip_map<S: Real>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transposed<S: Real>(v: &[S], n: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = v[i * m + j];
        }
    }
    out
}

/// `out[n,m] += a[n,k] · b[k,m]` in i-k-j order.
pub(crate) fn matmul_into<S: Real>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x == S::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += x * bv;
            }
        }
    }
}

fn m3_t<S: Real>(a: &[S; 9]) -> [S; 9] {
    [a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]]
}

fn m3_maybe_t<S: Real>(a: &[S], t: bool) -> [S; 9] {
    let m: [S; 9] = std::array::from_fn(|k| a[k]);
    if t {
        m3_t(&m)
    } else {
        m
    }
}

fn m3_mul<S: Real>(a: &[S; 9], b: &[S; 9]) -> [S; 9] {
    std::array::from_fn(|k| {
        let (r, c) = (k / 3, k % 3);
        a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c]
    })
}

type V3<S> = [S; 3];

fn v_dot<S: Real>(a: &V3<S>, b: &V3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn v_cross<S: Real>(a: &V3<S>, b: &V3<S>) -> V3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn v_axpy<S: Real>(a: S, x: &V3<S>, y: &V3<S>) -> V3<S> {
    [a * x[0] + y[0], a * x[1] + y[1], a * x[2] + y[2]]
}

fn v_scale<S: Real>(a: S, x: &V3<S>) -> V3<S> {
    [a * x[0], a * x[1], a * x[2]]
}

struct SixdCache<S> {
    b1: V3<S>,
    b2: V3<S>,
    a2: V3<S>,
    n1: S,
    n2: S,
}

/// Returns row-major `[b1 b2 b3]` (as columns) plus the intermediates.
fn sixd_forward<S: Real>(x: &[S]) -> ([S; 9], SixdCache<S>) {
    // Tiny floor keeps the network path finite; the checked geometry entry
    // point rejects such inputs instead.
    let floor = S::from_f64(1e-12);
    let a1 = [x[0], x[1], x[2]];
    let a2 = [x[3], x[4], x[5]];
    let n1 = v_dot(&a1, &a1).sqrt().max(floor);
    let b1 = v_scale(S::one() / n1, &a1);
    let u2 = v_axpy(-v_dot(&b1, &a2), &b1, &a2);
    let n2 = v_dot(&u2, &u2).sqrt().max(floor);
    let b2 = v_scale(S::one() / n2, &u2);
    let b3 = v_cross(&b1, &b2);
    let r = [
        b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2],
    ];
    (r, SixdCache { b1, b2, a2, n1, n2 })
}

fn sixd_backward<S: Real>(x: &[S], g: &[S]) -> [S; 6] {
    let (_, c) = sixd_forward(x);
    let gb1 = [g[0], g[3], g[6]];
    let gb2 = [g[1], g[4], g[7]];
    let gb3 = [g[2], g[5], g[8]];
    // b3 = b1 × b2
    let mut gb1 = v_axpy(S::one(), &v_cross(&c.b2, &gb3), &gb1);
    let gb2 = v_axpy(S::one(), &v_cross(&gb3, &c.b1), &gb2);
    // b2 = u2 / n2
    let gu2 = v_scale(
        S::one() / c.n2,
        &v_axpy(-v_dot(&c.b2, &gb2), &c.b2, &gb2),
    );
    // u2 = a2 − (b1·a2) b1
    let b1a2 = v_dot(&c.b1, &c.a2);
    let b1gu2 = v_dot(&c.b1, &gu2);
    let ga2 = v_axpy(-b1gu2, &c.b1, &gu2);
    gb1 = v_axpy(-b1a2, &gu2, &gb1);
    gb1 = v_axpy(-b1gu2, &c.a2, &gb1);
    // b1 = a1 / n1
    let ga1 = v_scale(
        S::one() / c.n1,
        &v_axpy(-v_dot(&c.b1, &gb1), &c.b1, &gb1),
    );
    [ga1[0], ga1[1], ga1[2], ga2[0], ga2[1], ga2[2]]
}
