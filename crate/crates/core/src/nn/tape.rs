//! Tape-based reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value on the tape is a `[rows, cols]` matrix. Operations append a
//! node holding the forward value and the indices of their inputs; `backward`
//! walks the tape in reverse and accumulates adjoints. Parameters enter the
//! tape through [`Tape::param`], which memoises one node per parameter so that
//! reuse across time steps accumulates into a single gradient.
//!
//! Shape errors inside primitive operations are programmer errors and panic;
//! the layer API in `layers` validates user-facing shapes and returns
//! `IcesError::Dimension` instead.

use std::collections::HashMap;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Forward value of a tape node.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    LogSoftmax(Var),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    RowBilinear(Var, Var, usize),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = &self.nodes[v.0].value;
        (m.rows, m.cols)
    }

    /// The single entry of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!((m.rows, m.cols), (1, 1), "scalar() on non-scalar node");
        m.data[0]
    }

    /// Constant input; receives no gradient routing.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_rows(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.constant(Mat::new(rows, cols, data))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Mat::zeros(rows, cols))
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Places parameter `id` of `store` on the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.key(), id.0);
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let t: &Tensor = store.get(id);
        let value = Mat::new(t.rows(), t.cols(), t.data.clone());
        let v = self.push(value, Op::Param);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = self.shape(a);
        let (bk, bn) = self.shape(b);
        assert_eq!(ak, bk, "matmul inner dimension");
        let out = kernels::matmul(&self.value(a).data, &self.value(b).data, am, ak, bn);
        self.push(Mat::new(am, bn, out), Op::MatMul(a, b))
    }

    /// `a [m, n] + b [1, n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (1, n), "add_row bias shape");
        let bv = self.value(b).data.clone();
        let mut out = self.value(a).data.clone();
        for r in 0..m {
            for (o, x) in out[r * n..(r + 1) * n].iter_mut().zip(&bv) {
                *o += x;
            }
        }
        self.push(Mat::new(m, n, out), Op::AddRow(a, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, n), "elementwise shape");
        let out = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(Mat::new(m, n, out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a [m, n] * c [m, 1]`, scaling each row of `a` by the matching entry of `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(c), (m, 1), "mul_col column shape");
        let cv = &self.value(c).data;
        let av = &self.value(a).data;
        let out = (0..m * n).map(|k| av[k] * cv[k / n]).collect();
        self.push(Mat::new(m, n, out), Op::MulCol(a, c))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let m = self.value(a);
        let (r, c) = (m.rows, m.cols);
        let out = m.data.iter().map(|x| f(*x)).collect();
        self.push(Mat::new(r, c, out), op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (r, c) = (m.rows, m.cols);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = m.row(i);
            let lse = log_sum_exp(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.push(Mat::new(r, c, out), Op::LogSoftmax(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::new(1, 1, vec![s]), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sum: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = (0..m.rows).map(|i| m.row(i).iter().sum()).collect();
        let rows = m.rows;
        self.push(Mat::new(rows, 1, out), Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.shape(*p);
                assert_eq!(r, rows, "concat_cols row count");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        self.push(Mat::new(rows, total, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows column count");
            out.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::new(rows, cols, out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(m.rows * len);
        for i in 0..m.rows {
            out.extend_from_slice(&m.row(i)[start..start + len]);
        }
        let rows = m.rows;
        self.push(Mat::new(rows, len, out), Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows, "slice_rows out of range");
        let c = m.cols;
        let out = m.data[start * c..(start + len) * c].to_vec();
        self.push(Mat::new(len, c, out), Op::SliceRows(a, start))
    }

    /// Picks column `idx[r]` from each row `r`: `[m, n] -> [m, 1]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(idx.len(), m.rows, "gather_cols index count");
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < m.cols, "gather_cols index out of range");
                m.at(r, c)
            })
            .collect();
        let rows = m.rows;
        self.push(Mat::new(rows, 1, out), Op::GatherCols(a, idx.to_vec()))
    }

    /// Row lookup (embedding): output row `k` is row `idx[k]` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let m = self.value(table);
        let c = m.cols;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            assert!(r < m.rows, "gather_rows index out of range");
            out.extend_from_slice(m.row(r));
        }
        self.push(Mat::new(idx.len(), c, out), Op::GatherRows(table, idx.to_vec()))
    }

    /// Per-row vector-matrix product: `q [B, n]`, `w [B, n*e]` viewed as
    /// `B` matrices of shape `[n, e]`; output `[B, e]`.
    pub fn row_bilinear(&mut self, q: Var, w: Var, e: usize) -> Var {
        let (b, n) = self.shape(q);
        assert_eq!(self.shape(w), (b, n * e), "row_bilinear weight shape");
        let qv = &self.value(q).data;
        let wv = &self.value(w).data;
        let mut out = vec![0.0; b * e];
        for r in 0..b {
            for i in 0..n {
                let qi = qv[r * n + i];
                let wrow = &wv[r * n * e + i * e..r * n * e + (i + 1) * e];
                for (o, x) in out[r * e..(r + 1) * e].iter_mut().zip(wrow) {
                    *o += qi * x;
                }
            }
        }
        self.push(Mat::new(b, e, out), Op::RowBilinear(q, w, e))
    }

    /// Same row-major data viewed as `[rows, cols]`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows * m.cols, rows * cols, "reshape must keep the element count");
        let out = m.data.clone();
        self.push(Mat::new(rows, cols, out), Op::Reshape(a))
    }

    /// Reverse sweep from the scalar `loss`. Adjoints are kept on the tape
    /// until the next call.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let n = loss.0 + 1;
        self.adjoints = vec![None; self.nodes.len()];
        self.adjoints[loss.0] = Some(vec![1.0]);
        for k in (0..n).rev() {
            let Some(g) = self.adjoints[k].take() else { continue };
            let op = self.nodes[k].op.clone();
            self.backprop_node(k, &op, &g);
            self.adjoints[k] = Some(g);
        }
    }

    fn acc(&mut self, v: Var, delta: Vec<f64>) {
        match &mut self.adjoints[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, k: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (am, ak) = self.shape(*a);
                let bn = self.shape(*b).1;
                let (da, db) = kernels::matmul_backward(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, g, am, ak, bn);
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::AddRow(a, b) => {
                let n = self.shape(*b).1;
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                self.acc(*a, g.to_vec());
                self.acc(*b, db);
            }
            Op::Add(a, b) => {
                self.acc(*a, g.to_vec());
                self.acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.to_vec());
                self.acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let da = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(av).map(|(x, y)| x * y).collect();
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::MulCol(a, c) => {
                let (m, n) = self.shape(*a);
                let av = &self.nodes[a.0].value.data;
                let cv = &self.nodes[c.0].value.data;
                let da = (0..m * n).map(|q| g[q] * cv[q / n]).collect();
                let dc = (0..m)
                    .map(|r| (0..n).map(|j| g[r * n + j] * av[r * n + j]).sum())
                    .collect();
                self.acc(*a, da);
                self.acc(*c, dc);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, g.iter().map(|x| x * s).collect());
            }
            Op::AddScalar(a) => self.acc(*a, g.to_vec()),
            Op::Tanh(a) => {
                let y = &self.nodes[k].value.data;
                let d = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[k].value.data;
                let d = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc(*a, d);
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value.data;
                let d = g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.acc(*a, d);
            }
            Op::Elu(a) => {
                let x = &self.nodes[a.0].value.data;
                let y = &self.nodes[k].value.data;
                let d = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (x, y))| if *x > 0.0 { *g } else { g * (y + 1.0) })
                    .collect();
                self.acc(*a, d);
            }
            Op::Exp(a) => {
                let y = &self.nodes[k].value.data;
                let d = g.iter().zip(y).map(|(g, y)| g * y).collect();
                self.acc(*a, d);
            }
            Op::Abs(a) => {
                let x = &self.nodes[a.0].value.data;
                let d = g.iter().zip(x).map(|(g, x)| g * sign(*x)).collect();
                self.acc(*a, d);
            }
            Op::Square(a) => {
                let x = &self.nodes[a.0].value.data;
                let d = g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                self.acc(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value.data;
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect();
                self.acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[k].value;
                let (r, c) = (y.rows, y.cols);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        d[i * c + j] = g[i * c + j] - y.data[i * c + j].exp() * gs;
                    }
                }
                self.acc(*a, d);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.data.len();
                self.acc(*a, vec![g[0]; n]);
            }
            Op::SumCols(a) => {
                let (m, n) = self.shape(*a);
                let d = (0..m * n).map(|q| g[q / n]).collect();
                self.acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[k].value.cols;
                let rows = self.nodes[k].value.rows;
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    let mut d = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    self.acc(*p, d);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.data.len();
                    self.acc(*p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.shape(*a);
                let w = self.nodes[k].value.cols;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.shape(*a);
                let mut d = vec![0.0; m * n];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                self.acc(*a, d);
            }
            Op::GatherCols(a, idx) => {
                let (m, n) = self.shape(*a);
                let mut d = vec![0.0; m * n];
                for (r, &c) in idx.iter().enumerate() {
                    d[r * n + c] = g[r];
                }
                self.acc(*a, d);
            }
            Op::GatherRows(table, idx) => {
                let (m, n) = self.shape(*table);
                let mut d = vec![0.0; m * n];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[r * n + j] += g[k * n + j];
                    }
                }
                self.acc(*table, d);
            }
            Op::RowBilinear(q, w, e) => {
                let e = *e;
                let (b, n) = self.shape(*q);
                let qv = &self.nodes[q.0].value.data;
                let wv = &self.nodes[w.0].value.data;
                let mut dq = vec![0.0; b * n];
                let mut dw = vec![0.0; b * n * e];
                for r in 0..b {
                    let grow = &g[r * e..(r + 1) * e];
                    for i in 0..n {
                        let base = r * n * e + i * e;
                        dq[r * n + i] = grow.iter().zip(&wv[base..base + e]).map(|(x, y)| x * y).sum();
                        let qi = qv[r * n + i];
                        for (d, gg) in dw[base..base + e].iter_mut().zip(grow) {
                            *d = qi * gg;
                        }
                    }
                }
                self.acc(*q, dq);
                self.acc(*w, dw);
            }
            Op::Reshape(a) => self.acc(*a, g.to_vec()),
        }
    }

    /// Adjoint of `v` after `backward`, if the loss depends on it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter of `store` that appears on this
    /// tape into the store's `grad` buffers.
    pub fn accumulate_grads(&self, store: &mut ParamStore) {
        let key = store.key();
        for (&(k, id), v) in &self.params {
            if k != key {
                continue;
            }
            let Some(g) = self.grad(*v) else { continue };
            let t = store.get_mut(ParamId(id));
            match &mut t.grad {
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
                None => t.grad = Some(g.to_vec()),
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(build: impl Fn(&mut Tape, Var) -> Var, rows: usize, cols: usize, x: &[f64]) {
        let f = |vals: &[f64]| {
            let mut t = Tape::new();
            let v = t.constant_rows(rows, cols, vals.to_vec());
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.constant_rows(rows, cols, x.to_vec());
        let out = build(&mut t, v);
        t.backward(out);
        let analytic = t.grad(v).unwrap().to_vec();
        let numeric = numeric_grad(f, x);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    const X: [f64; 6] = [0.3, -0.7, 0.9, -0.2, 0.55, -0.45];

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(|t, v| { let y = t.tanh(v); t.sum_all(y) }, 2, 3, &X);
        check(|t, v| { let y = t.sigmoid(v); t.sum_all(y) }, 2, 3, &X);
        check(|t, v| { let y = t.elu(v); let y = t.square(y); t.sum_all(y) }, 2, 3, &X);
        check(|t, v| { let y = t.exp(v); t.mean_all(y) }, 2, 3, &X);
        check(|t, v| { let y = t.abs(v); let y = t.mul(y, v); t.sum_all(y) }, 2, 3, &X);
        check(|t, v| { let y = t.relu(v); let y = t.add_scalar(y, 2.0); let y = t.square(y); t.sum_all(y) }, 2, 3, &X);
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check(
            |t, v| {
                let l = t.log_softmax(v);
                let g = t.gather_cols(l, &[2, 0]);
                t.sum_all(g)
            },
            2,
            3,
            &X,
        );
        check(
            |t, v| {
                let a = t.slice_cols(v, 1, 2);
                let b = t.slice_rows(v, 1, 1);
                let c = t.concat_cols(&[a, v]);
                let c = t.square(c);
                let s = t.sum_cols(c);
                let bb = t.square(b);
                let r = t.concat_rows(&[s, s]);
                let r = t.tanh(r);
                let s1 = t.sum_all(r);
                let s2 = t.sum_all(bb);
                t.add(s1, s2)
            },
            2,
            3,
            &X,
        );
        check(
            |t, v| {
                let w = t_const(t);
                let m = t.matmul(v, w);
                let m = t.tanh(m);
                t.sum_all(m)
            },
            2,
            3,
            &X,
        );
        check(
            |t, v| {
                let q = t.slice_cols(v, 0, 2);
                let w = t.constant_rows(2, 4, vec![0.1, -0.3, 0.8, 0.2, -0.5, 0.4, 0.6, -0.9]);
                let y = t.row_bilinear(q, w, 2);
                let y = t.elu(y);
                let c = t.slice_cols(v, 2, 1);
                let y = t.mul_col(y, c);
                t.sum_all(y)
            },
            2,
            3,
            &X,
        );
        check(
            |t, v| {
                let r = t.reshape(v, 3, 2);
                let w = t.constant_rows(3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.5, 0.25]);
                let y = t.mul(r, w);
                let y = t.tanh(y);
                t.sum_all(y)
            },
            2,
            3,
            &X,
        );
        check(
            |t, v| {
                let g = t.gather_rows(v, &[1, 0, 1]);
                let g = t.square(g);
                t.sum_all(g)
            },
            2,
            3,
            &X,
        );
    }

    fn t_const(t: &mut Tape) -> Var {
        t.constant_rows(3, 2, vec![0.2, -0.1, 0.4, 0.3, -0.6, 0.5])
    }

    #[test]
    fn bilinear_weight_gradient() {
        let wv = vec![0.1, -0.3, 0.8, 0.2, -0.5, 0.4, 0.6, -0.9];
        check(
            |t, w| {
                let q = t.constant_rows(2, 2, vec![0.5, -1.0, 0.25, 2.0]);
                let y = t.row_bilinear(q, w, 2);
                let y = t.square(y);
                t.sum_all(y)
            },
            2,
            4,
            &wv,
        );
    }

    #[test]
    fn param_nodes_are_memoised_and_accumulate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[1.0, 2.0]));
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
        let y = t.mul(a, b);
        let s = t.sum_all(y);
        t.backward(s);
        t.accumulate_grads(&mut store);
        assert_eq!(store.get(id).grad.as_deref(), Some(&[2.0, 4.0][..]));
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut t = Tape::new();
        let v = t.constant_rows(1, 3, vec![-20.0, 0.0, 20.0]);
        let c = t.clamp(v, -10.0, 10.0);
        assert_eq!(t.value(c).data, vec![-10.0, 0.0, 10.0]);
        let s = t.sum_all(c);
        t.backward(s);
        assert_eq!(t.grad(v).unwrap(), &[0.0, 1.0, 0.0]);
    }
}
