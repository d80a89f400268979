//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints. Leaves created with [`Tape::constant`] do not request gradients,
//! and nothing downstream of only-constant inputs is differentiated.

use std::sync::Arc;

use crate::tensor::{matmul_nt_acc, matmul_tn_acc, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    RepeatRows(usize),
    Transpose(usize),
    RowContract(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Pick(usize, usize, usize),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Matrix>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A differentiable leaf sharing storage with a parameter store.
    pub fn parameter(&mut self, value: Arc<Matrix>) -> Var {
        self.push_shared(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Matrix>) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a.0, b.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), bv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a.0, b.0), rg)
    }

    /// `s * a + c` elementwise.
    pub fn affine(&mut self, a: Var, s: f64, c: f64) -> Var {
        let out = self.value(a).map(|x| s * x + c);
        let rg = self.rg(a);
        self.push(out, Op::Affine(a.0, s), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a.0), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a.0, start), rg)
    }

    /// Broadcasts a `1 x n` row to `rows x n`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "repeat_rows expects a row vector");
        let mut out = Matrix::zeros(rows, av.cols());
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(av.row(0));
        }
        let rg = self.rg(a);
        self.push(out, Op::RepeatRows(a.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a.0), rg)
    }

    /// Per-row contraction: for `a` of shape `n x p` and `z` of shape
    /// `n x (p*d)`, returns the `n x d` matrix `out[i, r] = sum_j a[i, j] * z[i, j*d + r]`.
    pub fn row_contract(&mut self, a: Var, z: Var) -> Var {
        let (av, zv) = (self.value(a), self.value(z));
        assert_eq!(av.rows(), zv.rows(), "row_contract row mismatch");
        let p = av.cols();
        assert!(p > 0 && zv.cols() % p == 0, "row_contract width mismatch");
        let d = zv.cols() / p;
        let mut out = Matrix::zeros(av.rows(), d);
        for i in 0..av.rows() {
            let zr = zv.row(i);
            let ar = av.row(i);
            let orow = out.row_mut(i);
            for (j, &aij) in ar.iter().enumerate() {
                if aij == 0.0 {
                    continue;
                }
                for (o, &zz) in orow.iter_mut().zip(&zr[j * d..(j + 1) * d]) {
                    *o += aij * zz;
                }
            }
        }
        let rg = self.rg(a) || self.rg(z);
        self.push(out, Op::RowContract(a.0, z.0), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a.0), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a.0), rg)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a.0), rg)
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let x = self.value(a)[(r, c)];
        let rg = self.rg(a);
        self.push(Matrix::filled(1, 1, x), Op::Pick(a.0, r, c), rg)
    }

    /// Elementwise clamp; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a.0, lo, hi), rg)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), f64::min);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Minimum(a.0, b.0), rg)
    }

    /// Reverse pass from a `1 x 1` output. Only nodes that require gradients
    /// receive adjoints.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], idx: usize, f: impl FnOnce(&mut Matrix)) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let slot = &mut grads[idx];
        if slot.is_none() {
            let (r, c) = self.nodes[idx].value.shape();
            *slot = Some(Matrix::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, |ga| matmul_nt_acc(g, bv, ga));
                self.accumulate(grads, *b, |gb| matmul_tn_acc(av, g, gb));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| gb.add_assign(g));
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(g));
                self.accumulate(grads, *b, |gb| {
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, |ga| ga.add_assign(&g.zip_map(bv, |x, y| x * y)));
                self.accumulate(grads, *b, |gb| gb.add_assign(&g.zip_map(av, |x, y| x * y)));
            }
            Op::Affine(a, s) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(&g.scale(*s)));
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(&g.zip_map(y, |gx, yx| gx * (1.0 - yx * yx))));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(&g.zip_map(y, |gx, yx| gx * yx * (1.0 - yx))));
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(&g.zip_map(y, |gx, yx| gx * yx)));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    self.accumulate(grads, p, |gp| {
                        for r in 0..g.rows() {
                            for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += x;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let w = g.cols();
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for (o, x) in ga.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::RepeatRows(a) => {
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for (o, x) in ga.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, |ga| ga.add_assign(&g.transpose()));
            }
            Op::RowContract(a, z) => {
                let (av, zv) = (&self.nodes[*a].value, &self.nodes[*z].value);
                let p = av.cols();
                let d = g.cols();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..av.rows() {
                        let gr = g.row(i);
                        let zr = zv.row(i);
                        for j in 0..p {
                            let s: f64 = gr.iter().zip(&zr[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum();
                            ga[(i, j)] += s;
                        }
                    }
                });
                self.accumulate(grads, *z, |gz| {
                    for i in 0..av.rows() {
                        let gr = g.row(i);
                        let ar = av.row(i);
                        let gzr = gz.row_mut(i);
                        for (j, &aij) in ar.iter().enumerate() {
                            if aij == 0.0 {
                                continue;
                            }
                            for (o, x) in gzr[j * d..(j + 1) * d].iter_mut().zip(gr) {
                                *o += aij * x;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let inner: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, gx), yx) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += yx * (gx - inner);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((o, gx), yx) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += gx - yx.exp() * total;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, |ga| {
                    for o in ga.data_mut() {
                        *o += s;
                    }
                });
            }
            Op::Pick(a, r, c) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, |ga| ga[(*r, *c)] += s);
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, |ga| {
                    let passed = g.zip_map(av, |gx, x| if x > *lo && x < *hi { gx } else { 0.0 });
                    ga.add_assign(&passed);
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, |ga| {
                    for ((o, gx), (x, y)) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data().iter().zip(bv.data())) {
                        if x <= y {
                            *o += gx;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, gx), (x, y)) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data().iter().zip(bv.data())) {
                        if y < x {
                            *o += gx;
                        }
                    }
                });
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

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix) -> Matrix {
        let eps = 1e-6;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Matrix) {
        let mut tape = Tape::new();
        let v = tape.variable(x.clone());
        let out = build(&mut tape, v);
        let grads = tape.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let numeric = numeric_grad(
            |m| {
                let mut t = Tape::new();
                let v = t.variable(m.clone());
                let o = build(&mut t, v);
                t.scalar(o)
            },
            &x,
        );
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "gradient mismatch {err}: {analytic:?} vs {numeric:?}");
    }

    fn sample() -> Matrix {
        Matrix::from_vec(2, 3, vec![0.3, -1.2, 0.7, 0.05, 0.9, -0.4])
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let w = Matrix::from_vec(3, 2, vec![0.5, -0.1, 0.2, 0.8, -0.6, 0.3]);
        check(
            move |t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul(x, wv);
                let yt = t.transpose(y);
                let z = t.matmul(y, yt);
                t.sum(z)
            },
            sample(),
        );
    }

    #[test]
    fn nonlinearity_gradients() {
        check(
            |t, x| {
                let a = t.tanh(x);
                let b = t.sigmoid(x);
                let c = t.exp(a);
                let d = t.mul(b, c);
                let e = t.affine(d, 1.7, 0.3);
                t.sum(e)
            },
            sample(),
        );
    }

    #[test]
    fn structural_op_gradients() {
        check(
            |t, x| {
                let s = t.slice_cols(x, 1, 2);
                let c = t.concat_cols(&[x, s]);
                let row = t.slice_cols(c, 0, 5);
                let first = t.pick(row, 0, 4);
                let r = t.repeat_rows(first, 3);
                let sq = t.mul(c, c);
                let a = t.sum(sq);
                let b = t.sum(r);
                let out = t.add(a, b);
                t.tanh(out)
            },
            sample(),
        );
    }

    #[test]
    fn softmax_family_gradients() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        check(
            move |t, x| {
                let wv = t.constant(w.clone());
                let s = t.softmax_rows(x);
                let l = t.log_softmax_rows(x);
                let a = t.mul(s, wv);
                let b = t.mul(l, wv);
                let c = t.add(a, b);
                t.sum(c)
            },
            sample(),
        );
    }

    #[test]
    fn row_contract_gradient() {
        let z = Matrix::from_vec(2, 6, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, -0.8, 0.9, 1.0, -1.1, 1.2]);
        check(
            move |t, x| {
                let a = t.slice_cols(x, 0, 2);
                let zv = t.constant(z.clone());
                let zz = t.tanh(zv);
                let y = t.row_contract(a, zz);
                let y2 = t.mul(y, y);
                t.sum(y2)
            },
            sample(),
        );
        // gradient into the contracted tensor as well
        let a = Matrix::from_vec(2, 2, vec![0.4, -0.7, 1.1, 0.2]);
        check(
            move |t, z| {
                let av = t.constant(a.clone());
                let y = t.row_contract(av, z);
                let y2 = t.mul(y, y);
                t.sum(y2)
            },
            Matrix::from_vec(2, 4, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, -0.8]),
        );
    }

    #[test]
    fn add_row_gradient() {
        check(
            |t, x| {
                let b = t.slice_cols(x, 0, 3);
                let first = t.pick(b, 0, 0);
                let row = t.repeat_rows(first, 1);
                let rr = t.concat_cols(&[row, row, row]);
                let y = t.add_row(x, rr);
                let y2 = t.mul(y, y);
                t.sum(y2)
            },
            sample(),
        );
    }

    #[test]
    fn clamp_and_minimum_route_gradients() {
        let mut tape = Tape::new();
        let x = tape.variable(Matrix::row_vector(&[0.5, 2.0]));
        let c = tape.clamp(x, 0.0, 1.0);
        let s = tape.sum(c);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);

        let mut tape = Tape::new();
        let a = tape.variable(Matrix::row_vector(&[1.0, 3.0]));
        let b = tape.variable(Matrix::row_vector(&[2.0, 2.0]));
        let m = tape.minimum(a, b);
        let s = tape.sum(m);
        let g = tape.backward(s);
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::row_vector(&[1.0, 2.0]));
        let x = tape.variable(Matrix::row_vector(&[3.0, 4.0]));
        let y = tape.mul(c, x);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }
}
