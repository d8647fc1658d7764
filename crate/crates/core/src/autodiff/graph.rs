//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters are bound by name from a [`ParamStore`]; binding the same name
//! twice returns the same node, so a module applied to several inputs within
//! one graph shares a single parameter leaf and accumulates its gradient.

use std::collections::BTreeMap;

use super::matrix::{gemm, Matrix};
use super::params::ParamStore;
use crate::cloud::nn::nearest_neighbors;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    GroupSoftmax(Var, usize),
    SumAll(Var),
    SumRows(Var),
    SumColBlocks(Var, usize),
    RepeatColBlocks(Var, usize),
    Gather(Var, Vec<usize>),
    GroupMax(Var, usize, Vec<usize>),
    GroupSum(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Chamfer {
        a: Var,
        b: Var,
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
    },
    DirectedDist {
        a: Var,
        b: Var,
        nn: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
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

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input that is not a named parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind the named parameter, reusing the existing leaf if already bound.
    ///
    /// # Panics
    /// If the store has no parameter of that name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Names and nodes of every parameter bound so far.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a (n×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row: row shape");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += y;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `a (n×c) ⊙ row (1×c)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row: row shape");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x *= y;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(value, Op::MulRow(a, row), ng)
    }

    /// `a (n×c) ⊙ col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col: column shape");
        let mut value = av.clone();
        for r in 0..value.rows() {
            let s = cv.data()[r];
            for x in value.row_mut(r) {
                *x *= s;
            }
        }
        let ng = self.ng(&[a, col]);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(&[a]);
        self.push(value, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.ng(&[a]);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(&[a]);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(value, Op::Square(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sqrt(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / x);
        let ng = self.ng(&[a]);
        self.push(value, Op::Recip(a), ng)
    }

    /// Hard clamp; the gradient is zero wherever the input lies outside the
    /// open interval `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Softmax down each column within consecutive blocks of `k` rows.
    pub fn group_softmax(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        assert!(k > 0 && n % k == 0, "group_softmax: {n} rows not divisible by {k}");
        let mut value = av.clone();
        let mut buf = vec![0.0; k];
        for g in 0..n / k {
            for col in 0..c {
                for j in 0..k {
                    buf[j] = value.get(g * k + j, col);
                }
                softmax_in_place(&mut buf);
                for j in 0..k {
                    value.set(g * k + j, col, buf[j]);
                }
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::GroupSoftmax(a, k), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `n×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, x) in value.data_mut().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::SumRows(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum each consecutive block of `block` columns: `n×(h·block) → n×h`.
    pub fn sum_col_blocks(&mut self, a: Var, block: usize) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        assert!(block > 0 && c % block == 0, "sum_col_blocks: {c} cols not divisible by {block}");
        let h = c / block;
        let mut value = Matrix::zeros(n, h);
        for r in 0..n {
            let row = av.row(r);
            for j in 0..h {
                value.set(r, j, row[j * block..(j + 1) * block].iter().sum());
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::SumColBlocks(a, block), ng)
    }

    /// Repeat every column `block` times in place: `n×h → n×(h·block)`.
    pub fn repeat_col_blocks(&mut self, a: Var, block: usize) -> Var {
        let av = self.value(a);
        let (n, h) = av.shape();
        let mut value = Matrix::zeros(n, h * block);
        for r in 0..n {
            for j in 0..h {
                let x = av.get(r, j);
                for b in 0..block {
                    value.set(r, j * block + b, x);
                }
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::RepeatColBlocks(a, block), ng)
    }

    /// Select rows by index (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).gather_rows(&idx);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gather(a, idx), ng)
    }

    /// `1×c → n×c`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        assert_eq!(self.value(a).rows(), 1, "broadcast_rows expects a row vector");
        self.gather(a, vec![0; n])
    }

    /// Column-wise max over consecutive blocks of `k` rows. Ties resolve to
    /// the earliest row of the block.
    pub fn group_max(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        assert!(k > 0 && n % k == 0, "group_max: {n} rows not divisible by {k}");
        let groups = n / k;
        let mut value = Matrix::zeros(groups, c);
        let mut arg = vec![0usize; groups * c];
        for g in 0..groups {
            for col in 0..c {
                let mut best = g * k;
                let mut bv = av.get(best, col);
                for r in g * k + 1..(g + 1) * k {
                    let x = av.get(r, col);
                    if x > bv {
                        bv = x;
                        best = r;
                    }
                }
                value.set(g, col, bv);
                arg[g * c + col] = best;
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::GroupMax(a, k, arg), ng)
    }

    /// Column-wise sum over consecutive blocks of `k` rows.
    pub fn group_sum(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        assert!(k > 0 && n % k == 0, "group_sum: {n} rows not divisible by {k}");
        let mut value = Matrix::zeros(n / k, c);
        for r in 0..n {
            let g = r / k;
            for (o, x) in value.row_mut(g).iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::GroupSum(a, k), ng)
    }

    pub fn group_mean(&mut self, a: Var, k: usize) -> Var {
        let s = self.group_sum(a, k);
        self.scale(s, 1.0 / k as f64)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(n, total);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), n, "concat_cols: row counts differ");
            let c = pv.cols();
            for r in 0..n {
                value.row_mut(r)[offset..offset + c].copy_from_slice(pv.row(r));
            }
            offset += c;
        }
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows: column counts differ");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let ng = self.ng(parts);
        self.push(Matrix::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshape(rows, cols);
        let ng = self.ng(&[a]);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Row sums: `n×c → n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ones = self.constant(Matrix::filled(self.value(a).cols(), 1, 1.0));
        self.matmul(a, ones)
    }

    /// Each of the `n` rows repeated `k` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let n = self.value(a).rows();
        self.gather(a, (0..n * k).map(|i| i / k).collect())
    }

    /// `x · w + b` for `x: n×in`, `w: in×out`, `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Symmetric L2 Chamfer distance between two `n×3` point arrays.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let ab = nearest_neighbors(av, bv);
        let ba = nearest_neighbors(bv, av);
        let fwd: f64 = ab.iter().map(|&(_, d)| d).sum::<f64>() / av.rows() as f64;
        let bwd: f64 = ba.iter().map(|&(_, d)| d).sum::<f64>() / bv.rows() as f64;
        let ng = self.ng(&[a, b]);
        self.push(
            Matrix::scalar(fwd + bwd),
            Op::Chamfer {
                a,
                b,
                nn_ab: ab.into_iter().map(|(i, _)| i).collect(),
                nn_ba: ba.into_iter().map(|(i, _)| i).collect(),
            },
            ng,
        )
    }

    /// Sum over points of `a` of the unsquared distance to the nearest point
    /// of `b`.
    pub fn directed_distance(&mut self, a: Var, b: Var) -> Var {
        let ab = nearest_neighbors(self.value(a), self.value(b));
        let total: f64 = ab.iter().map(|&(_, d)| d.sqrt()).sum();
        let ng = self.ng(&[a, b]);
        self.push(
            Matrix::scalar(total),
            Op::DirectedDist {
                a,
                b,
                nn: ab.into_iter().map(|(i, _)| i).collect(),
            },
            ng,
        )
    }

    /// Reverse pass from the scalar `loss`.
    ///
    /// # Panics
    /// If `loss` is not 1×1.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad(*a) {
                    let da = gemm(dy, false, self.value(*b), true);
                    self.acc(grads, *a, da);
                }
                if self.needs_grad(*b) {
                    let db = gemm(self.value(*a), true, dy, false);
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc_ref(grads, *a, dy);
                self.acc_ref(grads, *b, dy);
            }
            Op::Sub(a, b) => {
                self.acc_ref(grads, *a, dy);
                if self.needs_grad(*b) {
                    self.acc(grads, *b, dy.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.acc(grads, *a, dy.zip_map(self.value(*b), |g, x| g * x));
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, dy.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::AddRow(a, row) => {
                self.acc_ref(grads, *a, dy);
                if self.needs_grad(*row) {
                    self.acc(grads, *row, col_sums(dy));
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.needs_grad(*a) {
                    let mut da = dy.clone();
                    for r in 0..da.rows() {
                        for (x, s) in da.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.needs_grad(*row) {
                    let prod = dy.zip_map(self.value(*a), |g, x| g * x);
                    self.acc(grads, *row, col_sums(&prod));
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col);
                if self.needs_grad(*a) {
                    let mut da = dy.clone();
                    for r in 0..da.rows() {
                        let s = cv.data()[r];
                        for x in da.row_mut(r) {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.needs_grad(*col) {
                    let av = self.value(*a);
                    let mut dc = Matrix::zeros(av.rows(), 1);
                    for r in 0..av.rows() {
                        let s: f64 = dy.row(r).iter().zip(av.row(r)).map(|(g, x)| g * x).sum();
                        dc.data_mut()[r] = s;
                    }
                    self.acc(grads, *col, dc);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, dy.map(|g| g * s));
            }
            Op::AddScalar(a) => self.acc_ref(grads, *a, dy),
            Op::Silu(a) => {
                let d = dy.zip_map(self.value(*a), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                });
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => self.acc(grads, *a, dy.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Sigmoid(a) => self.acc(grads, *a, dy.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Softplus(a) => {
                self.acc(grads, *a, dy.zip_map(self.value(*a), |g, x| g * sigmoid(x)))
            }
            Op::Exp(a) => self.acc(grads, *a, dy.zip_map(y, |g, e| g * e)),
            Op::Square(a) => {
                self.acc(grads, *a, dy.zip_map(self.value(*a), |g, x| 2.0 * g * x))
            }
            Op::Sqrt(a) => self.acc(grads, *a, dy.zip_map(y, |g, s| 0.5 * g / s)),
            Op::Recip(a) => self.acc(grads, *a, dy.zip_map(y, |g, r| -g * r * r)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = dy.zip_map(self.value(*a), |g, x| if x > lo && x < hi { g } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for ((o, p), g) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (g - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::GroupSoftmax(a, k) => {
                let k = *k;
                let (n, c) = y.shape();
                let mut d = Matrix::zeros(n, c);
                for g in 0..n / k {
                    for col in 0..c {
                        let mut dot = 0.0;
                        for j in 0..k {
                            dot += y.get(g * k + j, col) * dy.get(g * k + j, col);
                        }
                        for j in 0..k {
                            let r = g * k + j;
                            d.set(r, col, y.get(r, col) * (dy.get(r, col) - dot));
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Matrix::filled(r, c, dy.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).copy_from_slice(dy.data());
                }
                self.acc(grads, *a, d);
            }
            Op::SumColBlocks(a, block) => {
                let block = *block;
                let (n, c) = self.shape(*a);
                let mut d = Matrix::zeros(n, c);
                for r in 0..n {
                    for j in 0..c {
                        d.set(r, j, dy.get(r, j / block));
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::RepeatColBlocks(a, block) => {
                let block = *block;
                let (n, h) = self.shape(*a);
                let mut d = Matrix::zeros(n, h);
                for r in 0..n {
                    for j in 0..h {
                        let s: f64 = dy.row(r)[j * block..(j + 1) * block].iter().sum();
                        d.set(r, j, s);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Gather(a, idx) => {
                if self.needs_grad(*a) {
                    let (r, c) = self.shape(*a);
                    let mut d = Matrix::zeros(r, c);
                    for (out_row, &src) in idx.iter().enumerate() {
                        for (o, g) in d.row_mut(src).iter_mut().zip(dy.row(out_row)) {
                            *o += g;
                        }
                    }
                    self.acc(grads, *a, d);
                }
            }
            Op::GroupMax(a, _k, arg) => {
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for g in 0..y.rows() {
                    for col in 0..c {
                        let src = arg[g * c + col];
                        d.set(src, col, d.get(src, col) + dy.get(g, col));
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::GroupSum(a, k) => {
                let k = *k;
                let (r, c) = self.shape(*a);
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).copy_from_slice(dy.row(i / k));
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (n, c) = self.shape(p);
                    if self.needs_grad(p) {
                        let mut d = Matrix::zeros(n, c);
                        for r in 0..n {
                            d.row_mut(r).copy_from_slice(&dy.row(r)[offset..offset + c]);
                        }
                        self.acc(grads, p, d);
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, c) = self.shape(*a);
                let len = y.cols();
                let mut d = Matrix::zeros(n, c);
                for r in 0..n {
                    d.row_mut(r)[*start..*start + len].copy_from_slice(dy.row(r));
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (n, c) = self.shape(p);
                    if self.needs_grad(p) {
                        let d = Matrix::from_vec(
                            n,
                            c,
                            dy.data()[offset * c..(offset + n) * c].to_vec(),
                        );
                        self.acc(grads, p, d);
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, dy.clone().reshape(r, c));
            }
            Op::Transpose(a) => self.acc(grads, *a, dy.transpose()),
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let g = dy.item();
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m) = (av.rows() as f64, bv.rows() as f64);
                let mut da = Matrix::zeros(av.rows(), 3);
                let mut db = Matrix::zeros(bv.rows(), 3);
                for (i, &j) in nn_ab.iter().enumerate() {
                    for k in 0..3 {
                        let diff = 2.0 * g / n * (av.get(i, k) - bv.get(j, k));
                        da.set(i, k, da.get(i, k) + diff);
                        db.set(j, k, db.get(j, k) - diff);
                    }
                }
                for (j, &i) in nn_ba.iter().enumerate() {
                    for k in 0..3 {
                        let diff = 2.0 * g / m * (bv.get(j, k) - av.get(i, k));
                        db.set(j, k, db.get(j, k) + diff);
                        da.set(i, k, da.get(i, k) - diff);
                    }
                }
                if self.needs_grad(*a) {
                    self.acc(grads, *a, da);
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, db);
                }
            }
            Op::DirectedDist { a, b, nn } => {
                let g = dy.item();
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(av.rows(), 3);
                let mut db = Matrix::zeros(bv.rows(), 3);
                for (i, &j) in nn.iter().enumerate() {
                    let diff = [
                        av.get(i, 0) - bv.get(j, 0),
                        av.get(i, 1) - bv.get(j, 1),
                        av.get(i, 2) - bv.get(j, 2),
                    ];
                    let norm = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
                    // Subgradient zero at coincident points.
                    if norm <= 1e-12 {
                        continue;
                    }
                    for k in 0..3 {
                        let u = g * diff[k] / norm;
                        da.set(i, k, da.get(i, k) + u);
                        db.set(j, k, db.get(j, k) - u);
                    }
                }
                if self.needs_grad(*a) {
                    self.acc(grads, *a, da);
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, db);
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&d),
            slot @ None => *slot = Some(d),
        }
    }

    fn acc_ref(&self, grads: &mut [Option<Matrix>], v: Var, d: &Matrix) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(d),
            slot @ None => *slot = Some(d.clone()),
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter, zero-filled where nothing flowed.
    pub fn param_grads(&self, store: &ParamStore) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = match self.wrt(v) {
                    Some(g) => g.clone(),
                    None => {
                        let p = store.get(name).expect("bound parameter exists in store");
                        Matrix::zeros(p.rows(), p.cols())
                    }
                };
                (name.clone(), g)
            })
            .collect()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, x) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}
