//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] rather than letting a bad value propagate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};
use crate::math::{exp, ln, sigmoid, softplus, sqrt};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    MatMulTN(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, Unary),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Gather(usize, Vec<usize>),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SoftmaxCol(usize),
    MaxRows(usize, Vec<usize>),
    Custom {
        input: usize,
        jac: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    /// elu(x) + 1
    Elu1,
    Softplus,
    Sigmoid,
    Abs,
    Square,
    Sqrt,
    Exp,
    Ln,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Elu1 => "elu1",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
        }
    }

    #[inline]
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Elu1 => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    exp(x)
                }
            }
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => sqrt(x),
            Unary::Exp => exp(x),
            Unary::Ln => ln(x),
        }
    }

    /// dy/dx given input x and output y.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Elu1 => {
                if x > 0.0 {
                    1.0
                } else {
                    y
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of the loss with respect to parameters, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_param: BTreeMap<ParamId, Tensor>,
    /// False when no parameter was reachable from the loss.
    pub connected: bool,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Accumulate another set of gradients (e.g. over a batch).
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(t) => {
                    for (a, b) in t.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                None => {
                    self.by_param.insert(*id, g.clone());
                }
            }
        }
        self.connected |= other.connected;
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.values_mut() {
            for x in &mut g.data {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        sqrt(
            self.by_param
                .values()
                .flat_map(|t| t.data.iter())
                .map(|x| x * x)
                .sum::<f64>(),
        )
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::ShapeMismatch(format!("{op}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            op => inputs(op).iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "input")
    }

    /// Parameter leaf. Requesting the same id twice yields the same node, so
    /// shared weights accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.cols != tb.rows {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm_nn(&ta.data, &tb.data, &mut out.data, ta.rows, ta.cols, tb.cols);
        self.push(out, Op::MatMul(a.0, b.0), "matmul")
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.cols != tb.cols {
            return Err(shape_err("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        gemm_nt(&ta.data, &tb.data, &mut out.data, ta.rows, ta.cols, tb.rows);
        self.push(out, Op::MatMulNT(a.0, b.0), "matmul_nt")
    }

    /// aᵀ · b
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rows != tb.rows {
            return Err(shape_err("matmul_tn", ta.shape(), tb.shape()));
        }
        let mut out = Tensor::zeros(ta.cols, tb.cols);
        gemm_tn(&ta.data, &tb.data, &mut out.data, ta.rows, ta.cols, tb.cols);
        self.push(out, Op::MatMulTN(a.0, b.0), "matmul_tn")
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a.0, b.0), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x / y, Op::Div(a.0, b.0), "div")
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        let (ta, tr) = (self.val(a), self.val(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(shape_err(name, ta.shape(), tr.shape()));
        }
        let mut out = ta.clone();
        for r in 0..ta.rows {
            for (o, &b) in out.data[r * ta.cols..(r + 1) * ta.cols].iter_mut().zip(&tr.data) {
                *o = f(*o, b);
            }
        }
        self.push(out, op, name)
    }

    /// a + row, with `row` (1×m) broadcast over the rows of a.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, |x, y| x + y, Op::AddRow(a.0, row.0), "add_row")
    }

    /// a ⊙ row, with `row` (1×m) broadcast over the rows of a.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, |x, y| x * y, Op::MulRow(a.0, row.0), "mul_row")
    }

    fn col_broadcast(
        &mut self,
        a: Var,
        col: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        let (ta, tc) = (self.val(a), self.val(col));
        if tc.cols != 1 || tc.rows != ta.rows {
            return Err(shape_err(name, ta.shape(), tc.shape()));
        }
        let mut out = ta.clone();
        for r in 0..ta.rows {
            let c = tc.data[r];
            for o in &mut out.data[r * ta.cols..(r + 1) * ta.cols] {
                *o = f(*o, c);
            }
        }
        self.push(out, op, name)
    }

    /// Each row of a scaled by the matching entry of the n×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast(a, col, |x, c| x * c, Op::MulCol(a.0, col.0), "mul_col")
    }

    /// Each row of a divided by the matching entry of the n×1 column.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.col_broadcast(a, col, |x, c| x / c, Op::DivCol(a.0, col.0), "div_col")
    }

    /// a scaled by the 1×1 tensor s.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.val(s);
        if ts.shape() != (1, 1) {
            return Err(shape_err("mul_scalar", self.val(a).shape(), ts.shape()));
        }
        let k = ts.data[0];
        let mut out = self.val(a).clone();
        out.data.iter_mut().for_each(|x| *x *= k);
        self.push(out, Op::MulScalar(a.0, s.0), "mul_scalar")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let mut out = self.val(a).clone();
        out.data.iter_mut().for_each(|x| *x *= k);
        self.push(out, Op::Scale(a.0, k), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let mut out = self.val(a).clone();
        out.data.iter_mut().for_each(|x| *x += k);
        self.push(out, Op::AddScalar(a.0), "add_scalar")
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Result<Var> {
        let ta = self.val(a);
        let data = ta.data.iter().map(|&x| u.forward(x)).collect();
        let out = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        self.push(out, Op::Unary(a.0, u), u.name())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn elu1(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Elu1)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if t.is_empty() {
            return Err(Error::ShapeMismatch("mean of an empty tensor".into()));
        }
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0), "mean")
    }

    /// Column sums: n×m → 1×m.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, &x) in out.data.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumRows(a.0), "sum_rows")
    }

    /// Row sums: n×m → n×1.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let data = (0..t.rows).map(|r| t.row(r).iter().sum()).collect();
        let out = Tensor {
            rows: t.rows,
            cols: 1,
            data,
        };
        self.push(out, Op::SumCols(a.0), "sum_cols")
    }

    /// Mean over rows: n×m → 1×m.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.val(a).rows;
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Repeat a 1×m row n times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        let t = self.val(row);
        if t.rows != 1 {
            return Err(shape_err("broadcast_rows", t.shape(), (1, t.cols)));
        }
        let mut data = Vec::with_capacity(n * t.cols);
        for _ in 0..n {
            data.extend_from_slice(&t.data);
        }
        let out = Tensor {
            rows: n,
            cols: t.cols,
            data,
        };
        self.push(out, Op::BroadcastRows(row.0), "broadcast_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.val(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let t = self.val(p);
            if t.rows != rows {
                return Err(shape_err("concat_cols", (rows, cols), t.shape()));
            }
            cols += t.cols;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.val(p);
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(out, Op::Concat(parts.iter().map(|v| v.0).collect()), "concat_cols")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.val(a);
        if start >= end || end > t.cols {
            return Err(shape_err("slice_cols", t.shape(), (start, end)));
        }
        let w = end - start;
        let mut out = Tensor::zeros(t.rows, w);
        for r in 0..t.rows {
            out.data[r * w..(r + 1) * w].copy_from_slice(&t.row(r)[start..end]);
        }
        self.push(out, Op::Slice(a.0, start), "slice_cols")
    }

    /// Rows of `a` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows) {
            return Err(Error::ShapeMismatch(format!("gather row {bad} of {}", t.rows)));
        }
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.data[k * t.cols..(k + 1) * t.cols].copy_from_slice(t.row(i));
        }
        self.push(out, Op::Gather(a.0, idx.to_vec()), "gather_rows")
    }

    /// Row-wise layer normalisation with affine gain and bias (1×m each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let t = self.val(x);
        let (g, b) = (self.val(gamma), self.val(beta));
        if g.shape() != (1, t.cols) || b.shape() != (1, t.cols) {
            return Err(shape_err("layer_norm", t.shape(), g.shape()));
        }
        let m = t.cols as f64;
        let mut out = Tensor::zeros(t.rows, t.cols);
        let mut xhat = vec![0.0; t.len()];
        let mut inv = vec![0.0; t.rows];
        for r in 0..t.rows {
            let row = t.row(r);
            let mu = row.iter().sum::<f64>() / m;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m;
            let iv = 1.0 / sqrt(var + EPS);
            inv[r] = iv;
            for c in 0..t.cols {
                let h = (row[c] - mu) * iv;
                xhat[r * t.cols + c] = h;
                out.data[r * t.cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv,
            },
            "layer_norm",
        )
    }

    /// Weighted mean cross-entropy of row-wise softmax(logits) against
    /// integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let t = self.val(logits);
        if targets.len() != t.rows {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} rows",
                targets.len(),
                t.rows
            )));
        }
        if targets.iter().any(|&c| c >= t.cols) {
            return Err(Error::ShapeMismatch("target class out of range".into()));
        }
        let weights = match weights {
            Some(w) if w.len() == t.rows => w.to_vec(),
            Some(_) => return Err(Error::ShapeMismatch("weight count".into())),
            None => vec![1.0; t.rows],
        };
        let wsum: f64 = weights.iter().sum();
        let mut probs = vec![0.0; t.len()];
        let mut loss = 0.0;
        for r in 0..t.rows {
            let row = t.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| exp(x - mx)).sum();
            let lz = ln(z) + mx;
            for c in 0..t.cols {
                probs[r * t.cols + c] = exp(row[c] - lz);
            }
            loss += weights[r] * (lz - row[targets[r]]);
        }
        let loss = if wsum > 0.0 { loss / wsum } else { 0.0 };
        let scaled: Vec<f64> = weights
            .iter()
            .map(|w| if wsum > 0.0 { w / wsum } else { 0.0 })
            .collect();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: scaled,
                probs,
            },
            "cross_entropy",
        )
    }

    /// Softmax over all entries of an n×1 column.
    pub fn softmax_col(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if t.cols != 1 || t.rows == 0 {
            return Err(shape_err("softmax_col", t.shape(), (t.rows, 1)));
        }
        let mx = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = t.data.iter().map(|&x| exp(x - mx)).collect();
        let z: f64 = e.iter().sum();
        let out = Tensor {
            rows: t.rows,
            cols: 1,
            data: e.into_iter().map(|x| x / z).collect(),
        };
        self.push(out, Op::SoftmaxCol(a.0), "softmax_col")
    }

    /// Column-wise max over rows: n×m → 1×m. Ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if t.rows == 0 {
            return Err(Error::ShapeMismatch("max over zero rows".into()));
        }
        let mut arg = vec![0usize; t.cols];
        let mut out = Tensor::from_vec(1, t.cols, t.row(0).to_vec())?;
        for r in 1..t.rows {
            for (c, &x) in t.row(r).iter().enumerate() {
                if x > out.data[c] {
                    out.data[c] = x;
                    arg[c] = r;
                }
            }
        }
        self.push(out, Op::MaxRows(a.0, arg), "max_rows")
    }

    /// Row-wise function evaluated outside the graph. `value` is n×k and
    /// `jac` holds, for each row, the k×m Jacobian with respect to that row
    /// of the n×m input.
    pub fn custom_rowwise(&mut self, input: Var, value: Tensor, jac: Vec<f64>) -> Result<Var> {
        let t = self.val(input);
        if value.rows != t.rows || jac.len() != t.rows * value.cols * t.cols {
            return Err(shape_err("custom_rowwise", t.shape(), value.shape()));
        }
        if jac.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("custom_rowwise jacobian"));
        }
        self.push(
            value,
            Op::Custom {
                input: input.0,
                jac,
            },
            "custom_rowwise",
        )
    }

    /// Gradients of a scalar `loss` with respect to every parameter on the
    /// tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.val(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lt.rows,
                cols: lt.cols,
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut result = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut result);
        }
        result.connected = !result.by_param.is_empty();
        if let Some(bad) = result.by_param.values().find(|t| !t.is_finite()) {
            let _ = bad;
            return Err(Error::NonFinite("backward"));
        }
        Ok(result)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        result: &mut Gradients,
    ) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        // gradient buffer of input j, created on demand; None if j needs no grad
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                if nodes[j].needs_grad {
                    let n = nodes[j].value.len();
                    Some(grads[j].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let entry = result
                    .by_param
                    .entry(*id)
                    .or_insert_with(|| Tensor::zeros(out.rows, out.cols));
                for (a, b) in entry.data.iter_mut().zip(g) {
                    *a += b;
                }
            }
            &Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                if let Some(ga) = acc!(a) {
                    gemm_nt(g, &tb.data, ga, ta.rows, tb.cols, ta.cols);
                }
                if let Some(gb) = acc!(b) {
                    gemm_tn(&ta.data, g, gb, ta.rows, ta.cols, tb.cols);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                // C = A Bᵀ: dA = dC·B, dB = dCᵀ·A
                if let Some(ga) = acc!(a) {
                    gemm_nn(g, &tb.data, ga, ta.rows, tb.rows, ta.cols);
                }
                if let Some(gb) = acc!(b) {
                    gemm_tn(g, &ta.data, gb, ta.rows, tb.rows, ta.cols);
                }
            }
            &Op::MatMulTN(a, b) => {
                let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                // C = Aᵀ B: dA = B·dCᵀ, dB = A·dC
                if let Some(ga) = acc!(a) {
                    gemm_nt(&tb.data, g, ga, ta.rows, tb.cols, ta.cols);
                }
                if let Some(gb) = acc!(b) {
                    gemm_nn(&ta.data, g, gb, ta.rows, ta.cols, tb.cols);
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(b) {
                    add_into(gb, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                if let Some(ga) = acc!(a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * tb.data[k];
                    }
                }
                if let Some(gb) = acc!(b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * ta.data[k];
                    }
                }
            }
            &Op::Div(a, b) => {
                let tb = &nodes[b].value;
                if let Some(ga) = acc!(a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] / tb.data[k];
                    }
                }
                if let Some(gb) = acc!(b) {
                    for k in 0..g.len() {
                        gb[k] -= g[k] * out.data[k] / tb.data[k];
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                if let Some(gr) = acc!(row) {
                    let m = out.cols;
                    for r in 0..out.rows {
                        add_into(gr, &g[r * m..(r + 1) * m]);
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let (ta, tr) = (&nodes[a].value, &nodes[row].value);
                let m = out.cols;
                if let Some(ga) = acc!(a) {
                    for r in 0..out.rows {
                        for c in 0..m {
                            ga[r * m + c] += g[r * m + c] * tr.data[c];
                        }
                    }
                }
                if let Some(gr) = acc!(row) {
                    for r in 0..out.rows {
                        for c in 0..m {
                            gr[c] += g[r * m + c] * ta.data[r * m + c];
                        }
                    }
                }
            }
            &Op::MulCol(a, col) => {
                let (ta, tc) = (&nodes[a].value, &nodes[col].value);
                let m = out.cols;
                if let Some(ga) = acc!(a) {
                    for r in 0..out.rows {
                        for c in 0..m {
                            ga[r * m + c] += g[r * m + c] * tc.data[r];
                        }
                    }
                }
                if let Some(gc) = acc!(col) {
                    for r in 0..out.rows {
                        let mut s = 0.0;
                        for c in 0..m {
                            s += g[r * m + c] * ta.data[r * m + c];
                        }
                        gc[r] += s;
                    }
                }
            }
            &Op::DivCol(a, col) => {
                let tc = &nodes[col].value;
                let m = out.cols;
                if let Some(ga) = acc!(a) {
                    for r in 0..out.rows {
                        for c in 0..m {
                            ga[r * m + c] += g[r * m + c] / tc.data[r];
                        }
                    }
                }
                if let Some(gc) = acc!(col) {
                    for r in 0..out.rows {
                        let mut s = 0.0;
                        for c in 0..m {
                            s += g[r * m + c] * out.data[r * m + c];
                        }
                        gc[r] -= s / tc.data[r];
                    }
                }
            }
            &Op::MulScalar(a, s) => {
                let k = nodes[s].value.data[0];
                let ta = &nodes[a].value;
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * k);
                }
                if let Some(gs) = acc!(s) {
                    gs[0] += g.iter().zip(&ta.data).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            &Op::Scale(a, k) => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * k);
                }
            }
            &Op::AddScalar(a) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
            }
            &Op::Unary(a, u) => {
                let ta = &nodes[a].value;
                if let Some(ga) = acc!(a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * u.derivative(ta.data[k], out.data[k]);
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = acc!(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = acc!(a) {
                    let k = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += k);
                }
            }
            &Op::SumRows(a) => {
                if let Some(ga) = acc!(a) {
                    let m = out.cols;
                    for row in ga.chunks_mut(m) {
                        add_into(row, g);
                    }
                }
            }
            &Op::SumCols(a) => {
                let m = nodes[a].value.cols;
                if let Some(ga) = acc!(a) {
                    for (r, row) in ga.chunks_mut(m).enumerate() {
                        row.iter_mut().for_each(|x| *x += g[r]);
                    }
                }
            }
            &Op::BroadcastRows(row) => {
                if let Some(gr) = acc!(row) {
                    for chunk in g.chunks(out.cols) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.cols;
                    if let Some(gp) = acc!(p) {
                        for r in 0..out.rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * out.cols + off..r * out.cols + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            &Op::Slice(a, start) => {
                let m = nodes[a].value.cols;
                let w = out.cols;
                if let Some(ga) = acc!(a) {
                    for r in 0..out.rows {
                        add_into(&mut ga[r * m + start..r * m + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Gather(a, idx) => {
                let m = out.cols;
                if let Some(ga) = acc!(*a) {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * m..(i + 1) * m], &g[k * m..(k + 1) * m]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            } => {
                let m = out.cols;
                let gam = &nodes[*gamma].value.data;
                if let Some(gg) = acc!(*gamma) {
                    for r in 0..out.rows {
                        for c in 0..m {
                            gg[c] += g[r * m + c] * xhat[r * m + c];
                        }
                    }
                }
                if let Some(gb) = acc!(*beta) {
                    for r in 0..out.rows {
                        add_into(gb, &g[r * m..(r + 1) * m]);
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mf = m as f64;
                    for r in 0..out.rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..m {
                            let d = g[r * m + c] * gam[c];
                            s1 += d;
                            s2 += d * xhat[r * m + c];
                        }
                        for c in 0..m {
                            let d = g[r * m + c] * gam[c];
                            gx[r * m + c] += inv[r] / mf * (mf * d - s1 - xhat[r * m + c] * s2);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let m = nodes[*logits].value.cols;
                if let Some(gl) = acc!(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let w = weights[r] * g[0];
                        for c in 0..m {
                            let ind = if c == t { 1.0 } else { 0.0 };
                            gl[r * m + c] += w * (probs[r * m + c] - ind);
                        }
                    }
                }
            }
            &Op::SoftmaxCol(a) => {
                if let Some(ga) = acc!(a) {
                    let dot: f64 = g.iter().zip(&out.data).map(|(x, y)| x * y).sum();
                    for k in 0..g.len() {
                        ga[k] += out.data[k] * (g[k] - dot);
                    }
                }
            }
            Op::MaxRows(a, arg) => {
                let m = out.cols;
                if let Some(ga) = acc!(*a) {
                    for (c, &r) in arg.iter().enumerate() {
                        ga[r * m + c] += g[c];
                    }
                }
            }
            Op::Custom { input, jac } => {
                let m = nodes[*input].value.cols;
                let k = out.cols;
                if let Some(gi) = acc!(*input) {
                    for r in 0..out.rows {
                        for o in 0..k {
                            let go = g[r * k + o];
                            if go == 0.0 {
                                continue;
                            }
                            let base = (r * k + o) * m;
                            for c in 0..m {
                                gi[r * m + c] += go * jac[base + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        &Op::MatMul(a, b)
        | &Op::MatMulNT(a, b)
        | &Op::MatMulTN(a, b)
        | &Op::Add(a, b)
        | &Op::Sub(a, b)
        | &Op::Mul(a, b)
        | &Op::Div(a, b)
        | &Op::AddRow(a, b)
        | &Op::MulRow(a, b)
        | &Op::MulCol(a, b)
        | &Op::DivCol(a, b)
        | &Op::MulScalar(a, b) => vec![a, b],
        &Op::Scale(a, _)
        | &Op::AddScalar(a)
        | &Op::Unary(a, _)
        | &Op::Sum(a)
        | &Op::Mean(a)
        | &Op::SumRows(a)
        | &Op::SumCols(a)
        | &Op::BroadcastRows(a)
        | &Op::Slice(a, _)
        | &Op::SoftmaxCol(a) => vec![a],
        Op::Gather(a, _) | Op::MaxRows(a, _) => vec![*a],
        Op::Concat(p) => p.clone(),
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Custom { input, .. } => vec![*input],
    }
}
