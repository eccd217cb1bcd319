//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in execution
//! order, which is already a topological order. [`Tape::backward`] walks the
//! record once from the end, so each node's adjoint is complete by the time
//! it is visited.
//!
//! All ops view their operands as row-major matrices `[rows, cols]` where
//! `cols` is the last axis. Binary elementwise ops accept a right operand
//! whose shape is a suffix of the left operand's shape (scalar and row
//! broadcasting); nothing else broadcasts.
//!
//! Parameters are borrowed from a [`ParamStore`] instead of copied, so one
//! store can back many tapes at once (one per user in a batch).

use super::params::{ParamId, ParamStore};
use super::rng::StreamRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

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
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Tanh(Var),
    Silu(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    LayerNorm(Var, Vec<f64>),
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b)
            | Minimum(a, b) => vec![*a, *b],
            Scale(x, _) | Offset(x) | Exp(x) | Log(x) | Softplus(x) | Tanh(x) | Silu(x)
            | Square(x) | Softmax(x) | LogSoftmax(x) | Sum(x) | SumAxis(x, _)
            | Slice { x, .. } | Clamp { x, .. } | LayerNorm(x, _) | Dropout(x, _)
            | GatherRows(x, _) | Reshape(x) => vec![*x],
            Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Adjoint of `v`; `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient per parameter that was used on the tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.wrt(v).map(|g| (id, g)))
    }

    /// Adds all parameter gradients into `acc`, indexed by parameter id.
    pub fn accumulate_into(&self, acc: &mut [Option<Vec<f64>>], weight: f64) {
        for (id, g) in self.param_grads() {
            match &mut acc[id.0] {
                Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a += weight * g),
                slot @ None => *slot = Some(g.iter().map(|g| weight * g).collect()),
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// `rhs` broadcasts onto `lhs` when its shape, minus leading unit axes, is a
/// suffix of `lhs`'s shape.
fn broadcasts(lhs: &Tensor, rhs: &Tensor) -> bool {
    if lhs.shape == rhs.shape {
        return true;
    }
    let rs: Vec<usize> = rhs
        .shape
        .iter()
        .copied()
        .skip_while(|&d| d == 1)
        .collect();
    rs.len() <= lhs.shape.len() && lhs.shape[lhs.shape.len() - rs.len()..] == rs[..]
}

// out[m,n] += a[m,k] * b[k,n]
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

// out[k,n] += a[m,k]^T * b[m,n]
fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Row-wise softmax over the last axis with optional keep-mask. Rows with
/// nothing kept come out as all zeros.
pub fn softmax_rows(x: &[f64], cols: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if cols == 0 {
        return out;
    }
    for (r, row) in x.chunks(cols).enumerate() {
        let keep = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = (v - mx).exp();
                o[j] = e;
                s += e;
            }
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            params: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// Turns off gradient bookkeeping; `backward` then yields no adjoints.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param tape").get(*id),
        }
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.value(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    /// First element of `v`'s value.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        let needs_grad = self.grad_enabled
            && match &op {
                Op::Leaf => false,
                Op::Param => true,
                other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
            };
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        let var = self.push(t, Op::Leaf);
        self.nodes[var.0].needs_grad = self.grad_enabled;
        var
    }

    /// Brings a stored parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("tape was created without a parameter store");
        assert!(id.0 < store.len(), "parameter id out of range");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copies the value into a fresh leaf, cutting the gradient path.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        mm_acc(&ta.data, &tb.data, m, k, n, &mut out);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = vec![0.0; m * n];
        mm_nt_acc(&ta.data, &tb.data, m, k, n, &mut out);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcasts(ta, tb) || tb.numel() == 0 && ta.numel() != 0 {
            return Err(shape_err(name, ta, tb));
        }
        let nb = tb.numel().max(1);
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data[i % nb]))
            .collect();
        let t = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum of two same-shape operands.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("minimum", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x.min(*y)).collect();
        let t = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(t, Op::Minimum(a, b)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, op)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `x + c` for a constant scalar `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, silu, Op::Silu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last axis. A `mask` entry of `false` excludes that
    /// position; fully masked rows produce zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(m) = mask {
            if m.len() != tx.numel() {
                return Err(Error::Shape {
                    op: "softmax",
                    lhs: tx.shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let data = softmax_rows(&tx.data, tx.cols(), mask);
        let t = Tensor::new(tx.shape.clone(), data)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = tx.data.clone();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::LogSoftmax(x))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over rows (`axis = 0`, giving `[1, cols]`) or over the last axis
    /// (`axis = 1`, giving `[rows, 1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let t = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for row in tx.data.chunks(c.max(1)) {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                Tensor::matrix(1, c, out)?
            }
            1 => {
                let out = tx.data.chunks(c.max(1)).map(|row| row.iter().sum()).collect();
                Tensor::matrix(r, 1, out)?
            }
            _ => return Err(Error::invalid(format!("sum_axis: axis {axis} not in {{0, 1}}"))),
        };
        Ok(self.push(t, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let n = if axis == 0 { tx.rows() } else { tx.cols() };
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        let first = self.value(xs[0]).clone();
        let (r0, c0) = (first.rows(), first.cols());
        let t = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &v in xs {
                    let t = self.value(v);
                    if t.cols() != c0 {
                        return Err(shape_err("concat", &first, t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(&t.data);
                }
                Tensor::matrix(rows, c0, data)?
            }
            1 => {
                let mut cols = 0;
                for &v in xs {
                    let t = self.value(v);
                    if t.rows() != r0 {
                        return Err(shape_err("concat", &first, t));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &v in xs {
                        data.extend_from_slice(self.value(v).row_slice(r));
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
            _ => return Err(Error::invalid(format!("concat: axis {axis} not in {{0, 1}}"))),
        };
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis)))
    }

    /// Rows `start..start+len` (`axis = 0`) or columns (`axis = 1`).
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let t = match axis {
            0 if start + len <= r => {
                Tensor::matrix(len, c, tx.data[start * c..(start + len) * c].to_vec())?
            }
            1 if start + len <= c => {
                let mut data = Vec::with_capacity(r * len);
                for row in 0..r {
                    data.extend_from_slice(&tx.data[row * c + start..row * c + start + len]);
                }
                Tensor::matrix(r, len, data)?
            }
            _ => {
                return Err(Error::Shape {
                    op: "slice",
                    lhs: tx.shape.clone(),
                    rhs: vec![axis, start, len],
                })
            }
        };
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let c = tx.cols().max(1);
        let mut data = tx.data.clone();
        let mut rstds = Vec::with_capacity(tx.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
            rstds.push(rstd);
        }
        let t = Tensor::new(tx.shape.clone(), data).expect("same shape");
        self.push(t, Op::LayerNorm(x, rstds))
    }

    /// Inverted dropout. `rate == 0` or `rng == None` is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut StreamRng>) -> Var {
        let Some(rng) = rng else { return x };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape.clone(), data).expect("same shape");
        self.push(t, Op::Dropout(x, mask))
    }

    /// Selects rows of a `[n, d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::OutOfVocab { id: i, vocab: n });
            }
            data.extend_from_slice(&tt.data[i * d..(i + 1) * d]);
        }
        let t = Tensor::matrix(idx.len(), d, data)?;
        Ok(self.push(t, Op::GatherRows(table, idx.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(shape.to_vec(), tx.data.clone())
            .map_err(|_| shape_err("reshape", tx, &Tensor::zeros(shape)))?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reverse pass from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let n_out = self.value(out).numel();
        if n_out != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got {n_out} elements"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        if self.nodes[out.0].needs_grad {
            grads[out.0] = Some(vec![1.0]);
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.value(v).numel()]);
        }
        f(slot.as_mut().expect("just set"));
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = match &node.value {
            Value::Owned(t) => t,
            Value::Param(_) => return,
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                self.acc(grads, *a, |ga| mm_nt_acc(g, &tb.data, m, n, k, ga));
                self.acc(grads, *b, |gb| mm_tn_acc(&ta.data, g, m, k, n, gb));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                self.acc(grads, *a, |ga| mm_acc(g, &tb.data, m, n, k, ga));
                self.acc(grads, *b, |gb| mm_tn_acc(g, &ta.data, m, n, k, gb));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, g)| *x += g));
                let nb = self.value(*b).numel().max(1);
                self.acc(grads, *b, |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % nb] += sign * gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.numel().max(1);
                self.acc(grads, *a, |ga| {
                    for (j, gv) in g.iter().enumerate() {
                        ga[j] += gv * tb.data[j % nb];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % nb] += gv * ta.data[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.numel().max(1);
                self.acc(grads, *a, |ga| {
                    for (j, gv) in g.iter().enumerate() {
                        ga[j] += gv / tb.data[j % nb];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        let bv = tb.data[j % nb];
                        gb[j % nb] -= gv * ta.data[j] / (bv * bv);
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for j in 0..g.len() {
                        if ta.data[j] <= tb.data[j] {
                            ga[j] += g[j];
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for j in 0..g.len() {
                        if ta.data[j] > tb.data[j] {
                            gb[j] += g[j];
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, g)| *a += s * g))
            }
            Op::Offset(x) | Op::Reshape(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, g)| *a += g))
            }
            Op::Exp(x) => self.acc(grads, *x, |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * y.data[j];
                }
            }),
            Op::Log(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] / tx.data[j];
                    }
                })
            }
            Op::Softplus(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * sigmoid(tx.data[j]);
                    }
                })
            }
            Op::Tanh(x) => self.acc(grads, *x, |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * (1.0 - y.data[j] * y.data[j]);
                }
            }),
            Op::Silu(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for j in 0..g.len() {
                        let v = tx.data[j];
                        let s = sigmoid(v);
                        gx[j] += g[j] * s * (1.0 + v * (1.0 - s));
                    }
                })
            }
            Op::Square(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for j in 0..g.len() {
                        gx[j] += 2.0 * g[j] * tx.data[j];
                    }
                })
            }
            Op::Clamp { x, lo, hi } => {
                let tx = self.value(*x);
                self.acc(grads, *x, |gx| {
                    for j in 0..g.len() {
                        let v = tx.data[j];
                        if v >= *lo && v <= *hi {
                            gx[j] += g[j];
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let c = y.cols().max(1);
                self.acc(grads, *x, |gx| {
                    for r in 0..y.rows() {
                        let ys = &y.data[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let c = y.cols().max(1);
                self.acc(grads, *x, |gx| {
                    for r in 0..y.rows() {
                        let ys = &y.data[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let gsum: f64 = gs.iter().sum();
                        for j in 0..c {
                            gx[r * c + j] += gs[j] - ys[j].exp() * gsum;
                        }
                    }
                })
            }
            Op::Sum(x) => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::SumAxis(x, axis) => {
                let tx = self.value(*x);
                let c = tx.cols().max(1);
                self.acc(grads, *x, |gx| {
                    for (j, a) in gx.iter_mut().enumerate() {
                        *a += if *axis == 0 { g[j % c] } else { g[j / c] };
                    }
                })
            }
            Op::Concat(xs, axis) => {
                let total_c = y.cols();
                let mut offset = 0;
                for &v in xs {
                    let tv = self.value(v);
                    let (r, c) = (tv.rows(), tv.cols());
                    match axis {
                        0 => {
                            let n = tv.numel();
                            self.acc(grads, v, |gv| {
                                gv.iter_mut()
                                    .zip(&g[offset..offset + n])
                                    .for_each(|(a, g)| *a += g)
                            });
                            offset += n;
                        }
                        _ => {
                            self.acc(grads, v, |gv| {
                                for row in 0..r {
                                    for j in 0..c {
                                        gv[row * c + j] += g[row * total_c + offset + j];
                                    }
                                }
                            });
                            offset += c;
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let len = if *axis == 0 { y.rows() } else { y.cols() };
                self.acc(grads, *x, |gx| match axis {
                    0 => gx[start * c..(start + len) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, g)| *a += g),
                    _ => {
                        for row in 0..tx.rows() {
                            for j in 0..len {
                                gx[row * c + start + j] += g[row * len + j];
                            }
                        }
                    }
                })
            }
            Op::LayerNorm(x, rstds) => {
                let c = y.cols().max(1);
                self.acc(grads, *x, |gx| {
                    for r in 0..y.rows() {
                        let ys = &y.data[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let mg = gs.iter().sum::<f64>() / c as f64;
                        let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstds[r] * (gs[j] - mg - ys[j] * mgy);
                        }
                    }
                })
            }
            Op::Dropout(x, mask) => self.acc(grads, *x, |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }),
            Op::GatherRows(table, idx) => {
                let d = y.cols();
                self.acc(grads, *table, |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                })
            }
        }
    }
}
