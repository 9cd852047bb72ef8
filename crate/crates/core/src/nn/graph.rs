//! Reverse-mode gradient tape over a fixed set of tensor ops.
//!
//! Every node stores its forward value; `backward` walks the tape in reverse
//! insertion order, which is a valid topological order because inputs are
//! always created before the nodes that consume them.

use std::collections::BTreeMap;

use super::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CausalSoftmax(Var, f32),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    PickCols { x: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Minimum(Var, Var),
    Clamp(Var, f32, f32),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBT(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows { .. } => "gather_rows",
            Op::PickCols { .. } => "pick_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Minimum(..) => "minimum",
            Op::Clamp(..) => "clamp",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter name to graph variable.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Structure(format!("graph references undeclared parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: op.name(), node: self.nodes.len() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::Minimum(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::CausalSoftmax(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Clamp(a, _, _)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::GatherRows { x, .. } | Op::PickCols { x, .. } => vec![*x],
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NumericOverflow { op: "leaf", node: self.nodes.len() });
        }
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    /// Declares every tensor of `params` as a trainable leaf.
    pub fn params(&mut self, params: &ParamSet) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), self.param(t.clone())?);
        }
        Ok(ParamVars { vars })
    }

    /// Declares every tensor of `params` as a constant (no gradients).
    pub fn frozen(&mut self, params: &ParamSet) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.clone(), self.constant(t.clone())?);
        }
        Ok(ParamVars { vars })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (k2, n) = as_matrix(self.value(b));
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// `a @ b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a));
        let (n, k2) = as_matrix(self.value(b));
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(shape_err(
                "matmul_bt",
                format!("{:?} x {:?}^T", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBT(a, b))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Minimum(a, b), f32::min)
    }

    /// Adds a `[d]` bias to every row of an `[n, d]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = as_matrix(self.value(x));
        if self.value(bias).len() != d {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, bv) in out[r * d..(r + 1) * d].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let data: Vec<f32> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, op)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f32::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f32::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f32::tanh)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, d) = as_matrix(self.value(a));
        let mut out = self.value(a).data().to_vec();
        for r in 0..n {
            softmax_in_place(&mut out[r * d..(r + 1) * d]);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, d) = as_matrix(self.value(a));
        let mut out = self.value(a).data().to_vec();
        for r in 0..n {
            log_softmax_in_place(&mut out[r * d..(r + 1) * d]);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax(a))
    }

    /// Softmax of `scale * x` over a square `[T, T]` score matrix where row
    /// `i` only sees columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, scale: f32) -> Result<Var> {
        let (n, d) = as_matrix(self.value(a));
        if n != d {
            return Err(shape_err("causal_softmax", format!("{:?} is not square", self.shape(a))));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0f32; n * d];
        for r in 0..n {
            let row = &mut out[r * d..r * d + r + 1];
            for (o, &x) in row.iter_mut().zip(&src[r * d..r * d + r + 1]) {
                *o = x * scale;
            }
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::CausalSoftmax(a, scale))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = as_matrix(self.value(x));
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err(
                "layernorm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0f32; n * d];
        let mut means = Vec::with_capacity(n);
        let mut rstds = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let (mean, rstd) = layer_norm_stats(row);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds },
        )
    }

    /// Rows of `table` selected by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = as_matrix(self.value(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("id {bad} out of range for table {v}x{d}")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding { table, ids: ids.to_vec() },
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = as_matrix(self.value(x));
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range for {n}x{d}")));
        }
        let t = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
        )
    }

    /// `out[i] = x[i, idx[i]]`
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = as_matrix(self.value(x));
        if idx.len() != n || idx.iter().any(|&i| i >= d) {
            return Err(shape_err(
                "pick_cols",
                format!("{} indices (max {:?}) for {n}x{d}", idx.len(), idx.iter().max()),
            ));
        }
        let t = self.value(x).data();
        let out: Vec<f32> = idx.iter().enumerate().map(|(r, &c)| t[r * d + c]).collect();
        self.push(Tensor::from_vec(out), Op::PickCols { x, idx: idx.to_vec() })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = as_matrix(self.value(x));
        if start + len > n {
            return Err(shape_err("slice_rows", format!("{start}..{} of {n} rows", start + len)));
        }
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        self.push(Tensor::new(vec![len, d], out)?, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = as_matrix(self.value(x));
        if start + len > d {
            return Err(shape_err("slice_cols", format!("{start}..{} of {d} cols", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let d = xs.first().map(|&v| self.value(v).cols()).unwrap_or(0);
        let mut out = Vec::new();
        let mut n = 0;
        for &v in xs {
            let (r, c) = as_matrix(self.value(v));
            if c != d {
                return Err(shape_err("concat_rows", format!("width {c} vs {d}")));
            }
            n += r;
            out.extend_from_slice(self.value(v).data());
        }
        self.push(Tensor::new(vec![n, d], out)?, Op::ConcatRows(xs.to_vec()))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let n = xs.first().map(|&v| self.value(v).rows()).unwrap_or(0);
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (r, c) = as_matrix(self.value(v));
            if r != n {
                return Err(shape_err("concat_cols", format!("height {r} vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; n * total];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(xs.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_f64() as f32;
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = (t.sum_f64() / t.len() as f64) as f32;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a))
    }

    /// Reverse pass from a scalar. Returns the gradient of every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.value(*a));
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|g| matmul_bt_acc(gy, bv, g, m, n, k));
                acc(*b, &|g| matmul_at_acc(av, gy, g, m, k, n));
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = as_matrix(self.value(*a));
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = gy @ B ; dB = gy^T @ A
                acc(*a, &|g| matmul_acc(gy, bv, g, m, n, k));
                acc(*b, &|g| matmul_at_acc(gy, av, g, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &|g| add_into(g, gy));
                acc(*b, &|g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &|g| add_into(g, gy));
                acc(*b, &|g| {
                    for (o, &d) in g.iter_mut().zip(gy) {
                        *o -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|g| {
                    for ((o, &d), &w) in g.iter_mut().zip(gy).zip(bv) {
                        *o += d * w;
                    }
                });
                acc(*b, &|g| {
                    for ((o, &d), &w) in g.iter_mut().zip(gy).zip(av) {
                        *o += d * w;
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|g| {
                    for (j, o) in g.iter_mut().enumerate() {
                        if av[j] <= bv[j] {
                            *o += gy[j];
                        }
                    }
                });
                acc(*b, &|g| {
                    for (j, o) in g.iter_mut().enumerate() {
                        if av[j] > bv[j] {
                            *o += gy[j];
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let d = self.value(*x).cols();
                acc(*x, &|g| add_into(g, gy));
                acc(*bias, &|g| {
                    for row in gy.chunks_exact(d) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|g| {
                for (o, &d) in g.iter_mut().zip(gy) {
                    *o += d * c;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|g| add_into(g, gy)),
            Op::Log(a) => {
                let av = self.value(*a).data();
                acc(*a, &|g| {
                    for ((o, &d), &x) in g.iter_mut().zip(gy).zip(av) {
                        *o += d / x;
                    }
                });
            }
            Op::Exp(a) => acc(*a, &|g| {
                for ((o, &d), &v) in g.iter_mut().zip(gy).zip(y) {
                    *o += d * v;
                }
            }),
            Op::Sigmoid(a) => acc(*a, &|g| {
                for ((o, &d), &s) in g.iter_mut().zip(gy).zip(y) {
                    *o += d * s * (1.0 - s);
                }
            }),
            Op::LogSigmoid(a) => {
                let av = self.value(*a).data();
                acc(*a, &|g| {
                    for ((o, &d), &x) in g.iter_mut().zip(gy).zip(av) {
                        *o += d * sigmoid(-x);
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &|g| {
                for ((o, &d), &t) in g.iter_mut().zip(gy).zip(y) {
                    *o += d * (1.0 - t * t);
                }
            }),
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                acc(*a, &|g| {
                    for ((o, &d), &x) in g.iter_mut().zip(gy).zip(av) {
                        *o += d * gelu_grad(x);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                acc(*a, &|g| {
                    for ((o, &d), &x) in g.iter_mut().zip(gy).zip(av) {
                        if x >= *lo && x <= *hi {
                            *o += d;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let d = self.value(*a).cols();
                acc(*a, &|g| softmax_backward(g, gy, y, d, 1.0));
            }
            Op::CausalSoftmax(a, scale) => {
                let d = self.value(*a).cols();
                acc(*a, &|g| softmax_backward(g, gy, y, d, *scale));
            }
            Op::LogSoftmax(a) => {
                let d = self.value(*a).cols();
                acc(*a, &|g| {
                    for ((grow, gyrow), yrow) in
                        g.chunks_exact_mut(d).zip(gy.chunks_exact(d)).zip(y.chunks_exact(d))
                    {
                        let s: f64 = gyrow.iter().map(|&v| v as f64).sum();
                        for j in 0..d {
                            grow[j] += gyrow[j] - (yrow[j].exp() as f64 * s) as f32;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let d = self.value(*x).cols();
                let xs = self.value(*x).data();
                let gv = self.value(*gamma).data();
                if wants(*x) {
                    acc(*x, &|g| {
                        for (r, (grow, gyrow)) in
                            g.chunks_exact_mut(d).zip(gy.chunks_exact(d)).enumerate()
                        {
                            let xrow = &xs[r * d..(r + 1) * d];
                            let (mu, rs) = (mean[r], rstd[r]);
                            let mut m1 = 0.0f64;
                            let mut m2 = 0.0f64;
                            for j in 0..d {
                                let dxh = (gyrow[j] * gv[j]) as f64;
                                let xh = ((xrow[j] - mu) * rs) as f64;
                                m1 += dxh;
                                m2 += dxh * xh;
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                let dxh = (gyrow[j] * gv[j]) as f64;
                                let xh = ((xrow[j] - mu) * rs) as f64;
                                grow[j] += (rs as f64 * (dxh - m1 - xh * m2)) as f32;
                            }
                        }
                    });
                }
                acc(*gamma, &|g| {
                    for (r, gyrow) in gy.chunks_exact(d).enumerate() {
                        let xrow = &xs[r * d..(r + 1) * d];
                        for j in 0..d {
                            g[j] += gyrow[j] * (xrow[j] - mean[r]) * rstd[r];
                        }
                    }
                });
                acc(*beta, &|g| {
                    for gyrow in gy.chunks_exact(d) {
                        add_into(g, gyrow);
                    }
                });
            }
            Op::Embedding { table: x, ids: idx } | Op::GatherRows { x, idx } => {
                let d = self.value(*x).cols();
                acc(*x, &|g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &gy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::PickCols { x, idx } => {
                let d = self.value(*x).cols();
                acc(*x, &|g| {
                    for (r, &c) in idx.iter().enumerate() {
                        g[r * d + c] += gy[r];
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let d = self.value(*x).cols();
                acc(*x, &|g| add_into(&mut g[start * d..start * d + gy.len()], gy));
            }
            Op::SliceCols { x, start } => {
                let d = self.value(*x).cols();
                let w = node.value.cols();
                acc(*x, &|g| {
                    for (r, gyrow) in gy.chunks_exact(w).enumerate() {
                        add_into(&mut g[r * d + start..r * d + start + w], gyrow);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    acc(v, &|g| add_into(g, &gy[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut off = 0;
                for &v in xs {
                    let w = self.value(v).cols();
                    acc(v, &|g| {
                        for (r, grow) in g.chunks_exact_mut(w).enumerate() {
                            add_into(grow, &gy[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Sum(a) => acc(*a, &|g| {
                for o in g.iter_mut() {
                    *o += gy[0];
                }
            }),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f32;
                acc(*a, &|g| {
                    for o in g.iter_mut() {
                        *o += gy[0] / n;
                    }
                });
            }
        }
        Ok(())
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of a node, zeros when it did not influence the loss.
    pub fn get(&self, g: &Graph, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(d) => Tensor::new(g.shape(v).to_vec(), d.clone()).expect("grad shape"),
            None => Tensor::zeros(g.shape(v)),
        }
    }

    /// Collects gradients for every declared parameter.
    pub fn params(&self, g: &Graph, vars: &ParamVars) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, &v) in vars.iter() {
            let t = self.get(g, v);
            if !t.is_finite() {
                return Err(Error::NumericOverflow { op: "backward", node: v.0 });
            }
            out.insert(name.clone(), t)?;
        }
        Ok(out)
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

fn softmax_backward(g: &mut [f32], gy: &[f32], y: &[f32], d: usize, scale: f32) {
    for ((grow, gyrow), yrow) in g.chunks_exact_mut(d).zip(gy.chunks_exact(d)).zip(y.chunks_exact(d)) {
        let s = dot(gyrow, yrow);
        for j in 0..d {
            grow[j] += scale * yrow[j] * (gyrow[j] - s);
        }
    }
}

pub(crate) fn layer_norm_stats(row: &[f32]) -> (f32, f32) {
    let d = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
    (mean as f32, (1.0 / (var + LN_EPS).sqrt()) as f32)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
    let lse = max as f64 + sum.ln();
    for v in row.iter_mut() {
        *v = (*v as f64 - lse) as f32;
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// f64 variant used by loss oracles and reports.
pub fn log_sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
