use std::collections::HashMap;

use super::kernels::{dist2, gelu, gelu_grad, gemm, logsumexp, softmax_in_place, transpose_last2};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYERNORM_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Operation selector for [`Graph::apply`], carrying per-op attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpSpec {
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Softmax,
    LogSumExp,
    Log,
    Exp,
    Mean,
    Sum,
    Relu,
    Gelu,
    Tanh,
    LayerNorm,
    L2Normalize,
    MaxAxis(usize),
    Embedding(Vec<usize>),
    Attention { heads: usize },
    Chamfer,
}

impl OpSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OpSpec::Add => "add",
            OpSpec::Sub => "sub",
            OpSpec::Mul => "mul",
            OpSpec::Scale(_) => "scale",
            OpSpec::MatMul => "matmul",
            OpSpec::Transpose => "transpose",
            OpSpec::Reshape(_) => "reshape",
            OpSpec::Concat { .. } => "concat",
            OpSpec::Slice { .. } => "slice",
            OpSpec::Softmax => "softmax",
            OpSpec::LogSumExp => "logsumexp",
            OpSpec::Log => "log",
            OpSpec::Exp => "exp",
            OpSpec::Mean => "mean",
            OpSpec::Sum => "sum",
            OpSpec::Relu => "relu",
            OpSpec::Gelu => "gelu",
            OpSpec::Tanh => "tanh",
            OpSpec::LayerNorm => "layernorm",
            OpSpec::L2Normalize => "l2_normalize",
            OpSpec::MaxAxis(_) => "max_axis",
            OpSpec::Embedding(_) => "embedding",
            OpSpec::Attention { .. } => "attention",
            OpSpec::Chamfer => "chamfer",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    Reshape,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Softmax,
    LogSumExp,
    Log,
    Exp,
    Mean,
    Sum,
    Relu,
    Gelu,
    Tanh,
    LayerNorm { rstd: Vec<f64> },
    L2Normalize { norms: Vec<f64> },
    MaxAxis { argmax: Vec<usize> },
    Embedding { indices: Vec<usize> },
    Attention { heads: usize, scale: f64, probs: Vec<f64> },
    Chamfer { nn_ab: Vec<usize>, nn_ba: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Recording of one forward pass, consumed by [`Graph::backward`].
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward walks it in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    seed: u64,
    consumed: bool,
    inference: bool,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(move |(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }

    /// Accumulate parameter gradients into the store's accumulators.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

fn is_suffix(full: &[usize], tail: &[usize]) -> bool {
    tail.len() <= full.len() && full[full.len() - tail.len()..] == *tail
}

/// Split `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            seed,
            consumed: false,
            inference: false,
            params: HashMap::new(),
        }
    }

    /// A graph that records values only; parameters enter as constants.
    pub fn inference(seed: u64) -> Self {
        Self {
            inference: true,
            ..Self::new(seed)
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = !self.inference && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: &'static str, inputs: &[Var]) {
        // inference graphs are also used for finite-difference probes, which
        // must be able to report non-finite values instead of aborting
        if cfg!(debug_assertions) && !self.inference {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                if let Some(i) = t.data().iter().position(|x| !x.is_finite()) {
                    panic!("{op}: non-finite input at flat index {i} (shape {:?})", t.shape());
                }
            }
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input whose gradient is reported by backward.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: !self.inference,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bring a stored parameter into the graph (once per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let value = store.value(id)?.clone();
        let v = self.leaf(value);
        self.params.insert(id, v);
        Ok(v)
    }

    /// Generic entry point dispatching on an [`OpSpec`].
    pub fn apply(&mut self, op: &OpSpec, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!("{} takes {n} inputs, got {}", op.name(), inputs.len())))
            }
        };
        match op {
            OpSpec::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpSpec::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpSpec::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpSpec::Scale(c) => arity(1).map(|_| self.scale(inputs[0], *c)),
            OpSpec::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpSpec::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpSpec::Reshape(s) => arity(1).and_then(|_| self.reshape(inputs[0], s)),
            OpSpec::Concat { axis } => self.concat(inputs, *axis),
            OpSpec::Slice { axis, start, end } => arity(1).and_then(|_| self.slice(inputs[0], *axis, *start, *end)),
            OpSpec::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            OpSpec::LogSumExp => arity(1).and_then(|_| self.logsumexp(inputs[0])),
            OpSpec::Log => arity(1).map(|_| self.log(inputs[0])),
            OpSpec::Exp => arity(1).map(|_| self.exp(inputs[0])),
            OpSpec::Mean => arity(1).map(|_| self.mean(inputs[0])),
            OpSpec::Sum => arity(1).map(|_| self.sum(inputs[0])),
            OpSpec::Relu => arity(1).map(|_| self.relu(inputs[0])),
            OpSpec::Gelu => arity(1).map(|_| self.gelu(inputs[0])),
            OpSpec::Tanh => arity(1).map(|_| self.tanh(inputs[0])),
            OpSpec::LayerNorm => arity(1).and_then(|_| self.layernorm(inputs[0])),
            OpSpec::L2Normalize => arity(1).and_then(|_| self.l2_normalize(inputs[0])),
            OpSpec::MaxAxis(axis) => arity(1).and_then(|_| self.max_axis(inputs[0], *axis)),
            OpSpec::Embedding(idx) => arity(1).and_then(|_| self.embedding(inputs[0], idx)),
            OpSpec::Attention { heads } => arity(3).and_then(|_| self.attention(inputs[0], inputs[1], inputs[2], *heads, None)),
            OpSpec::Chamfer => arity(2).and_then(|_| self.chamfer(inputs[0], inputs[1])),
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Var, Var)> {
        self.check_finite(op, &[a, b]);
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !is_suffix(ta.shape(), tb.shape()) {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let nb = tb.numel();
        let bd = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect();
        Ok((Tensor::from_parts(ta.shape().to_vec(), data), a, b))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul, vec![a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary("scale", a, Op::Scale(c), |x| x * c)
    }

    /// `[.., n, k] x [k, m] -> [.., n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("matmul", &[a, b]);
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() < 2 || tb.rank() != 2 || ta.shape()[ta.rank() - 1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (rows, k) = ta.rows_cols();
        let n = tb.shape()[1];
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul, vec![a, b]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let r = ta.rank();
        if r < 2 {
            return Err(Error::shape("transpose", ta.shape(), &[]));
        }
        let (rows, cols) = (ta.shape()[r - 2], ta.shape()[r - 1]);
        let batch = ta.numel() / (rows * cols);
        let data = transpose_last2(ta.data(), batch, rows, cols);
        let mut shape = ta.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Transpose, vec![a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape, vec![a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { axis }, parts.to_vec()))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() || start >= end || end > ta.shape()[axis] {
            return Err(Error::shape("slice", ta.shape(), &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        let width = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            data.extend_from_slice(&ta.data()[base..base + width]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = end - start;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { axis, start }, vec![a]))
    }

    fn unary(&mut self, op_name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        self.check_finite(op_name, &[a]);
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, op, vec![a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary("log", a, Op::Log, f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary("exp", a, Op::Exp, f64::exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary("relu", a, Op::Relu, |x| x.max(0.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary("gelu", a, Op::Gelu, gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary("tanh", a, Op::Tanh, f64::tanh)
    }

    fn rowwise(&mut self, op_name: &'static str, a: Var, f: impl Fn(&mut [f64])) -> Result<Tensor> {
        self.check_finite(op_name, &[a]);
        let ta = &self.nodes[a.0].value;
        if ta.rank() == 0 {
            return Err(Error::shape(op_name, ta.shape(), &[]));
        }
        let (_, cols) = ta.rows_cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            f(row);
        }
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.rowwise("softmax", a, softmax_in_place)?;
        Ok(self.push(t, Op::Softmax, vec![a]))
    }

    /// Log-sum-exp over the last axis; the axis is removed.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.check_finite("logsumexp", &[a]);
        let ta = &self.nodes[a.0].value;
        if ta.rank() == 0 {
            return Err(Error::shape("logsumexp", ta.shape(), &[]));
        }
        let (_, cols) = ta.rows_cols();
        let data = ta.data().chunks(cols).map(logsumexp).collect();
        let shape = ta.shape()[..ta.rank() - 1].to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::LogSumExp, vec![a]))
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        self.check_finite("mean", &[a]);
        let ta = &self.nodes[a.0].value;
        let m = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean, vec![a])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        self.check_finite("sum", &[a]);
        let s = self.nodes[a.0].value.data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum, vec![a])
    }

    /// Normalize each row of the last axis to zero mean and unit variance.
    /// The affine part is left to the caller.
    pub fn layernorm(&mut self, a: Var) -> Result<Var> {
        self.check_finite("layernorm", &[a]);
        let ta = &self.nodes[a.0].value;
        if ta.rank() == 0 {
            return Err(Error::shape("layernorm", ta.shape(), &[]));
        }
        let (rows, cols) = ta.rows_cols();
        let mut data = ta.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        for row in data.chunks_mut(cols) {
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, Op::LayerNorm { rstd }, vec![a]))
    }

    /// Scale each row of the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.check_finite("l2_normalize", &[a]);
        let ta = &self.nodes[a.0].value;
        if ta.rank() == 0 {
            return Err(Error::shape("l2_normalize", ta.shape(), &[]));
        }
        let (rows, cols) = ta.rows_cols();
        let mut data = ta.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for row in data.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, Op::L2Normalize { norms }, vec![a]))
    }

    /// Maximum along `axis` (removed from the shape); ties go to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_finite("max_axis", &[a]);
        let ta = &self.nodes[a.0].value;
        if axis >= ta.rank() {
            return Err(Error::shape("max_axis", ta.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        let d = ta.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    let dst = o * inner + i;
                    if d[src] > out[dst] {
                        out[dst] = d[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxAxis { argmax }, vec![a]))
    }

    /// Row gather from a `[rows, width]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        if tt.rank() != 2 {
            return Err(Error::shape("embedding", tt.shape(), &[indices.len()]));
        }
        let (rows, width) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("embedding index {bad} out of range for {rows} rows")));
        }
        if indices.is_empty() {
            return Err(Error::invalid("embedding lookup with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&tt.data()[i * width..(i + 1) * width]);
        }
        let t = Tensor::from_parts(vec![indices.len(), width], data);
        Ok(self.push(t, Op::Embedding { indices: indices.to_vec() }, vec![table]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [B, Mq, D]`, `k, v: [B, Mk, D]`; heads split `D` evenly.
    /// `key_mask` (length `B * Mk`, `true` = hidden) removes keys from the
    /// softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var> {
        self.check_finite("attention", &[q, k, v]);
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        if tq.rank() != 3 || tk.rank() != 3 || tk.shape() != tv.shape() {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        let (b, mq, d) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
        let mk = tk.shape()[1];
        if tk.shape()[0] != b || tk.shape()[2] != d {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("attention: {heads} heads do not divide width {d}")));
        }
        if let Some(m) = key_mask {
            if m.len() != b * mk {
                return Err(Error::shape("attention", &[b, mk], &[m.len()]));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; b * heads * mq * mk];
        let mut out = vec![0.0; b * mq * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..mq {
                    let row = &mut probs[((bi * heads + h) * mq + i) * mk..][..mk];
                    let qi = &qd[(bi * mq + i) * d + off..][..dh];
                    for (j, r) in row.iter_mut().enumerate() {
                        if key_mask.is_some_and(|m| m[bi * mk + j]) {
                            *r = f64::NEG_INFINITY;
                            continue;
                        }
                        let kj = &kd[(bi * mk + j) * d + off..][..dh];
                        *r = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(bi * mq + i) * d + off..][..dh];
                    for (j, &p) in row.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vd[(bi * mk + j) * d + off..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![b, mq, d], out);
        Ok(self.push(t, Op::Attention { heads, scale, probs }, vec![q, k, v]))
    }

    /// Attention weights `[B, heads, Mq, Mk]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Every attention node recorded so far, in evaluation order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Attention { .. }))
            .map(|(i, _)| Var(i))
            .collect()
    }

    /// Per-group squared-L2 symmetric Chamfer distance.
    ///
    /// `a: [G, Ka, 3]`, `b: [G, Kb, 3]` → `[G]`, each entry the mean over `a`
    /// of the nearest squared distance into `b` plus the converse.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("chamfer", &[a, b]);
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != 3 || tb.shape()[2] != 3 {
            return Err(Error::shape("chamfer", ta.shape(), tb.shape()));
        }
        let (g, ka, kb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut nn_ab = vec![0usize; g * ka];
        let mut nn_ba = vec![0usize; g * kb];
        let mut out = vec![0.0; g];
        for gi in 0..g {
            let pa = &ad[gi * ka * 3..(gi + 1) * ka * 3];
            let pb = &bd[gi * kb * 3..(gi + 1) * kb * 3];
            let (mut sum_a, mut sum_b) = (0.0, 0.0);
            let mut best_b = vec![f64::INFINITY; kb];
            for i in 0..ka {
                let mut best = f64::INFINITY;
                for j in 0..kb {
                    let d = dist2(&pa[i * 3..i * 3 + 3], &pb[j * 3..j * 3 + 3]);
                    if d < best {
                        best = d;
                        nn_ab[gi * ka + i] = j;
                    }
                    if d < best_b[j] {
                        best_b[j] = d;
                        nn_ba[gi * kb + j] = i;
                    }
                }
                sum_a += best;
            }
            for v in &best_b {
                sum_b += v;
            }
            out[gi] = sum_a / ka as f64 + sum_b / kb as f64;
        }
        let t = Tensor::from_parts(vec![g], out);
        Ok(self.push(t, Op::Chamfer { nn_ab, nn_ba }, vec![a, b]))
    }

    /// Reverse-mode pass from a scalar `loss`; consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.inference {
            return Err(Error::invalid("backward on an inference graph"));
        }
        let loss_shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(k, v)| (*k, *v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let inp = &node.inputs;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add | Op::Sub => {
                let (a, b) = (inp[0], inp[1]);
                if needs(a) {
                    acc(a, g.to_vec());
                }
                if needs(b) {
                    let mut gb = reduce_to(g, val(b).numel());
                    if matches!(node.op, Op::Sub) {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(b, gb);
                }
            }
            Op::Mul => {
                let (a, b) = (inp[0], inp[1]);
                let (ad, bd) = (val(a).data(), val(b).data());
                let nb = bd.len();
                if needs(a) {
                    acc(a, g.iter().enumerate().map(|(j, gv)| gv * bd[j % nb]).collect());
                }
                if needs(b) {
                    let prod: Vec<f64> = g.iter().zip(ad).map(|(gv, x)| gv * x).collect();
                    acc(b, reduce_to(&prod, nb));
                }
            }
            Op::Scale(c) => acc(inp[0], g.iter().map(|v| v * c).collect()),
            Op::MatMul => {
                let (a, b) = (inp[0], inp[1]);
                let (ta, tb) = (val(a), val(b));
                let (rows, k) = ta.rows_cols();
                let n = tb.shape()[1];
                if needs(a) {
                    let mut ga = vec![0.0; rows * k];
                    gemm(rows, n, k, g, false, tb.data(), true, &mut ga, false);
                    acc(a, ga);
                }
                if needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, rows, n, ta.data(), true, g, false, &mut gb, false);
                    acc(b, gb);
                }
            }
            Op::Transpose => {
                let s = node.value.shape();
                let r = s.len();
                let (rows, cols) = (s[r - 2], s[r - 1]);
                acc(inp[0], transpose_last2(g, g.len() / (rows * cols), rows, cols));
            }
            Op::Reshape => acc(inp[0], g.to_vec()),
            Op::Concat { axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in inp {
                    let len = val(p).shape()[*axis];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(p, gp);
                    }
                    offset += len;
                }
            }
            Op::Slice { axis, start } => {
                let src = val(inp[0]);
                let (outer, len, inner) = split_axis(src.shape(), *axis);
                let width = node.value.shape()[*axis] * inner;
                let mut ga = vec![0.0; src.numel()];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    ga[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                acc(inp[0], ga);
            }
            Op::Softmax => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(inp[0], ga);
            }
            Op::LogSumExp => {
                let x = val(inp[0]);
                let (_, cols) = x.rows_cols();
                let mut ga = x.data().to_vec();
                for (row, (gv, lse)) in ga.chunks_mut(cols).zip(g.iter().zip(node.value.data())) {
                    for v in row.iter_mut() {
                        *v = gv * (*v - lse).exp();
                    }
                }
                acc(inp[0], ga);
            }
            Op::Log => acc(inp[0], g.iter().zip(val(inp[0]).data()).map(|(gv, x)| gv / x).collect()),
            Op::Exp => acc(inp[0], g.iter().zip(node.value.data()).map(|(gv, y)| gv * y).collect()),
            Op::Mean => {
                let n = val(inp[0]).numel();
                acc(inp[0], vec![g[0] / n as f64; n]);
            }
            Op::Sum => acc(inp[0], vec![g[0]; val(inp[0]).numel()]),
            Op::Relu => acc(
                inp[0],
                g.iter()
                    .zip(val(inp[0]).data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::Gelu => acc(inp[0], g.iter().zip(val(inp[0]).data()).map(|(gv, x)| gv * gelu_grad(*x)).collect()),
            Op::Tanh => acc(inp[0], g.iter().zip(node.value.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect()),
            Op::LayerNorm { rstd } => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                let n = cols as f64;
                let mut ga = vec![0.0; y.len()];
                for (r, ((gr, yr), out)) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)).enumerate() {
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = rstd[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(inp[0], ga);
            }
            Op::L2Normalize { norms } => {
                let y = node.value.data();
                let (_, cols) = node.value.rows_cols();
                let mut ga = vec![0.0; y.len()];
                for (r, ((gr, yr), out)) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / norms[r];
                    }
                }
                acc(inp[0], ga);
            }
            Op::MaxAxis { argmax, .. } => {
                let mut ga = vec![0.0; val(inp[0]).numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    ga[src] += gv;
                }
                acc(inp[0], ga);
            }
            Op::Embedding { indices } => {
                let table = val(inp[0]);
                let width = table.shape()[1];
                let mut ga = vec![0.0; table.numel()];
                for (row, &idx) in indices.iter().enumerate() {
                    for (o, gv) in ga[idx * width..(idx + 1) * width]
                        .iter_mut()
                        .zip(&g[row * width..(row + 1) * width])
                    {
                        *o += gv;
                    }
                }
                acc(inp[0], ga);
            }
            Op::Attention { heads, scale, probs } => {
                let (q, k, v) = (inp[0], inp[1], inp[2]);
                let (tq, tk, tv) = (val(q), val(k), val(v));
                let (b, mq, d) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
                let mk = tk.shape()[1];
                let dh = d / heads;
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; mk];
                for bi in 0..b {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..mq {
                            let p = &probs[((bi * heads + h) * mq + i) * mk..][..mk];
                            let go = &g[(bi * mq + i) * d + off..][..dh];
                            let mut dot = 0.0;
                            for j in 0..mk {
                                let vj = &vd[(bi * mk + j) * d + off..][..dh];
                                dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                dot += p[j] * dp[j];
                                let gvj = &mut gv[(bi * mk + j) * d + off..][..dh];
                                for (o, x) in gvj.iter_mut().zip(go) {
                                    *o += p[j] * x;
                                }
                            }
                            let qi = &qd[(bi * mq + i) * d + off..][..dh];
                            for j in 0..mk {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kd[(bi * mk + j) * d + off..][..dh];
                                let gqi = &mut gq[(bi * mq + i) * d + off..][..dh];
                                for (o, x) in gqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let gkj = &mut gk[(bi * mk + j) * d + off..][..dh];
                                for (o, x) in gkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                acc(q, gq);
                acc(k, gk);
                acc(v, gv);
            }
            Op::Chamfer { nn_ab, nn_ba } => {
                let (a, b) = (inp[0], inp[1]);
                let (ta, tb) = (val(a), val(b));
                let (groups, ka, kb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (ad, bd) = (ta.data(), tb.data());
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for gi in 0..groups {
                    let w = g[gi];
                    for i in 0..ka {
                        let j = nn_ab[gi * ka + i];
                        let (ia, jb) = ((gi * ka + i) * 3, (gi * kb + j) * 3);
                        for c in 0..3 {
                            let d = 2.0 * (ad[ia + c] - bd[jb + c]) * w / ka as f64;
                            ga[ia + c] += d;
                            gb[jb + c] -= d;
                        }
                    }
                    for j in 0..kb {
                        let i = nn_ba[gi * kb + j];
                        let (ia, jb) = ((gi * ka + i) * 3, (gi * kb + j) * 3);
                        for c in 0..3 {
                            let d = 2.0 * (bd[jb + c] - ad[ia + c]) * w / kb as f64;
                            gb[jb + c] += d;
                            ga[ia + c] -= d;
                        }
                    }
                }
                acc(a, ga);
                acc(b, gb);
            }
        }
    }
}
