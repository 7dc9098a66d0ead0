//! Parameterized layers built from graph ops.

use crate::diffcore::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal initialization used for
/// token-like tables (class, mask and positional embeddings).
pub const INIT_STD: f64 = 0.02;

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: ps.register(format!("{name}.weight"), &[in_dim, out_dim], Init::XavierUniform, true),
            bias: ps.register(format!("{name}.bias"), &[out_dim], Init::Zeros, false),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight)?;
        let b = g.param(ps, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Layer normalization with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.register(format!("{name}.gamma"), &[dim], Init::Ones, false),
            beta: ps.register(format!("{name}.beta"), &[dim], Init::Zeros, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layernorm(x)?;
        let gamma = g.param(ps, self.gamma)?;
        let beta = g.param(ps, self.beta)?;
        let y = g.mul(n, gamma)?;
        g.add(y, beta)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }
}

/// Multi-head attention with separate query and key/value inputs; self
/// attention passes the same tensor twice.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{name}: {heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            query: Linear::new(ps, &format!("{name}.query"), dim, dim),
            key: Linear::new(ps, &format!("{name}.key"), dim, dim),
            value: Linear::new(ps, &format!("{name}.value"), dim, dim),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim),
            heads,
        })
    }

    /// `xq: [B, Mq, D]`, `xkv: [B, Mk, D]` → `[B, Mq, D]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, xq: Var, xkv: Var) -> Result<Var> {
        let q = self.query.forward(g, ps, xq)?;
        let k = self.key.forward(g, ps, xkv)?;
        let v = self.value.forward(g, ps, xkv)?;
        let a = g.attention(q, k, v, self.heads, None)?;
        self.out.forward(g, ps, a)
    }
}
