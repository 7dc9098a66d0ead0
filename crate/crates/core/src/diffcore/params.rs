use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization rule for a freshly registered parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) truncated to two standard deviations.
    TruncNormal(f64),
    /// Glorot uniform over a `[fan_in, fan_out]` matrix:
    /// `U(±sqrt(6 / (fan_in + fan_out)))`.
    XavierUniform,
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    /// Subject to decoupled weight decay.
    pub decay: bool,
    value: Option<Tensor>,
    grad: Option<Tensor>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn value(&self) -> Result<&Tensor> {
        self.value.as_ref().ok_or(Error::Unmaterialized("reading a parameter"))
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Named parameter collection.
///
/// A store built with [`ParamStore::layout`] records names and shapes only; it
/// is used to count parameters of configurations too large to allocate.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    materialized: bool,
    rng: Option<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            params: Vec::new(),
            materialized: true,
            rng: Some(rng),
        }
    }

    pub fn layout() -> Self {
        Self {
            params: Vec::new(),
            materialized: false,
            rng: None,
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.materialized
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let value = self.rng.as_mut().map(|rng| {
            let numel: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::XavierUniform => {
                    let fans: usize = shape.iter().rev().take(2).sum();
                    let a = (6.0 / fans.max(1) as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-a..=a)).collect()
                }
                Init::TruncNormal(std) => {
                    let normal = Normal::new(0.0, 1.0).expect("unit normal");
                    (0..numel)
                        .map(|_| loop {
                            let z: f64 = normal.sample(rng);
                            if z.abs() <= 2.0 {
                                break z * std;
                            }
                        })
                        .collect()
                }
            };
            Tensor::from_parts(shape.to_vec(), data)
        });
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            decay,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> Result<&Tensor> {
        self.params[id.0].value()
    }

    pub fn value_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        self.params[id.0].value.as_mut().ok_or(Error::Unmaterialized("writing a parameter"))
    }

    /// Replace a parameter's value; the shape must match the registration.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.shape.as_slice() {
            return Err(Error::shape("set_value", &p.shape, value.shape()));
        }
        p.value = Some(value);
        self.materialized = self.params.iter().all(|p| p.value.is_some());
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add `grad` into the accumulator of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.shape.as_slice() {
            return Err(Error::shape("accumulate_grad", &p.shape, grad.shape()));
        }
        match &mut p.grad {
            Some(acc) => {
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += g;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Total element count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(Param::numel).sum()
    }

    /// Draw a fresh u64 from the initialization stream (used by tests to
    /// perturb weights reproducibly).
    pub fn next_seed(&mut self) -> u64 {
        self.rng.as_mut().map(|r| r.gen()).unwrap_or(0)
    }
}
