//! Named parameter storage and its binding onto a tape.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter gradient, keyed like the [`ParamStore`] it came from.
pub type GradientRecord = IndexMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal(f64),
}

impl Init {
    pub fn sample(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
            }
        }
    }
}

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    /// Total number of scalars held.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a differentiable leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect(),
        }
    }
}

/// Parameters recorded on a tape.
pub struct BoundParams<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Pairs names with vars already on a tape.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var<'t>]) -> Self {
        BoundParams { vars: names.into_iter().zip(vars.iter().copied()).collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn opt(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    /// Extracts one gradient per bound parameter (zeros when disconnected).
    pub fn gradients(&self, grads: &Gradients) -> GradientRecord {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.get(v))).collect()
    }
}
