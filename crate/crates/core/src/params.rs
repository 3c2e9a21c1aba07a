//! Named parameter storage and its binding onto a [`Tape`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Adds every parameter to `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Contract(format!("parameter `{name}` is not bound")))
    }

    /// Pulls per-parameter gradients out of a backward result. Parameters the
    /// loss does not depend on receive no entry.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Glorot-uniform initialization for a `fan_in×fan_out` weight.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}
