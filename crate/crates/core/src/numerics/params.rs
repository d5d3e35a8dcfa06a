use std::collections::BTreeMap;

use rand::Rng as _;

use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{FlapError, Result};

/// Named trainable tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| FlapError::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| FlapError::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Uniform Glorot initialisation for a `[fan_in, fan_out]` weight.
    pub fn init_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-limit..limit));
        self.insert(name, t);
    }

    /// Uniform values with standard deviation `std`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) {
        let limit = std * 3f64.sqrt();
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit));
        self.insert(name, t);
    }
}

/// Graph leaves for a [`ParamStore`], keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| FlapError::Checkpoint(format!("parameter {name} is not bound")))
    }

    /// Rebinds `name` to another node, e.g. a leaf under gradient check.
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients after `g.backward`; parameters the loss never touched get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let grad = g
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()]);
                (k.clone(), grad)
            })
            .collect()
    }
}
