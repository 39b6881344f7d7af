use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Scalar, Tensor};
use crate::error::{invalid, Result};

/// Handle of a named parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid(format!("duplicate parameter name {name}"));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push((name, value));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return invalid(format!(
                "parameter count mismatch: have {}, got {}",
                self.len(),
                other.len()
            ));
        }
        for (name, value) in other.iter() {
            let Some(id) = self.id(name) else {
                return invalid(format!("unknown parameter {name}"));
            };
            let slot = self.get_mut(id);
            if slot.shape() != value.shape() {
                return crate::error::shape_err("load parameter", slot.shape(), value.shape());
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

/// Creates parameters under a dotted name prefix with seeded initialisation.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let t = Tensor::full(shape.to_vec(), T::of(value));
        self.store.insert(self.full_name(name), t)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.gen_range(-bound..=bound)))
            .collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        self.store.insert(self.full_name(name), t)
    }

    /// Glorot-uniform weight for an affine map stored as `[fan_in, fan_out]`.
    pub fn linear_weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], bound)
    }

    /// He-uniform convolution weight `[out, in, k, k]`.
    pub fn conv_weight(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<ParamId> {
        let fan_in = c_in * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        self.uniform(name, &[c_out, c_in, k, k], bound)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

/// SGD with momentum and L2 weight decay (decay folded into the gradient).
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update with accumulated gradients scaled by `grad_scale`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], grad_scale: f64) {
        if self.velocity.is_empty() {
            self.velocity = store.entries.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        }
        let (lr, mu, wd, s) = (
            T::of(self.lr),
            T::of(self.momentum),
            T::of(self.weight_decay),
            T::of(grad_scale),
        );
        for (((_, param), grad), vel) in store.entries.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in param.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                let d = g * s + wd * *p;
                *v = mu * *v + d;
                *p -= lr * *v;
            }
        }
    }
}

/// Per-parameter gradient accumulator matching a store's layout.
pub(crate) fn zero_grads<T: Scalar>(store: &ParamStore<T>) -> Vec<Vec<T>> {
    store.entries.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect()
}

impl<T: Scalar> Gradients<T> {
    /// Adds this graph's parameter gradients into `acc` (indexed by [`ParamId`]).
    pub fn accumulate_params(&self, acc: &mut [Vec<T>]) {
        for (id, var) in self.param_vars() {
            if let Some(g) = self.wrt(var) {
                for (a, &b) in acc[id.0].iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        zero_grads(self)
    }
}
