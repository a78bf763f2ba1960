//! Named parameter storage and the per-pass binding of parameters to a graph.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Trainable tensors plus non-trainable buffers (batch-norm running stats),
/// both keyed by dotted names such as `enc.layers.0.ffn1.w1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Trainable scalars under a name prefix.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Moves every parameter and buffer of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    /// Copies all entries sharing `prefix` from `other`, replacing existing
    /// ones.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for (k, v) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params.insert(k.clone(), v.clone());
            n += 1;
        }
        for (k, v) in other.buffers.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.buffers.insert(k.clone(), v.clone());
        }
        n
    }

    pub(crate) fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }
}

/// Weight initializers. All draw from the caller's rng so initialization is a
/// pure function of the seed.
pub mod init {
    use super::*;

    /// Xavier/Glorot uniform: `U(±sqrt(6 / (fan_in + fan_out)))`.
    pub fn xavier_uniform(
        rng: &mut ChaCha8Rng,
        shape: impl Into<Vec<usize>>,
        fan_in: usize,
        fan_out: usize,
    ) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(rng, shape, bound)
    }

    pub fn uniform(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor {
        let shape = shape.into();
        if bound == 0.0 {
            return Tensor::zeros(shape);
        }
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    pub fn normal(rng: &mut ChaCha8Rng, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }
}

/// One forward pass: binds stored parameters to graph leaves on first use,
/// carries the train/eval switch and the dropout rng, and collects buffer
/// updates (batch-norm running statistics) produced by the pass.
pub struct Session<'a> {
    pub graph: &'a Graph,
    store: &'a ParamStore,
    training: bool,
    frozen: Vec<String>,
    bound: RefCell<BTreeMap<String, Var>>,
    buffer_updates: RefCell<Vec<(String, Tensor)>>,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> Session<'a> {
    pub fn new(graph: &'a Graph, store: &'a ParamStore, training: bool, rng: ChaCha8Rng) -> Self {
        Self {
            graph,
            store,
            training,
            frozen: Vec::new(),
            bound: RefCell::new(BTreeMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
            rng: RefCell::new(rng),
        }
    }

    /// Evaluation-mode session on a fresh rng (dropout is disabled in this
    /// mode, so the rng only serves random pooling).
    pub fn eval(graph: &'a Graph, store: &'a ParamStore, rng: ChaCha8Rng) -> Self {
        Self::new(graph, store, false, rng)
    }

    /// Parameters under `prefix` enter the graph as constants.
    pub fn freeze_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.frozen.push(prefix.into());
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            self.graph.constant(value)
        } else {
            self.graph.param(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.store.buffer(name)
    }

    pub(crate) fn queue_buffer_update(&self, name: String, value: Tensor) {
        self.buffer_updates.borrow_mut().push((name, value));
    }

    /// Inverted dropout; identity outside training or for `p == 0`.
    pub fn dropout(&self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let shape = self.graph.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mut rng = self.rng.borrow_mut();
        let mask = Tensor::from_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        let m = self.graph.constant(mask);
        self.graph.mul(x, m)
    }

    pub fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }

    /// Gradients for every bound, non-frozen parameter, keyed by name.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect()
    }

    /// Buffer updates recorded during the pass, to be applied with
    /// [`apply_buffer_updates`].
    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }
}

pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(String, Tensor)>) {
    for (k, v) in updates {
        store.set_buffer(&k, v);
    }
}
