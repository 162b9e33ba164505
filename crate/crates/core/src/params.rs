//! Named parameter storage and per-graph binding.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tokentrack_tensor::{Graph, Tensor, Var};

/// Optimizer parameter group. The backbone trains at its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    groups: Vec<ParamGroup>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.groups.push(group);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.ids().map(move |id| (id, self.name(id), self.get(id)))
    }
}

/// Parameter initializers. Weights draw from `U(−1/√fan_in, 1/√fan_in)`.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn weight(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(name, group, &[fan_in, fan_out], bound)
    }

    pub fn uniform(&mut self, name: &str, group: ParamGroup, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store.add(name, group, Tensor::from_vec(shape.to_vec(), data))
    }

    pub fn constant(&mut self, name: &str, group: ParamGroup, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, group, Tensor::full(shape.to_vec(), value))
    }

    pub fn tensor(&mut self, name: &str, group: ParamGroup, t: Tensor) -> ParamId {
        self.store.add(name, group, t)
    }
}

/// A graph plus lazily bound parameters. Each parameter becomes one leaf the
/// first time it is used.
pub struct Bound<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Bound<'a> {
    /// Parameters are gradient-receiving leaves.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    /// Parameters are constants; nothing will be differentiated.
    pub fn infer(store: &'a ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients for every bound parameter after `g.backward`. Unused
    /// parameters get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.store
            .ids()
            .map(|id| {
                self.vars[id.0]
                    .and_then(|v| self.g.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape().to_vec()))
            })
            .collect()
    }
}
