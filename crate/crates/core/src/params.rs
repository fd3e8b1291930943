//! Named parameter storage, decoupled from any single graph.
//!
//! Parameters live in a [`ParamStore`] between passes. Each forward pass
//! binds them into a fresh [`Graph`] (as leaves when training, as constants
//! when evaluating), and gradients are read back through the same binding.

use crate::graph::{Graph, Var};
use crate::rng::SplitMix;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Xavier-uniform initialized parameter.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut SplitMix,
    ) -> ParamId {
        let t = Tensor::uniform(shape, xavier_bound(fan_in, fan_out), rng);
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar count over a contiguous id range, e.g. one sub-model.
    pub fn scalar_count_in(&self, ids: std::ops::Range<usize>) -> usize {
        self.values[ids].iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.values.iter().map(|v| g.leaf(v.clone())).collect() }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.values.iter().map(|v| g.constant(v.clone())).collect() }
    }

    /// Gradients of every parameter after `g.backward`; zeros where none flowed.
    pub fn gradients(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, var)| g.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }

    /// `p -= step * grad` for every parameter.
    pub fn descend(&mut self, grads: &[Tensor], step: f64) {
        for (p, gr) in self.values.iter_mut().zip(grads) {
            p.add_scaled(gr, -step);
        }
    }
}

/// Graph handles for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles for a store's parameters in id order, e.g. leaves created by
    /// a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
