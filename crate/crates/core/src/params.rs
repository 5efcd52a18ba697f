//! Named learnable tensors and their binding onto a [`Graph`].

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter. Only [`ParamKind::Weight`] tensors are L2-regularized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

/// Flat, ordered collection of parameters. Insertion order is stable and
/// defines both checkpoint layout and optimizer slot layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.kinds.push(kind);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a weight drawn from `uniform(-bound, bound)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, ParamKind::Weight, Tensor::from_parts(shape.to_vec(), data))
    }

    /// Adds a weight with Glorot-uniform initialization.
    pub fn add_glorot<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.add_uniform(name, &[rows, cols], bound, rng)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::dim("param set", self.tensors[id.0].shape(), value.shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        Binding(
            self.tensors
                .iter()
                .map(|t| g.leaf(t.clone(), trainable))
                .collect(),
        )
    }
}

/// Graph handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding(Vec<Var>);

impl Binding {
    /// Wraps handles already on a graph, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients of every bound parameter after `g.backward`.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.0.iter().map(|&v| g.grad_or_zeros(v)).collect()
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_binds_in_insertion_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add_glorot("w", 3, 4, &mut rng);
        let b = store.add("b", ParamKind::Bias, Tensor::zeros(&[4]));
        assert_eq!(store.num_elements(), 16);
        assert_eq!(store.find("b"), Some(b));
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(store.get(w).data().iter().all(|x| x.abs() <= bound));

        let mut g = Graph::new();
        let binding = store.bind(&mut g, true);
        assert_eq!(g.shape(binding[w]), &[3, 4]);
        assert!(g.requires_grad(binding[b]));
    }

    #[test]
    fn set_keeps_shape() {
        let mut store = ParamStore::new();
        let b = store.add("b", ParamKind::Bias, Tensor::zeros(&[2]));
        assert!(store.set(b, Tensor::zeros(&[3])).is_err());
        store.set(b, Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
    }
}
