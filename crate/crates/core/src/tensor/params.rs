use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dims, Graph, NodeId};

/// A named trainable tensor. Optimizer moments live in the optimizer, keyed
/// by the parameter's position in its [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub dims: Dims,
    pub value: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, dims: Dims) -> Self {
        Self {
            name: name.into(),
            dims,
            value: vec![0.0; dims.len()],
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(name: impl Into<String>, dims: Dims, fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let value = (0..dims.len()).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            name: name.into(),
            dims,
            value,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Param) -> usize {
        let id = self.params.len();
        self.index.insert(p.name.clone(), id);
        self.params.push(p);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn values_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.iter_mut().map(|p| p.value.as_mut_slice()).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on the tape as a leaf.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), p.dims, requires_grad).expect("param dims match value"))
            .collect()
    }
}
