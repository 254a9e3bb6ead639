use std::borrow::Cow;
use std::collections::HashMap;

use super::graph::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors, kept in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter `{name}` registered twice"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
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

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in other.names.iter().zip(&other.values) {
            let id = self
                .lookup(name)
                .ok_or_else(|| Error::invalid("load_params", format!("unknown parameter `{name}`")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::shape("load_params", self.values[id.0].shape(), value.shape()));
            }
            self.values[id.0] = value.clone();
        }
        if other.len() != self.len() {
            return Err(Error::invalid(
                "load_params",
                format!("checkpoint has {} parameters, model has {}", other.len(), self.len()),
            ));
        }
        Ok(())
    }
}

/// Result of a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Vec<f64>>,
    vars: HashMap<Var, Vec<f64>>,
    pub(crate) visited: usize,
}

impl Gradients {
    pub(crate) fn accumulate(&mut self, id: ParamId, g: Vec<f64>) {
        self.params.insert(id, g);
    }

    pub(crate) fn accumulate_var(&mut self, v: Var, g: Vec<f64>) {
        self.vars.insert(v, g);
    }

    /// Gradient of a parameter; zeros when the parameter did not influence the root.
    pub fn param<'a>(&'a self, store: &ParamStore, id: ParamId) -> Cow<'a, [f64]> {
        match self.params.get(&id) {
            Some(g) => Cow::Borrowed(g),
            None => Cow::Owned(vec![0.0; store.get(id).numel()]),
        }
    }

    /// Sets a parameter gradient directly, replacing any existing one.
    pub fn insert(&mut self, id: ParamId, grad: Vec<f64>) {
        self.params.insert(id, grad);
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }

    pub fn has_param(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }

    /// Gradient of a free variable leaf created with [`super::Graph::variable`].
    pub fn var(&self, v: Var) -> Option<&[f64]> {
        self.vars.get(&v).map(Vec::as_slice)
    }
}
