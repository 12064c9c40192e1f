use std::ops::Index;

use super::{Gradients, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

/// Graph leaves for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape {
                op: "param_set",
                detail: format!("{:?} vs {:?}", value.shape(), self.values[id.0].shape()),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Inserts every parameter into `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<S>) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| graph.leaf(t.clone())).collect(),
        }
    }

    /// Parameter gradients in store order; zeros for unused parameters.
    pub fn collect_grads(&self, graph: &Graph<S>, bound: &Bound, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        bound.vars.iter().map(|&v| grads.wrt(graph, v)).collect()
    }

    /// Replaces all values, matching by name and shape.
    pub fn load_from(&mut self, named: Vec<(String, Tensor<S>)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is '{name}', expected '{}'",
                    self.names[i]
                )));
            }
            self.set(ParamId(i), t)?;
        }
        Ok(())
    }
}
