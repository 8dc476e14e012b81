use std::collections::HashMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles supplied by the caller, one per store parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn at(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn set_value(&mut self, i: usize, value: Tensor) -> Result<()> {
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "set_value",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    /// Sets the flag on every parameter whose name satisfies `select`.
    pub fn set_trainable_where(&mut self, select: impl Fn(&str) -> bool, trainable: bool) {
        self.params
            .iter_mut()
            .filter(|p| select(&p.name))
            .for_each(|p| p.trainable = trainable);
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Places every parameter in `g`; trainable ones become gradient leaves
    /// when `track` is set.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), track && p.trainable))
            .collect();
        Bound { vars }
    }

    /// Per-parameter gradient, zeros where nothing flowed. Names follow store order.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| (p.name.clone(), grads.get_or_zeros(v, p.value.shape())))
            .collect()
    }
}
