//! Ordered, named parameter collections and their graph bindings.

use bbdm_tensor::{Element, Graph, Rng, Tensor, Var};
use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Named tensors in insertion order. Names are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<E: Element> {
    entries: IndexMap<String, Tensor<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        ParamStore { entries: IndexMap::new() }
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Same names and shapes in the same order.
    pub fn same_layout<F: Element>(&self, other: &ParamStore<F>) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// Bind every tensor into `g`, as trainable leaves or as constants.
    pub fn bind<'g>(&self, g: &'g Graph<E>, trainable: bool) -> Bound<'g, E> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Kaiming-normal tensor with std `sqrt(2 / fan_in)`, drawn from a stream
    /// forked by `name` so unrelated parameters do not shift each other.
    pub fn insert_kaiming(&mut self, rng: &Rng, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let std = (2.0 / fan_in as f64).sqrt();
        let mut r = rng.fork(name);
        let n = shape.iter().product::<usize>();
        let data = (0..n).map(|_| E::from_f64_lossy(std * r.normal())).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }
}

/// Graph variables for a [`ParamStore`], looked up by name.
#[derive(Debug, Clone)]
pub struct Bound<'g, E: Element> {
    vars: IndexMap<String, Var<'g, E>>,
}

impl<'g, E: Element> Bound<'g, E> {
    /// Pair `store`'s names, in order, with caller-made variables.
    pub fn from_vars(store: &ParamStore<E>, vars: &[Var<'g, E>]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::invalid(format!("{} variables for {} parameters", vars.len(), store.len())));
        }
        for ((name, t), v) in store.iter().zip(vars) {
            if v.shape() != t.shape() {
                return Err(Error::invalid(format!("{name}: variable shape {:?}, expected {:?}", v.shape(), t.shape())));
            }
        }
        Ok(Bound { vars: store.names().map(String::from).zip(vars.iter().copied()).collect() })
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, E>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g, E>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
