//! Named parameter storage and binding of parameters onto a tape.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// All parameters of a model, keyed by dotted path and iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Query(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Query(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Element count of every tensor whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn total_numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// A tape plus the parameters bound to it.
///
/// Parameters are placed on the tape on first use, so parameters that a
/// forward pass never touches (unselected experts, skipped blocks) get no
/// gradient at all.
pub struct Ctx<'p> {
    pub tape: Tape,
    params: &'p Params,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'p> Ctx<'p> {
    /// Context whose parameters receive gradients.
    pub fn train(params: &'p Params) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Context for inference; no parameter requires a gradient.
    pub fn eval(params: &'p Params) -> Self {
        Self {
            trainable: false,
            ..Self::train(params)
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = self.tape.leaf(value, self.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Names of parameters that were used by the forward pass.
    pub fn touched(&self) -> BTreeSet<String> {
        self.bound.keys().cloned().collect()
    }

    /// Gradient of every bound parameter that received one.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.tape.grad(v).map(|g| (k.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unused_parameters_get_no_gradient() {
        let mut params = Params::new();
        params.insert("a", Tensor::vector(alloc::vec![1.0, 2.0]));
        params.insert("b", Tensor::vector(alloc::vec![3.0]));
        let mut ctx = Ctx::train(&params);
        let a = ctx.p("a").unwrap();
        let again = ctx.p("a").unwrap();
        assert_eq!(a, again);
        let s = ctx.tape.sum(a).unwrap();
        ctx.backward(s).unwrap();
        let grads = ctx.grads();
        assert!(grads.contains_key("a"));
        assert!(!grads.contains_key("b"));
        assert!(ctx.p("missing").is_err());
    }
}
