//! Named parameter collections and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Ordered map from parameter name to tensor. Iteration is by name, which
/// keeps serialization and optimizer state order stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkParams {
    tensors: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    /// Adds a conv-style kernel drawn from `N(0, std)` and a zero bias.
    pub(crate) fn insert_layer<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        weight_shape: &[usize],
        bias_len: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        self.insert(format!("{prefix}.w"), Tensor::randn(weight_shape, std, rng))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[bias_len]))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Records every tensor on `g`. With `track` false the leaves are
    /// constants and no gradients flow.
    pub fn bind(&self, g: &mut Graph, track: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if track { g.leaf(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a [`NetworkParams`] recorded on one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wraps handles recorded elsewhere, e.g. by a gradient checker.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    /// Moves gradients into the `grad` slot of every parameter. Parameters
    /// the loss does not reach get zero gradients.
    pub fn write_grads(&self, grads: &mut Gradients, params: &mut NetworkParams) -> Result<()> {
        for (name, v) in &self.vars {
            grads.write_into(*v, params.get_mut(name)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_tracks_grads() {
        let mut p = NetworkParams::new();
        p.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
        assert!(p.get("a").unwrap().requires_grad());
        assert!(p.get("b").is_err());
    }

    #[test]
    fn bound_gradients_flow_back() {
        let mut p = NetworkParams::new();
        p.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        p.insert("unused", Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        let x = bound.var("x").unwrap();
        let sq = g.square(x);
        let s = g.sum(sq);
        let mut grads = g.backward(s).unwrap();
        bound.write_grads(&mut grads, &mut p).unwrap();
        assert_eq!(p.get("x").unwrap().grad().unwrap(), &[2.0, 4.0]);
        assert_eq!(p.get("unused").unwrap().grad().unwrap(), &[0.0; 3]);
    }
}
