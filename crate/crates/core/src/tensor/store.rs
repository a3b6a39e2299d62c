use std::collections::BTreeMap;

use rand::Rng;

use super::{Graph, Tensor};
use crate::error::{IvtError, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Uniform in [-1/√fan_in, 1/√fan_in].
    pub fn init_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, -bound, bound, rng));
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::ones(shape));
    }

    /// Zeroes every parameter whose name matches `pred`.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.entries.iter_mut() {
            if pred(name) {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Copies gradients of bound parameters out of a graph after backward.
    /// Parameters that were not used receive zero gradients.
    pub fn collect_grads(&mut self, graph: &Graph) {
        for t in self.entries.values_mut() {
            let n = t.numel();
            t.set_grad(vec![0.0; n]).expect("fresh gradient has matching length");
        }
        for (name, v) in graph.bound_params() {
            if let (Some(t), Some(g)) = (self.entries.get_mut(name), graph.grad(v)) {
                t.set_grad(g.to_vec()).expect("gradient length matches parameter");
            }
        }
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::clear_grad);
    }

    /// Checks that `other` holds the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => return Err(IvtError::config(format!("missing parameter '{name}'"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(IvtError::Shape {
                        op: "parameter",
                        lhs: t.shape().to_vec(),
                        rhs: o.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(IvtError::config(format!("unexpected parameter '{extra}'")));
        }
        Ok(())
    }

    /// Bitwise equality of all values (gradients ignored).
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}
