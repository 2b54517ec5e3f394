use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors. Iteration order is the sorted name order, which
/// makes checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for every parameter of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor as a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, t.into_param());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-tracking leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t)))
            .collect();
        Bindings { vars }
    }

    /// Records every parameter as a constant (no gradient tracking).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let c = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
                (k.clone(), tape.constant(c))
            })
            .collect();
        Bindings { vars }
    }

    /// Adds the leaf gradients collected on `tape` into each parameter's
    /// accumulator.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for (name, var) in bindings.iter() {
            if let (Some(t), Some(g)) = (self.tensors.get_mut(name), tape.grad(var)) {
                let acc = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Names present in `self` but not `other`, and vice versa.
    pub fn name_diff(&self, other: &ModelParams) -> (Vec<String>, Vec<String>) {
        let missing = self
            .tensors
            .keys()
            .filter(|k| !other.tensors.contains_key(*k))
            .cloned()
            .collect();
        let extra = other
            .tensors
            .keys()
            .filter(|k| !self.tensors.contains_key(*k))
            .cloned()
            .collect();
        (missing, extra)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn grads_flow_back_into_store() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let w = b.get("w").unwrap();
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        p.accumulate_grads(&tape, &b);
        assert_eq!(p.get("w").unwrap().grad.as_deref(), Some(&[1.0, 1.0][..]));
        p.zero_grads();
        assert_eq!(p.get("w").unwrap().grad.as_deref(), Some(&[0.0, 0.0][..]));
    }
}
