use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors with matching gradient slots.
///
/// Iteration order is the lexicographic order of names, which keeps
/// serialization and optimizer updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    slots: BTreeMap<String, Slot>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            bail!(Contract, "duplicate parameter name `{name}`");
        }
        let grad = Tensor::zeros(value.dims());
        self.slots.insert(name, Slot { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        match self.slots.get(name) {
            Some(s) => Ok(&s.value),
            None => bail!(Contract, "missing parameter `{name}`"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.slots.get_mut(name) {
            Some(s) => Ok(&mut s.value),
            None => bail!(Contract, "missing parameter `{name}`"),
        }
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        match self.slots.get(name) {
            Some(s) => Ok(&s.grad),
            None => bail!(Contract, "missing parameter `{name}`"),
        }
    }

    pub(crate) fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let Some(slot) = self.slots.get_mut(name) else {
            bail!(Contract, "missing parameter `{name}`");
        };
        if grad.dims() != slot.value.dims() {
            bail!(
                Shape,
                "gradient for `{name}` has dims {:?}, expected {:?}",
                grad.dims(),
                slot.value.dims()
            );
        }
        slot.grad = grad;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.values_mut() {
            s.grad.fill(0.0);
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub(crate) fn iter_mut_with_grad(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.slots
            .iter_mut()
            .map(|(k, s)| (k.as_str(), &mut s.value, &s.grad))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Copy of the set with every name prefixed by `prefix`.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        let slots = self
            .slots
            .iter()
            .map(|(k, s)| (format!("{prefix}{k}"), s.clone()))
            .collect();
        ParamSet { slots }
    }

    /// Values only, for bit-level comparisons and checksums.
    pub fn fingerprint(&self) -> Vec<(String, Vec<u64>)> {
        self.slots
            .iter()
            .map(|(k, s)| {
                (
                    k.clone(),
                    s.value.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }
}
