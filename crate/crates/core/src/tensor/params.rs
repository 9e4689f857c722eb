use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    /// Registers a parameter and returns its position.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.entries.insert_full(name.into(), value).0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn by_index(&self, i: usize) -> &Tensor<T> {
        &self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.values_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Replaces every value from `other`, which must carry identical names and shapes.
    pub fn assign(&mut self, other: Vec<(String, Tensor<T>)>) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Mismatch(format!(
                "expected {} parameters, found {}",
                self.entries.len(),
                other.len()
            )));
        }
        for (name, value) in other {
            let slot = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::Mismatch(format!("unknown parameter {name}")))?;
            if slot.shape() != value.shape() {
                return Err(Error::Mismatch(format!(
                    "parameter {name}: shape {:?} vs stored {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }
}
