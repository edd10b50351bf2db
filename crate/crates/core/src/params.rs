//! Named parameter storage and matching gradient maps.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tensor::Tensor2D;

/// All learnable parameters, addressed by name.
///
/// Insertion order is preserved and is the iteration order everywhere
/// (optimizer updates, checkpoint serialization), so runs are reproducible.
/// Shapes are fixed at insertion; only values may change afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor2D>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Rebuilds the name index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor2D) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(CoreError::ParamStore(alloc::format!(
                "duplicate parameter '{name}'"
            )));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2D> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| CoreError::ParamStore(alloc::format!("missing parameter '{name}'")))
    }

    /// Replaces the values of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor2D) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| CoreError::ParamStore(alloc::format!("missing parameter '{name}'")))?;
        if self.tensors[i].shape() != tensor.shape() {
            return Err(CoreError::ParamStore(alloc::format!(
                "shape change rejected for '{name}'"
            )));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor2D)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients with the same name->shape map as a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<String, Tensor2D>,
}

impl Gradients {
    /// One zero gradient per parameter in the store.
    pub fn zeros_like(store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(name, t)| (name.to_string(), Tensor2D::zeros(t.rows(), t.cols())))
            .collect();
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2D> {
        self.entries
            .get(name)
            .ok_or_else(|| CoreError::ParamStore(alloc::format!("missing gradient '{name}'")))
    }

    /// Adds `delta` into the gradient slot for `name`.
    pub fn accumulate(&mut self, name: &str, delta: &Tensor2D) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::ParamStore(alloc::format!("missing gradient '{name}'")))?;
        if slot.shape() != delta.shape() {
            return Err(CoreError::ParamStore(alloc::format!(
                "gradient shape mismatch for '{name}'"
            )));
        }
        for (s, d) in slot.data_mut().iter_mut().zip(delta.data()) {
            *s += d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor2D::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }
}

/// Glorot-uniform initialization: entries drawn from
/// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`.
pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor2D {
    let limit = fmath::sqrt(6.0 / (rows + cols) as f64);
    let mut t = Tensor2D::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.random_range(-limit..limit);
    }
    t
}
