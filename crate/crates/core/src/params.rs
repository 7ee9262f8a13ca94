//! Named parameter storage.
//!
//! Parameters persist across training steps as plain arrays; each forward
//! pass binds them into a fresh [`Graph`] as leaf tensors. Entry order is
//! insertion order and is the canonical ordering for optimizer state and
//! checkpoints.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::contract(format!(
                "parameter {name}: shape {shape:?} implies {expect} values, got {}",
                data.len()
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            shape,
            data,
            trainable,
        });
        Ok(())
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across trainable entries.
    pub fn trainable_size(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.data.len())
            .sum()
    }

    /// Instantiates every parameter as a leaf in `graph`.
    ///
    /// With `with_grad = false` the leaves are constants, which disables all
    /// gradient bookkeeping for evaluation passes.
    pub fn bind(&self, graph: &Graph, with_grad: bool) -> Result<BoundParams> {
        let mut tensors = HashMap::with_capacity(self.entries.len());
        let mut order = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let t = graph.leaf(
                entry.data.clone(),
                &entry.shape,
                with_grad && entry.trainable,
            )?;
            tensors.insert(entry.name.clone(), t);
            order.push(entry.name.clone());
        }
        Ok(BoundParams { tensors, order })
    }
}

/// The leaf tensors of one graph instantiation of a [`ParamStore`].
pub struct BoundParams {
    tensors: HashMap<String, Tensor>,
    order: Vec<String>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::contract(format!("unbound parameter {name}")))
    }

    /// Gradients in canonical entry order (None where backward never reached).
    pub fn grads(&self) -> Vec<(String, Option<Vec<f64>>)> {
        self.order
            .iter()
            .map(|name| (name.clone(), self.tensors[name].grad()))
            .collect()
    }
}
