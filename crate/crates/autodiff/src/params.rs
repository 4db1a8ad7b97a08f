use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Named parameter tensors in insertion order with a flattened scalar index.
///
/// Every mutation bumps an internal generation counter so that gradient
/// records taken against an older state can be detected as stale. Clones get
/// a fresh identity.
#[derive(Debug)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    offsets: Vec<usize>,
    lookup: HashMap<String, usize>,
    total: usize,
    id: u64,
    generation: u64,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParameterStore {
    fn clone(&self) -> Self {
        ParameterStore {
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            offsets: self.offsets.clone(),
            lookup: self.lookup.clone(),
            total: self.total,
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for ParameterStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            names: Vec::new(),
            tensors: Vec::new(),
            offsets: Vec::new(),
            lookup: HashMap::new(),
            total: 0,
            id: fresh_id(),
            generation: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.offsets.push(self.total);
        self.total += tensor.len();
        self.names.push(name);
        self.tensors.push(tensor);
        self.generation += 1;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Mutable access to one tensor. Invalidates outstanding gradient records.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index_of(name)?;
        self.generation += 1;
        Ok(&mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.lookup
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.total
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor_at(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    /// Offset of tensor `index` in the flattened scalar index.
    pub fn offset_of(&self, index: usize) -> usize {
        self.offsets[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Maps a flattened scalar position back to `(tensor index, element)`.
    pub fn locate(&self, flat: usize) -> Option<(usize, usize)> {
        if flat >= self.total {
            return None;
        }
        let t = self.offsets.partition_point(|&o| o <= flat) - 1;
        Some((t, flat - self.offsets[t]))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total);
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.total {
            return Err(AutodiffError::dim(
                "set_flat",
                format!("expected {} values, got {}", self.total, values.len()),
            ));
        }
        for (t, &off) in self.tensors.iter_mut().zip(&self.offsets) {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
        }
        self.generation += 1;
        Ok(())
    }

    /// Applies `f(flat_index, value)` to every scalar in place.
    pub fn update_scalars(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        for (t, &off) in self.tensors.iter_mut().zip(&self.offsets) {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                f(off + j, v);
            }
        }
        self.generation += 1;
    }

    pub(crate) fn identity(&self) -> (u64, u64) {
        (self.id, self.generation)
    }

    /// Zero gradients aligned with this store.
    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// Per-parameter gradients aligned with a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn tensor_at(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn get(&self, store: &ParameterStore, name: &str) -> Result<&Tensor> {
        store.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
