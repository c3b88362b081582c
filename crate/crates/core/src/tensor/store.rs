use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`ParameterStore`], used by the tape to route gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

/// Named parameter tensors with a parallel gradient buffer of identical shapes.
///
/// Entries keep insertion order, which is also the order used for checkpoints.
#[derive(Debug)]
pub struct ParameterStore {
    id: StoreId,
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl Clone for ParameterStore {
    /// Clones get a fresh identity so tapes never confuse the two.
    fn clone(&self) -> Self {
        ParameterStore {
            id: StoreId(NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)),
            names: self.names.clone(),
            index: self.index.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
        }
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            id: StoreId(NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)),
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(())
    }

    /// Inserts a weight drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.values[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.index_of(name)?;
        Ok(&mut self.values[i])
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.grads[self.index_of(name)?])
    }

    pub fn value_at(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn grad_at(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub(crate) fn grad_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.grads[i]
    }

    /// Replaces a value keeping the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self.index_of(name)?;
        if value.shape() != self.values[i].shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn grads_all_zero(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// `self <- (1 - tau) * self + tau * source`, entry by entry, matched by name.
    pub fn soft_update_from(&mut self, source: &ParameterStore, tau: f64) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = source.get(name)?;
            if src.shape() != self.values[i].shape() {
                return Err(Error::shape(format!("soft update shape mismatch on `{name}`")));
            }
            for (t, s) in self.values[i].data_mut().iter_mut().zip(src.data()) {
                *t = (1.0 - tau) * *t + tau * s;
            }
        }
        Ok(())
    }

    /// Copies every value from `source` (matched by name).
    pub fn copy_from(&mut self, source: &ParameterStore) -> Result<()> {
        self.soft_update_from(source, 1.0)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}
