//! Parameter storage.
//!
//! Every learned component owns a [`ParamStore`]: an ordered list of named
//! [`ParamTensor`]s. Stores carry a process-unique id so that a single tape can
//! mix parameters of several stores (e.g. a concept model and a realigner) and
//! route gradients back to the right owner.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_store_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// A dense parameter with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TensorRepr")]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

#[derive(Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl From<TensorRepr> for ParamTensor {
    fn from(r: TensorRepr) -> Self {
        Self {
            grad: vec![0.0; r.values.len()],
            shape: r.shape,
            values: r.values,
        }
    }
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape("ParamTensor::from_values", &[n], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ParamTensor::from_values"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
        })
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` for a `[out, in]` matrix.
    pub fn glorot(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let values = (0..out_dim * in_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            shape: vec![out_dim, in_dim],
            grad: vec![0.0; out_dim * in_dim],
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Stable handle to one tensor of one store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub store: u64,
    pub index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamStore {
    #[serde(skip, default = "fresh_store_id")]
    id: u64,
    names: Vec<String>,
    tensors: Vec<ParamTensor>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: fresh_store_id(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape && a.values == b.values)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: fresh_store_id(),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ParamTensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn param_ref(&self, index: usize) -> ParamRef {
        ParamRef { store: self.id, index }
    }

    pub fn get(&self, index: usize) -> &ParamTensor {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut ParamTensor {
        &mut self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(ParamTensor::zero_grad);
    }

    /// Adds every gradient in `grads` that belongs to this store.
    pub fn accumulate(&mut self, grads: &super::tape::Grads) {
        for (r, g) in grads.iter() {
            if r.store != self.id {
                continue;
            }
            let t = &mut self.tensors[r.index];
            for (a, b) in t.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copies parameter values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape(
                "ParamStore::copy_values_from",
                &[self.tensors.len()],
                &[other.tensors.len()],
            ));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape != b.shape {
                return Err(Error::shape("ParamStore::copy_values_from", &a.shape, &b.shape));
            }
            a.values.copy_from_slice(&b.values);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.tensors.len() {
            return Err(Error::Invalid("checkpoint names/tensors length mismatch".into()));
        }
        for t in &self.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.values.len() {
                return Err(Error::shape("checkpoint tensor", &[n], &[t.values.len()]));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("checkpoint tensor"));
            }
        }
        Ok(())
    }
}
