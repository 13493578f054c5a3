//! Named parameter storage with gradient slots and checkpoint I/O.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{BlobData, Container};
use crate::error::{GradError, Result};
use crate::real::{Precision, Real};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OFERCKPT";

#[derive(Clone, Debug)]
struct Slot<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// Parameters keyed by unique name, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    slots: BTreeMap<String, Slot<T>>,
    grads_ready: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    precision: Precision,
    extra: serde_json::Value,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            slots: BTreeMap::new(),
            grads_ready: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(GradError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.slots.insert(name, Slot { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))?;
        if slot.grad.shape() != grad.shape() {
            return Err(GradError::shape(
                "accumulate_grad",
                format!("{name}: {:?} vs {:?}", slot.grad.shape(), grad.shape()),
            ));
        }
        slot.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
        self.grads_ready = false;
    }

    /// Sum of squared gradient entries over all parameters.
    pub fn grad_norm(&self) -> f64 {
        self.slots
            .values()
            .flat_map(|s| s.grad.data())
            .map(|g| g.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn slots_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &Tensor<T>)> {
        self.slots
            .iter_mut()
            .map(|(k, s)| (k.as_str(), &mut s.value, &s.grad))
    }

    pub fn to_container(&self, extra: serde_json::Value) -> Result<Container> {
        let meta = CheckpointMeta {
            precision: T::PRECISION,
            extra,
        };
        let mut c = Container::new(serde_json::to_value(meta)?);
        for (name, slot) in &self.slots {
            let data = match T::PRECISION {
                Precision::F32 => BlobData::F32(
                    slot.value
                        .data()
                        .iter()
                        .map(|v| v.as_f64() as f32)
                        .collect(),
                ),
                Precision::F64 => BlobData::F64(slot.value.to_f64()),
            };
            c.push(name.clone(), slot.value.shape().to_vec(), data);
        }
        Ok(c)
    }

    /// Rebuilds a store from a checkpoint container, returning its `extra` metadata.
    pub fn from_container(c: &Container) -> Result<(Self, serde_json::Value)> {
        let meta: CheckpointMeta = serde_json::from_value(c.extra.clone())?;
        if meta.precision != T::PRECISION {
            return Err(GradError::Precision {
                stored: meta.precision.to_string(),
                requested: T::PRECISION.to_string(),
            });
        }
        let mut store = ParamStore::new();
        for blob in &c.blobs {
            let values: Vec<T> = match &blob.data {
                BlobData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
                BlobData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
                _ => {
                    return Err(GradError::Container(format!(
                        "`{}` is not a float blob",
                        blob.name
                    )))
                }
            };
            store.insert(blob.name.clone(), Tensor::new(blob.shape.clone(), values)?)?;
        }
        Ok((store, meta.extra))
    }

    pub fn to_bytes(&self, extra: serde_json::Value) -> Result<Vec<u8>> {
        self.to_container(extra)?.to_bytes(CHECKPOINT_MAGIC)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        Self::from_container(&Container::from_bytes(CHECKPOINT_MAGIC, bytes)?)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_bytes(extra)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
