use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tape::{Gradients, NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named model tensors. Trainable parameters and non-trainable buffers
/// (batch-norm running statistics) are kept apart; both iterate in name
/// order so everything derived from a store is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

/// Tape handles for the parameters of one store.
#[derive(Debug, Default)]
pub struct Bindings {
    ids: BTreeMap<String, NodeId>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(
            name,
            Tensor::new(shape.to_vec(), data).expect("valid shape"),
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown buffer `{name}`")))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter on the tape, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bindings> {
        let mut ids = BTreeMap::new();
        for (name, value) in &self.params {
            let id = if trainable {
                tape.leaf(value.clone())?
            } else {
                tape.constant(value.clone())?
            };
            ids.insert(name.clone(), id);
        }
        Ok(Bindings { ids })
    }

    /// Collects the gradient of every parameter; parameters the loss does
    /// not touch get zeros.
    pub fn collect_grads(
        &self,
        bindings: &Bindings,
        grads: &Gradients,
    ) -> BTreeMap<String, Tensor> {
        bindings
            .iter()
            .map(|(name, &id)| (name.clone(), grads.get(id)))
            .collect()
    }

    /// SHA-256 over names, shapes and values of parameters and buffers.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (tag, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, t) in map {
                h.update(tag.as_bytes());
                h.update(name.as_bytes());
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}
