use rand::Rng;
use std::collections::BTreeMap;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Index of a trainable array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, named storage for every trainable array of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Xavier-uniform initialised `fan_in × fan_out` matrix.
    pub fn insert_xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.insert(name, Tensor2::from_vec(fan_in, fan_out, data).unwrap())
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor2)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor2::len).sum()
    }

    /// Replaces every array from `other`, which must carry the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter names differ".into()));
        }
        for (i, (dst, src)) in self.tensors.iter_mut().zip(&other.tensors).enumerate() {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.clone_from(src);
        }
        Ok(())
    }
}

/// Gradients keyed by parameter. Only parameters reachable from the loss appear.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor2>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor2> {
        self.map.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub(crate) fn insert(&mut self, id: ParamId, grad: Tensor2) {
        match self.map.get_mut(&id) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.map.insert(id, grad);
            }
        }
    }

    /// Adds `other` into `self` (used for gradient accumulation).
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.map {
            self.insert(id, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}
