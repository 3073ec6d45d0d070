//! Named parameter storage split into weight and architecture partitions.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimisation problem a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Ordinary network weights, fitted on the training split.
    Weight,
    /// Operation-mixture logits, fitted on the validation split.
    Arch,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(true);
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_of(&self, kind: ParamKind) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.kind == kind)
            .map(|(i, _)| ParamId(i))
    }

    /// Total scalar count of one partition.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Restricts gradient tracking to one partition (`None` tracks all).
    pub fn set_trainable(&mut self, kind: Option<ParamKind>) {
        for e in &mut self.entries {
            e.tensor.set_requires_grad(kind.is_none_or(|k| k == e.kind));
        }
    }

    /// L2 norm of the accumulated gradients of one partition.
    pub fn grad_norm(&self, kind: ParamKind) -> f64 {
        let s: f64 = self
            .entries
            .iter()
            .filter(|e| e.kind == kind)
            .filter_map(|e| e.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum();
        libm::sqrt(s)
    }

    pub(crate) fn fill_missing_grads(&mut self) {
        for e in &mut self.entries {
            if e.tensor.requires_grad() && e.tensor.grad().is_none() {
                let z = alloc::vec![0.0; e.tensor.numel()];
                e.tensor.accumulate_grad(&z).expect("same length");
            }
        }
    }
}

/// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Standard normal draws scaled by `std`.
pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let mut data = Vec::with_capacity(numel(shape));
    for _ in 0..numel(shape) {
        let z: f64 = StandardNormal.sample(rng);
        data.push(z * std);
    }
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}
