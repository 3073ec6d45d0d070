//! First-order parameter updates.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// `theta <- theta - lr * grad` for every tensor. Gradients are left in
/// place; clear them with [`Tensor::zero_grad`].
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.iter().any(|p| p.grad().is_none()) {
        return Err(Error::MissingGradient("tensor".into()));
    }
    for p in params {
        let g = p.grad().expect("checked").to_vec();
        p.data_mut().iter_mut().zip(&g).for_each(|(v, g)| *v -= lr * g);
    }
    Ok(())
}

/// Moment estimates for one tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment update of a single tensor.
pub fn adaptive_step(p: &mut Tensor, lr: f64, state: &mut AdamMoments, hp: AdamParams) -> Result<()> {
    let g = p
        .grad()
        .ok_or_else(|| Error::MissingGradient("tensor".into()))?
        .to_vec();
    if state.m.len() != g.len() {
        state.m = vec![0.0; g.len()];
        state.v = vec![0.0; g.len()];
        state.t = 0;
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(hp.beta1, t as f64);
    let c2 = 1.0 - libm::pow(hp.beta2, t as f64);
    for (i, v) in p.data_mut().iter_mut().enumerate() {
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g[i];
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        *v -= lr * mh / (libm::sqrt(vh) + hp.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    #[default]
    Sgd,
    Adam,
}

/// Optimiser bound to one partition of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    partition: ParamKind,
    lr: f64,
    adam: AdamParams,
    moments: BTreeMap<ParamId, AdamMoments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, partition: ParamKind, lr: f64) -> Self {
        Self {
            kind,
            partition,
            lr,
            adam: AdamParams::default(),
            moments: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn partition(&self) -> ParamKind {
        self.partition
    }

    /// Updates every parameter of the bound partition and nothing else.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids_of(self.partition).collect();
        if let Some(id) = ids.iter().find(|id| store.get(**id).grad().is_none()) {
            return Err(Error::MissingGradient(store.entry(*id).name.clone()));
        }
        for id in ids {
            let p = store.get_mut(id);
            match self.kind {
                OptimizerKind::Sgd => sgd_step(core::iter::once(p), self.lr)?,
                OptimizerKind::Adam => {
                    let st = self.moments.entry(id).or_default();
                    adaptive_step(p, self.lr, st, self.adam)?
                }
            }
        }
        Ok(())
    }
}
