//! AdamW with decoupled weight decay.
//!
//! `θ ← θ − η·λ·θ`, then `θ ← θ − η·m̂/(√v̂ + ε)` with bias-corrected moments.
//! Parameters without a gradient entry are skipped entirely: no decay, no moment
//! update, no step-count increment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Tensor2,
    second: Tensor2,
    steps: u64,
}

#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    /// Number of `step` calls that updated at least one parameter.
    pub step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Per-parameter update count.
    pub fn param_steps(&self, id: ParamId) -> u64 {
        self.moments.get(&id).map_or(0, |m| m.steps)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            if store.get(id).shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    left: store.get(id).shape(),
                    right: g.shape(),
                });
            }
        }
        let c = self.config;
        for (id, g) in grads.iter() {
            let m = self.moments.entry(id).or_insert_with(|| Moments {
                first: Tensor2::zeros(g.rows(), g.cols()),
                second: Tensor2::zeros(g.rows(), g.cols()),
                steps: 0,
            });
            m.steps += 1;
            let t = m.steps as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let theta = store.get_mut(id).data_mut();
            let first = m.first.data_mut();
            let second = m.second.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                first[i] = c.beta1 * first[i] + (1.0 - c.beta1) * gi;
                second[i] = c.beta2 * second[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = first[i] / bc1;
                let v_hat = second[i] / bc2;
                theta[i] -= c.learning_rate * c.weight_decay * theta[i];
                theta[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        if !grads.is_empty() {
            self.step += 1;
        }
        Ok(())
    }
}
