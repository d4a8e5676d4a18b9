use std::collections::BTreeMap;

use super::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Gradients, Tensor};

/// Adam hyper-parameters. Weight decay is added to the gradient (L2 style).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    /// Weight optimizer defaults.
    pub fn weights() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }

    /// Architecture optimizer defaults: same moments, smaller rate, no decay.
    pub fn arch() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Self::weights()
        }
    }
}

/// Adam over one [`ParamGroup`] of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub group: ParamGroup,
    pub steps: u64,
    /// First and second moments, by parameter.
    pub moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig, group: ParamGroup) -> Self {
        Self {
            config,
            group,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter in the group at learning rate `lr`.
    /// Parameters outside the group are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in store.ids(self.group) {
            let Some(grad) = grads.param(id.0) else { continue };
            let value = store.get_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(value.shape()), Tensor::zeros(value.shape())));
            let gd = grad.data();
            for i in 0..value.len() {
                let p = value.data()[i];
                let g = gd[i] + c.weight_decay * p;
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                value.data_mut()[i] = p - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
