use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tape::Gradients;
use crate::tensor::{ParamGroup, ParamId, ParamStore};

/// Bias-corrected Adam with one learning rate per parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr_head: f64,
    pub lr_encoder: f64,
    /// L2 penalty coefficient folded into the gradient.
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr_head: f64, lr_encoder: f64) -> Self {
        let first: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_head,
            lr_encoder,
            weight_decay: 0.0,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Head => self.lr_head,
            ParamGroup::Encoder => self.lr_encoder,
        }
    }

    /// One update of every trainable parameter that has a gradient, with the
    /// group learning rates multiplied by `lr_scale` (for schedules).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr_scale: f64) -> Result<()> {
        if self.first.len() != params.len() || grads.param_slots() != params.len() {
            bail!(
                Dimension,
                "optimizer tracks {} parameters, store has {}, gradients {}",
                self.first.len(),
                params.len(),
                grads.param_slots()
            );
        }
        for i in 0..params.len() {
            let p = params.get(ParamId(i));
            if let Some(g) = grads.param(ParamId(i)) {
                if g.len() != p.tensor.len() || self.first[i].len() != g.len() {
                    bail!(Dimension, "gradient shape mismatch for `{}`", p.name);
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let correction1 = 1.0 - libm::pow(self.beta1, t);
        let correction2 = 1.0 - libm::pow(self.beta2, t);
        for i in 0..params.len() {
            let param = params.get_mut(ParamId(i));
            if !param.trainable {
                continue;
            }
            let Some(g) = grads.param(ParamId(i)) else {
                continue;
            };
            let lr = lr_scale
                * match param.group {
                    ParamGroup::Head => self.lr_head,
                    ParamGroup::Encoder => self.lr_encoder,
                };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let decay = self.weight_decay;
            for (k, w) in param.tensor.data_mut().iter_mut().enumerate() {
                let gk = g[k] + decay * *w;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / correction1;
                let v_hat = v[k] / correction2;
                *w -= lr * m_hat / (libm::sqrt(v_hat) + self.epsilon);
            }
        }
        Ok(())
    }
}
