//! AdamW and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::fusion::FusionParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Per-step cosine annealing from `base_lr` to 0 at the last step.
    #[default]
    Cosine,
    Constant,
}

impl Schedule {
    /// Learning rate of step `t` out of `total` steps.
    pub fn lr(self, base_lr: f64, t: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base_lr,
            Schedule::Cosine if total <= 1 => base_lr,
            Schedule::Cosine => {
                let progress = t as f64 / (total - 1) as f64;
                base_lr * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: FusionParams,
    v: FusionParams,
    t: u64,
}

impl AdamW {
    pub fn new(params: &FusionParams, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut FusionParams, grad: &FusionParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let grads: Vec<&[f64]> = grad.tensors().into_iter().map(|(_, _, g)| g).collect();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
    }
}
