//! Adam with decoupled weight decay, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: DenoiserParams,
    v: DenoiserParams,
}

impl Adam {
    pub fn new(config: AdamConfig, like: &DenoiserParams) -> Self {
        Self { config, step: 0, m: like.zeros_like(), v: like.zeros_like() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Descends along `grad` (pass a negated ascent direction to maximize).
    pub fn step(&mut self, params: &mut DenoiserParams, grad: &DenoiserParams) {
        let AdamConfig { learning_rate: lr, beta1, beta2, epsilon, weight_decay } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((p, g), (m, v)) in params.iter_mut().zip(grad.iter()).zip(moments) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + epsilon) + weight_decay * *p);
        }
    }
}

/// Rescales `grad` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut DenoiserParams, max_norm: f64) -> f64 {
    let norm = grad.l2_norm();
    if max_norm > 0.0 && norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}
