//! Bias-corrected Adam with inverse-time learning-rate decay per epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    /// Per-epoch decay: the rate during epoch `e` (0-based) is `lr / (1 + decay * e)`.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr / (1.0 + self.decay * epoch as f64)
    }
}

/// First and second moments for each trainable tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Fresh state for tensors of the given lengths.
    pub fn new(config: AdamConfig, lens: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = lens.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { config, step: 0, m, v }
    }

    pub fn matches(&self, params: &[&mut [f32]]) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().zip(&self.m).zip(&self.v).all(|((p, m), v)| p.len() == m.len() && p.len() == v.len())
    }

    /// One update of every tensor at learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if !self.matches(params) || grads.len() != params.len() || grads.iter().zip(params.iter()).any(|(g, p)| g.len() != p.len()) {
            return Err(Error::shape("adam_step", "moments and gradients congruent with parameters", "mismatched lengths"));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
