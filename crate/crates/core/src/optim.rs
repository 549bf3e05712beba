//! AdamW with linear warmup and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, Weights};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            grad_clip: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn lr_at(&self, step: u64) -> f32 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f32 / self.warmup_steps as f32
        }
    }
}

/// Decay applies to weight matrices only, not to biases, norm gains or the mask token.
fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Completed updates.
    pub step: u64,
    pub m: Weights<f32>,
    pub v: Weights<f32>,
}

impl AdamW {
    pub fn new(model: &ModelConfig, config: AdamWConfig) -> Result<Self> {
        Ok(Self {
            config,
            step: 0,
            m: Weights::zeros(model)?,
            v: Weights::zeros(model)?,
        })
    }

    /// Applies one update. Returns the gradient norm before clipping.
    pub fn update(&mut self, weights: &mut Weights<f32>, grads: &Weights<f32>) -> f64 {
        let cfg = self.config;
        let norm = grads.norm();
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip as f64 {
            (cfg.grad_clip as f64 / norm) as f32
        } else {
            1.0
        };
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let params = weights.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for (((name, p), (_, m)), ((_, v), (_, g))) in params
            .into_iter()
            .zip(ms)
            .zip(vs.into_iter().zip(grads.params()))
        {
            let wd = if decays(&name) { cfg.weight_decay } else { 0.0 };
            for (((p, m), v), &g) in p
                .data
                .iter_mut()
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
                .zip(&g.data)
            {
                let g = g * clip;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * *p);
            }
        }
        norm
    }
}
