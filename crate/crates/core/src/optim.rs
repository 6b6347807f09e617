//! Training hyperparameters, the learning-rate schedule and AdamW.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::Model;
use crate::params::Parameters;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Random intensity scale/shift on normalized images.
    pub augment: bool,
    pub aug_prob: f64,
    pub aug_scale: [f64; 2],
    pub aug_shift: [f64; 2],
    /// Per-side box jitter as a fraction of the side length.
    pub box_jitter: f64,
    /// Probability that a training prompt is discarded.
    pub none_prob: f64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 150,
            base_lr: 1e-2,
            weight_decay: 1e-2,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            milestones: vec![25, 50, 75, 90, 120],
            gamma: 0.1,
            warmup_steps: 800,
            seed: 2025,
            augment: true,
            aug_prob: 0.5,
            aug_scale: [0.9, 1.1],
            aug_shift: [-0.1, 0.1],
            box_jitter: 0.05,
            none_prob: 0.1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!("milestones must be strictly increasing: {:?}", self.milestones));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.gamma > 0.0) {
            return Err(invalid!("base_lr and weight_decay must be >= 0 and gamma > 0"));
        }
        if !(0.0..1.0).contains(&self.betas[0]) || !(0.0..1.0).contains(&self.betas[1]) {
            return Err(invalid!("betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.none_prob) || !(0.0..=1.0).contains(&self.aug_prob) {
            return Err(invalid!("probabilities must lie in [0, 1]"));
        }
        if !(self.box_jitter >= 0.0) {
            return Err(invalid!("box_jitter must be non-negative"));
        }
        Ok(())
    }
}

/// Linear warmup over `warmup_steps`, then `base_lr * gamma^m` where `m`
/// counts the milestones at or below the (0-based) epoch.
pub fn lr_at(step: usize, epoch: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let passed = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.base_lr * libm::pow(cfg.gamma, passed as f64)
}

/// AdamW with decoupled weight decay. Decay applies only to weight
/// matrices (both dimensions above one); biases, norms, embeddings rows
/// stored as vectors and the logit scale are not decayed. Frozen parameters
/// are skipped entirely.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, p| m.push(p.zeros_like()));
        let v = m.clone();
        Self { beta1: cfg.betas[0], beta2: cfg.betas[1], eps: cfg.adam_eps, weight_decay: cfg.weight_decay, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from `grad` (same layout as `model`).
    pub fn step(&mut self, model: &mut Model, grad: &Model, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let grads: Vec<&Matrix> = grad.named_params("").into_iter().map(|(_, g)| g).collect();
        let trainable: Vec<bool> = {
            let mut v = Vec::new();
            model.visit("", &mut |n, _| v.push(model.is_trainable(&n)));
            v
        };
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (i, (_, p)) in model.named_params_mut("").into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let decay = p.rows() > 1 && p.cols() > 1;
            let g = grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
                if decay {
                    *w -= lr * wd * *w;
                }
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (libm::sqrt(vhat) + eps);
            }
        }
    }
}
