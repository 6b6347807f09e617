//! One optimization step over a batch of (image, prompt, caption) triplets.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::encoders::ImageSample;
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::objective::{contrastive_loss, logit_stats};
use crate::optim::{AdamW, TrainConfig};
use crate::params::Parameters;
use crate::prompt::SpatialPrompt;
use crate::tensor::Matrix;
use crate::Rng;

/// One training example. `image` must already be normalized (and
/// augmented); `text` is the raw caption embedding from the frozen encoder.
#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub image: &'a ImageSample,
    pub prompt: &'a SpatialPrompt,
    pub text: &'a [f64],
}

/// Forward and backward over a batch, accumulating into `grad` (which is
/// zeroed first). Returns the loss.
pub fn compute_gradients(model: &Model, batch: &[Triplet<'_>], grad: &mut Model) -> Result<f64> {
    if batch.len() < 2 {
        return Err(shape_err!("a contrastive batch needs at least 2 triplets, got {}", batch.len()));
    }
    grad.zero_();
    let dim = model.config.encoder.embed_dim;
    let mut img = Matrix::zeros(batch.len(), dim);
    let mut txt = Matrix::zeros(batch.len(), dim);
    let mut caches = Vec::with_capacity(batch.len());
    for (i, t) in batch.iter().enumerate() {
        if t.text.len() != dim {
            return Err(shape_err!("caption embedding has {} values, expected {dim}", t.text.len()));
        }
        let (out, cache) = model.forward_sample(t.image, t.prompt)?;
        img.row_mut(i).copy_from_slice(&out);
        txt.row_mut(i).copy_from_slice(t.text);
        caches.push(cache);
    }
    let out = contrastive_loss(&img, &txt, &model.logit_scale())?;
    if !out.loss.is_finite() {
        let [min, max, mean, diag] = logit_stats(&out.logits);
        return Err(Error::Numerical(format!(
            "non-finite loss {}; logits min {min} max {max} mean {mean} diagonal mean {diag}",
            out.loss
        )));
    }
    for (i, cache) in caches.iter().enumerate() {
        model.backward_sample(cache, out.d_image.row(i), grad);
    }
    grad.logit_scale.set(0, 0, out.d_log_scale);
    Ok(out.loss)
}

/// Reusable gradient buffer and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub optimizer: AdamW,
    grad: Model,
}

impl Trainer {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        Self { optimizer: AdamW::new(model, cfg), grad: model.zeros_like() }
    }

    /// Gradients from the most recent step.
    pub fn gradients(&self) -> &Model {
        &self.grad
    }

    pub fn step(&mut self, model: &mut Model, batch: &[Triplet<'_>], lr: f64) -> Result<f64> {
        let loss = compute_gradients(model, batch, &mut self.grad)?;
        self.optimizer.step(model, &self.grad, lr);
        Ok(loss)
    }
}

/// Random intensity scale and shift, each applied with probability
/// `aug_prob`, to an already normalized image.
pub fn augment(image: &mut ImageSample, cfg: &TrainConfig, rng: &mut Rng) {
    if !cfg.augment {
        return;
    }
    if rng.random::<f64>() < cfg.aug_prob {
        let s = rng.random_range(cfg.aug_scale[0]..=cfg.aug_scale[1]);
        image.pixels_mut().iter_mut().for_each(|p| *p *= s);
    }
    if rng.random::<f64>() < cfg.aug_prob {
        let b = rng.random_range(cfg.aug_shift[0]..=cfg.aug_shift[1]);
        image.pixels_mut().iter_mut().for_each(|p| *p += b);
    }
}
