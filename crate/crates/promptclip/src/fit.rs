//! The epoch loop over a dataset.

use std::collections::BTreeMap;
use std::path::Path;

use promptclip_core::datagen::{derive_seed, PromptSampler};
use promptclip_core::optim::{lr_at, TrainConfig};
use promptclip_core::prompt::PromptKind;
use promptclip_core::train::{augment, Trainer, Triplet};
use promptclip_core::{rng_from_seed, Model};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;

use crate::dataset::{CaptionBank, Dataset};
use crate::error::{io_at, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    pub history: Vec<LossRow>,
    /// How often each prompt kind was drawn.
    pub prompt_counts: BTreeMap<&'static str, usize>,
}

impl FitReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss)
    }
}

/// Passed to the per-epoch callback after each completed epoch.
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub model: &'a Model,
    pub history: &'a [LossRow],
}

/// Train `model` in place for `cfg.epochs` epochs.
///
/// Each epoch draws its own RNG from `(cfg.seed, epoch)` and uses it, in a
/// fixed order, to shuffle the records, pick a caption per record, sample
/// a prompt and augment the image, so runs are reproducible. A trailing
/// batch with a single record is skipped.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<FitReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(promptclip_core::Error::InvalidInput("cannot fit on an empty manifest".into()).into());
    }
    let bank = CaptionBank::build(data, model)?;
    let sampler = PromptSampler { none_prob: cfg.none_prob, box_jitter: cfg.box_jitter, ..Default::default() };
    let mut trainer = Trainer::new(model, cfg);
    let mut report = FitReport::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut images = Vec::with_capacity(chunk.len());
            let mut prompts = Vec::with_capacity(chunk.len());
            let mut texts = Vec::with_capacity(chunk.len());
            for &r in chunk {
                let caps = &bank.per_record[r];
                texts.push(caps[rng.random_range(0..caps.len())]);
                let p = sampler.sample(&data.masks[r], &mut rng)?;
                *report.prompt_counts.entry(p.kind().as_str()).or_default() += 1;
                prompts.push(p);
                let mut img = data.image(r).clone();
                augment(&mut img, cfg, &mut rng);
                images.push(img);
            }
            let batch: Vec<Triplet<'_>> = (0..chunk.len())
                .map(|i| Triplet { image: &images[i], prompt: &prompts[i], text: &bank.vectors[texts[i]] })
                .collect();
            let lr = lr_at(step as usize, epoch, cfg);
            let loss = trainer.step(model, &batch, lr)?;
            report.history.push(LossRow { step, epoch, lr, loss });
            step += 1;
        }
        if let Some(last) = report.history.last() {
            log::info!("epoch {epoch} step {step} lr {:.3e} loss {:.4}", last.lr, last.loss);
        }
        on_epoch(EpochEnd { epoch, model, history: &report.history })?;
    }
    Ok(report)
}

/// Share of `kind` among all drawn prompts.
pub fn prompt_fraction(report: &FitReport, kind: PromptKind) -> f64 {
    let total: usize = report.prompt_counts.values().sum();
    report.prompt_counts.get(kind.as_str()).copied().unwrap_or(0) as f64 / total.max(1) as f64
}

/// Write the loss history as `step,epoch,lr,loss`.
pub fn write_loss_csv(history: &[LossRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    for row in history {
        w.serialize(row).map_err(|e| csv_io(e, path))?;
    }
    w.flush().map_err(io_at(path))
}

pub(crate) fn csv_io(e: csv::Error, path: &Path) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => crate::Error::Io { path: path.to_path_buf(), source },
        other => crate::Error::Io { path: path.to_path_buf(), source: std::io::Error::other(format!("{other:?}")) },
    }
}

