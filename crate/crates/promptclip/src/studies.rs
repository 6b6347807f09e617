//! Data-scaling and encoder-unfreezing studies.

use std::path::Path;

use promptclip_core::eval::PromptMode;
use promptclip_core::optim::TrainConfig;
use promptclip_core::{rng_from_seed, Model, ModelConfig};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{io_at, Result};
use crate::evaluate::{eval_dataset, EvalTarget};
use crate::fit::{csv_io, fit};

/// Seeded nested subsample of `floor(fraction * n)` indices in their
/// original order. Smaller fractions of the same seed are prefixes of the
/// same permutation, so subsets nest.
pub fn nested_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(promptclip_core::Error::InvalidInput(format!("fraction must lie in (0, 1], got {fraction}")).into());
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let mut take: Vec<usize> = perm[..(fraction * n as f64).floor() as usize].to_vec();
    take.sort_unstable();
    Ok(take)
}

/// Train a fresh model on `train` and report top-1 on `eval` per mode.
pub fn fit_and_eval(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
    target: &EvalTarget,
    modes: &[PromptMode],
) -> Result<Vec<f64>> {
    let mut model = Model::new(model_cfg.clone())?;
    fit(&mut model, train, train_cfg, &mut |_| Ok(()))?;
    modes.iter().map(|&m| Ok(eval_dataset(&model, eval, target, m)?.report.top1)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub fraction: f64,
    pub n_train: usize,
    pub top1_no_prompt: f64,
    pub top1_box: f64,
}

/// One fit per training fraction, evaluated without a prompt and with the
/// tight box prompt.
pub fn scaling_study(
    train: &Dataset,
    eval: &Dataset,
    fractions: &[f64],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    target: &EvalTarget,
) -> Result<Vec<ScalingRow>> {
    let subsets = fractions.iter().map(|&f| nested_subset(train.len(), f, train_cfg.seed)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (&fraction, idx) in fractions.iter().zip(&subsets) {
        if idx.len() < 2 {
            return Err(promptclip_core::Error::InvalidInput(format!("fraction {fraction} keeps {} records", idx.len())).into());
        }
        let sub = train.subset(idx);
        let top1 = fit_and_eval(model_cfg, train_cfg, &sub, eval, target, &[PromptMode::None, PromptMode::Box])?;
        log::info!("scaling fraction {fraction}: n {} no-prompt {:.4} box {:.4}", idx.len(), top1[0], top1[1]);
        rows.push(ScalingRow { fraction, n_train: idx.len(), top1_no_prompt: top1[0], top1_box: top1[1] });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnfreezeRow {
    pub k: usize,
    pub top1: f64,
}

/// One fit per number of trainable image-encoder blocks, in request order.
pub fn unfreeze_study(
    train: &Dataset,
    eval: &Dataset,
    ks: &[usize],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    target: &EvalTarget,
    mode: PromptMode,
) -> Result<Vec<UnfreezeRow>> {
    let cfgs = ks
        .iter()
        .map(|&k| Ok(ModelConfig { encoder: model_cfg.encoder.set_trainable_blocks(k)?, ..model_cfg.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (&k, cfg) in ks.iter().zip(&cfgs) {
        let top1 = fit_and_eval(cfg, train_cfg, train, eval, target, &[mode])?[0];
        log::info!("unfreeze k {k}: top1 {top1:.4}");
        rows.push(UnfreezeRow { k, top1 });
    }
    Ok(rows)
}

pub fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_io(e, path))?;
    }
    w.flush().map_err(io_at(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_nest_and_have_floor_size() {
        let small = nested_subset(37, 0.1, 4).unwrap();
        let half = nested_subset(37, 0.5, 4).unwrap();
        assert_eq!(small.len(), 3);
        assert_eq!(half.len(), 18);
        assert!(small.iter().all(|i| half.contains(i)));
        assert!(half.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(nested_subset(37, 1.0, 4).unwrap(), (0..37).collect::<Vec<_>>());
        assert!(nested_subset(37, 0.0, 4).is_err());
    }
}
