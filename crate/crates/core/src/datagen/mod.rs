//! Region-text pair synthesis: explode multi-structure annotations into
//! per-region records, caption them from templates and mask statistics,
//! quality-check the captions, and sample training prompts.

mod caption;
mod qc;
mod sampler;
mod stats;
pub mod synthetic;

pub use caption::{derive_seed, synth_caption, template_ids, CaptionSlots, CLASS_TEMPLATE, TEMPLATES};
pub use qc::{dedup_decision, qc_dedup, qc_required_elements, DedupDecision, Element, KeywordRegistry, QcReport, DEDUP_THRESHOLD};
pub use sampler::{pixel_center, sample_training_prompt, PromptSampler};
pub use stats::{mask_stats, pixel_bbox, LocationBucket, MaskStats};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mask::{Mask, Rle};

/// One region-annotated sample: an image, one structure mask, its category
/// and the captions that survived quality control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub image: String,
    pub mask_rle: Rle,
    pub category: String,
    pub modality: String,
    pub captions: Vec<String>,
    pub stats: MaskStats,
}

impl RegionRecord {
    pub fn mask(&self) -> Result<Mask> {
        Mask::from_rle(&self.mask_rle)
    }

    /// Structural checks: non-empty mask and category, at least one caption.
    pub fn validate(&self) -> Result<()> {
        if self.category.trim().is_empty() {
            return Err(invalid!("record for {} has an empty category", self.image));
        }
        if self.captions.is_empty() {
            return Err(invalid!("record for {} has no captions", self.image));
        }
        if self.mask()?.is_empty() {
            return Err(invalid!("record for {} has an empty mask", self.image));
        }
        Ok(())
    }
}

/// How captions are generated for each region.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPolicy {
    pub captions_per_record: usize,
    /// Template ids to draw from.
    pub templates: Vec<usize>,
    /// Regeneration attempts per caption after a duplicate rejection.
    pub max_retries: usize,
    pub registry: KeywordRegistry,
}

impl Default for CaptionPolicy {
    fn default() -> Self {
        Self {
            captions_per_record: 3,
            templates: (0..CLASS_TEMPLATE).collect(),
            max_retries: 8,
            registry: KeywordRegistry::default(),
        }
    }
}

impl CaptionPolicy {
    /// One canonical category-only caption per record.
    pub fn class_only() -> Self {
        Self { captions_per_record: 1, templates: alloc::vec![CLASS_TEMPLATE], max_retries: 0, ..Default::default() }
    }
}

/// Captions for one region plus the dedup decision behind each retained
/// caption. Captions still rejected after `max_retries` regenerations are
/// dropped, so every retained pair has similarity at most the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionOutcome {
    pub captions: Vec<String>,
    pub decisions: Vec<DedupDecision>,
    /// Caption slots that ended with no acceptable candidate.
    pub dropped: usize,
}

pub fn caption_region(
    slots: &CaptionSlots<'_>,
    policy: &CaptionPolicy,
    seed: u64,
    embed: &mut dyn FnMut(&str) -> Result<Vec<f64>>,
) -> Result<CaptionOutcome> {
    if policy.templates.is_empty() {
        return Err(invalid!("caption policy has no templates"));
    }
    let mut rng = crate::rng_from_seed(seed);
    let mut out = CaptionOutcome { captions: Vec::new(), decisions: Vec::new(), dropped: 0 };
    let mut corpus: Vec<Vec<f64>> = Vec::new();
    for slot in 0..policy.captions_per_record {
        let mut accepted = None;
        for attempt in 0..=policy.max_retries {
            let (template, variant) = if slot == 0 && attempt == 0 {
                (policy.templates[0], 0)
            } else {
                (policy.templates[rng.random_range(0..policy.templates.len())], rng.random::<u64>() | 1)
            };
            let caption = synth_caption(slots, template, variant)?;
            if !qc_required_elements(&caption, &policy.registry).passed {
                continue;
            }
            let v = embed(&caption)?;
            let mut d = dedup_decision(&v, &corpus)?;
            d.regeneration_count = attempt;
            if d.accepted {
                accepted = Some((caption, v, d));
                break;
            }
        }
        match accepted {
            Some((c, v, d)) => {
                out.captions.push(c);
                corpus.push(v);
                out.decisions.push(d);
            }
            None => out.dropped += 1,
        }
    }
    if out.captions.is_empty() {
        return Err(invalid!("no caption for {} passed quality control", slots.category));
    }
    Ok(out)
}

/// Shared settings for [`explode_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExplodeOptions {
    pub modality: String,
    pub policy: CaptionPolicy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exploded {
    pub records: Vec<RegionRecord>,
    pub warnings: Vec<String>,
}

/// Seed for region `index` of `image_ref`.
pub fn region_seed(master: u64, image_ref: &str, index: usize) -> u64 {
    let h = image_ref.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    derive_seed(derive_seed(master, h), index as u64)
}

/// Split an image with `n` structure masks into one record per non-empty
/// mask. Empty masks are skipped with a warning.
pub fn explode_image(
    image_ref: &str,
    height: usize,
    width: usize,
    masks: &[Mask],
    labels: &[String],
    opts: &ExplodeOptions,
    embed: &mut dyn FnMut(&str) -> Result<Vec<f64>>,
) -> Result<Exploded> {
    if masks.len() != labels.len() {
        return Err(invalid!("{} masks but {} labels for {image_ref}", masks.len(), labels.len()));
    }
    if masks.is_empty() {
        return Err(invalid!("no masks for {image_ref}"));
    }
    let mut policy = opts.policy.clone();
    for l in labels {
        policy.registry.add_category(l);
    }
    let mut out = Exploded { records: Vec::new(), warnings: Vec::new() };
    for (i, (mask, label)) in masks.iter().zip(labels).enumerate() {
        if mask.height() != height || mask.width() != width {
            return Err(invalid!(
                "mask {i} of {image_ref} is {}x{}, image is {height}x{width}",
                mask.height(),
                mask.width()
            ));
        }
        if label.trim().is_empty() {
            return Err(invalid!("mask {i} of {image_ref} has an empty label"));
        }
        if mask.is_empty() {
            out.warnings.push(format!("{image_ref}: mask {i} ({label}) is empty, skipped"));
            continue;
        }
        let stats = mask_stats(mask)?;
        let slots = CaptionSlots { modality: &opts.modality, category: label, stats: &stats };
        let captioned = caption_region(&slots, &policy, region_seed(opts.seed, image_ref, i), embed)?;
        if captioned.dropped > 0 {
            out.warnings.push(format!(
                "{image_ref}: mask {i} ({label}) kept {} of {} captions after dedup",
                captioned.captions.len(),
                policy.captions_per_record
            ));
        }
        out.records.push(RegionRecord {
            image: String::from(image_ref),
            mask_rle: mask.to_rle(),
            category: label.clone(),
            modality: opts.modality.clone(),
            captions: captioned.captions,
            stats,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> ExplodeOptions {
        ExplodeOptions { modality: String::from("CT"), policy: CaptionPolicy::default(), seed: 7 }
    }

    // Bag-of-characters embedding: stable and cheap.
    fn embed(t: &str) -> Result<Vec<f64>> {
        let mut v = alloc::vec![0.0; 32];
        for (i, b) in t.bytes().enumerate() {
            v[(b as usize + i) % 32] += 1.0;
        }
        Ok(v)
    }

    #[test]
    fn one_record_per_non_empty_mask() {
        let a = Mask::from_fn(16, 16, |x, _| x < 4);
        let b = Mask::new(16, 16);
        let c = Mask::from_fn(16, 16, |_, y| y > 10);
        let labels: Vec<String> = ["liver", "kidney", "spleen"].iter().map(|s| String::from(*s)).collect();
        let e = explode_image("img.png", 16, 16, &[a, b, c], &labels, &opts(), &mut embed).unwrap();
        assert_eq!(e.records.len(), 2);
        assert_eq!(e.warnings.iter().filter(|w| w.contains("is empty")).count(), 1);
        assert!(e.records.iter().all(|r| r.validate().is_ok()));
        assert!(explode_image("x", 16, 16, &[Mask::new(16, 16)], &[], &opts(), &mut embed).is_err());
    }
}
