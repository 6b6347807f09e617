use alloc::vec::Vec;

use rand::Rng as _;

use super::stats::mask_stats;
use crate::error::{invalid, Result};
use crate::mask::Mask;
use crate::prompt::{BoxPrompt, Point, PromptKind, SpatialPrompt};
use crate::Rng;

/// Training-time prompt sampler.
///
/// A first Bernoulli draw discards the prompt with probability
/// `none_prob`; otherwise one of points, box, mask and points+box is drawn
/// with `kind_probs`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSampler {
    pub none_prob: f64,
    /// Probabilities of points, box, mask, points+box.
    pub kind_probs: [f64; 4],
    /// Per-side box jitter as a fraction of the side length.
    pub box_jitter: f64,
    pub max_points: usize,
}

impl Default for PromptSampler {
    fn default() -> Self {
        Self { none_prob: 0.1, kind_probs: [0.3, 0.3, 0.3, 0.1], box_jitter: 0.05, max_points: 3 }
    }
}

impl PromptSampler {
    /// Probability of each kind under the composed draw, in
    /// [`PromptKind::ALL`] order.
    pub fn expected_frequencies(&self) -> [(PromptKind, f64); 5] {
        let keep = 1.0 - self.none_prob;
        [
            (PromptKind::Points, keep * self.kind_probs[0]),
            (PromptKind::Box, keep * self.kind_probs[1]),
            (PromptKind::Mask, keep * self.kind_probs[2]),
            (PromptKind::PointsAndBox, keep * self.kind_probs[3]),
            (PromptKind::None, self.none_prob),
        ]
    }

    pub fn sample(&self, mask: &Mask, rng: &mut Rng) -> Result<SpatialPrompt> {
        if mask.is_empty() {
            return Err(invalid!("cannot sample a prompt from an empty mask"));
        }
        if rng.random::<f64>() < self.none_prob {
            return Ok(SpatialPrompt::None);
        }
        let total: f64 = self.kind_probs.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut kind = 3;
        for (i, p) in self.kind_probs.iter().enumerate() {
            if u < *p {
                kind = i;
                break;
            }
            u -= p;
        }
        Ok(match kind {
            0 => SpatialPrompt::Points(self.points(mask, rng)),
            1 => SpatialPrompt::Box(self.jittered_box(mask, rng)?),
            2 => SpatialPrompt::Mask(mask.clone()),
            _ => {
                let points = self.points(mask, rng);
                SpatialPrompt::PointsAndBox { points, bbox: self.jittered_box(mask, rng)? }
            }
        })
    }

    /// 1 to `max_points` pixel centres drawn uniformly from the mask.
    pub fn points(&self, mask: &Mask, rng: &mut Rng) -> Vec<Point> {
        let pixels: Vec<(usize, usize)> = mask.set_pixels().collect();
        let n = rng.random_range(1..=self.max_points.max(1));
        (0..n)
            .map(|_| {
                let (x, y) = pixels[rng.random_range(0..pixels.len())];
                pixel_center(mask, x, y)
            })
            .collect()
    }

    /// Tight box with each side moved by up to `box_jitter` of the side
    /// length, clipped to the image.
    pub fn jittered_box(&self, mask: &Mask, rng: &mut Rng) -> Result<BoxPrompt> {
        let tight = mask_stats(mask)?.bbox_prompt();
        if self.box_jitter <= 0.0 {
            return Ok(tight);
        }
        let (bw, bh) = (tight.x_max - tight.x_min, tight.y_max - tight.y_min);
        let mut j = |side: f64| rng.random_range(-self.box_jitter..=self.box_jitter) * side;
        let b = BoxPrompt::new(
            (tight.x_min + j(bw)).clamp(0.0, 1.0),
            (tight.y_min + j(bh)).clamp(0.0, 1.0),
            (tight.x_max + j(bw)).clamp(0.0, 1.0),
            (tight.y_max + j(bh)).clamp(0.0, 1.0),
        );
        Ok(if b.validate().is_ok() { b } else { tight })
    }
}

/// Normalized centre of pixel `(x, y)`.
pub fn pixel_center(mask: &Mask, x: usize, y: usize) -> Point {
    Point::new((x as f64 + 0.5) / mask.width() as f64, (y as f64 + 0.5) / mask.height() as f64)
}

/// Draw a training prompt with the default sampler.
pub fn sample_training_prompt(mask: &Mask, rng: &mut Rng) -> Result<SpatialPrompt> {
    PromptSampler::default().sample(mask, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_sums_to_one() {
        let s = PromptSampler::default();
        let total: f64 = s.expected_frequencies().iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unjittered_box_is_tight_bbox() {
        let m = Mask::from_fn(32, 32, |x, y| (4..10).contains(&x) && (20..25).contains(&y));
        let s = PromptSampler { box_jitter: 0.0, ..Default::default() };
        let b = s.jittered_box(&m, &mut crate::rng_from_seed(0)).unwrap();
        let st = mask_stats(&m).unwrap();
        assert_eq!([b.x_min, b.y_min, b.x_max, b.y_max], st.bbox);
    }

    #[test]
    fn empty_mask_is_rejected() {
        assert!(sample_training_prompt(&Mask::new(8, 8), &mut crate::rng_from_seed(0)).is_err());
    }
}
