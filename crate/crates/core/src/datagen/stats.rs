use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mask::Mask;
use crate::prompt::BoxPrompt;

/// Tile of a 3x3 grid over the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocationBucket {
    UpperLeft,
    UpperCenter,
    UpperRight,
    MiddleLeft,
    Center,
    MiddleRight,
    LowerLeft,
    LowerCenter,
    LowerRight,
}

impl LocationBucket {
    pub const ALL: [LocationBucket; 9] = [
        LocationBucket::UpperLeft,
        LocationBucket::UpperCenter,
        LocationBucket::UpperRight,
        LocationBucket::MiddleLeft,
        LocationBucket::Center,
        LocationBucket::MiddleRight,
        LocationBucket::LowerLeft,
        LocationBucket::LowerCenter,
        LocationBucket::LowerRight,
    ];

    /// Bucket of a normalized coordinate.
    pub fn of(x: f64, y: f64) -> Self {
        let tile = |v: f64| ((v * 3.0) as usize).min(2);
        Self::ALL[tile(y) * 3 + tile(x)]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LocationBucket::UpperLeft => "upper-left",
            LocationBucket::UpperCenter => "upper-center",
            LocationBucket::UpperRight => "upper-right",
            LocationBucket::MiddleLeft => "middle-left",
            LocationBucket::Center => "center",
            LocationBucket::MiddleRight => "middle-right",
            LocationBucket::LowerLeft => "lower-left",
            LocationBucket::LowerCenter => "lower-center",
            LocationBucket::LowerRight => "lower-right",
        }
    }
}

impl fmt::Display for LocationBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Geometry summary of a non-empty mask, in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub area_fraction: f64,
    /// Mean of the set pixel centres.
    pub centroid: [f64; 2],
    /// `[x_min, y_min, x_max, y_max]` of the tight pixel box.
    pub bbox: [f64; 4],
    /// Square root of the ratio of the principal variances, `>= 1`.
    pub elongation: f64,
    pub bucket: LocationBucket,
}

impl MaskStats {
    pub fn bbox_prompt(&self) -> BoxPrompt {
        BoxPrompt::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }

    pub fn size_word(&self) -> &'static str {
        if self.area_fraction >= 0.1 {
            "large"
        } else if self.area_fraction >= 0.02 {
            "medium"
        } else {
            "small"
        }
    }

    pub fn shape_word(&self) -> &'static str {
        if self.elongation < 1.3 {
            "round"
        } else if self.elongation < 2.0 {
            "oval"
        } else {
            "elongated"
        }
    }
}

/// Pixel-index bounding box `(x_min, y_min, x_max, y_max)`, inclusive.
pub fn pixel_bbox(mask: &Mask) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (x, y) in mask.set_pixels() {
        b = Some(match b {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    b
}

pub fn mask_stats(mask: &Mask) -> Result<MaskStats> {
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let (x0, y0, x1, y1) = pixel_bbox(mask).ok_or_else(|| invalid!("mask has no set pixels"))?;
    let n = mask.count() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (x, y) in mask.set_pixels() {
        sx += x as f64 + 0.5;
        sy += y as f64 + 0.5;
    }
    let (cx, cy) = (sx / n, sy / n);
    let (mut vxx, mut vyy, mut vxy) = (0.0, 0.0, 0.0);
    for (x, y) in mask.set_pixels() {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        vxx += dx * dx;
        vyy += dy * dy;
        vxy += dx * dy;
    }
    // A pixel is a unit square, not a point: add its own variance.
    vxx = vxx / n + 1.0 / 12.0;
    vyy = vyy / n + 1.0 / 12.0;
    vxy /= n;
    let tr = vxx + vyy;
    let disc = libm::sqrt(((vxx - vyy) * 0.5) * ((vxx - vyy) * 0.5) + vxy * vxy);
    let l1 = tr * 0.5 + disc;
    let l2 = (tr * 0.5 - disc).max(f64::MIN_POSITIVE);
    let centroid = [cx / w, cy / h];
    Ok(MaskStats {
        area_fraction: n / (w * h),
        centroid,
        bbox: [x0 as f64 / w, y0 as f64 / h, (x1 + 1) as f64 / w, (y1 + 1) as f64 / h],
        elongation: libm::sqrt(l1 / l2).max(1.0),
        bucket: LocationBucket::of(centroid[0], centroid[1]),
    })
}
