//! Binary masks and their row-major run-length encoding.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Binary `height x width` mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Row-major run lengths, alternating false/true and starting with a
/// (possibly zero-length) false run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub h: usize,
    pub w: usize,
    pub runs: Vec<u32>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(invalid!("{} bits for a {height}x{width} mask", bits.len()));
        }
        Ok(Self { height, width, bits })
    }

    /// Mask of the pixels for which `f(x, y)` holds.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Whether the normalized coordinate `(x, y)` falls on a set pixel.
    pub fn contains_normalized(&self, x: f64, y: f64) -> bool {
        let px = ((x * self.width as f64) as usize).min(self.width.saturating_sub(1));
        let py = ((y * self.height as f64) as usize).min(self.height.saturating_sub(1));
        self.get(px, py)
    }

    /// Iterator over `(x, y)` of set pixels in raster order.
    pub fn set_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(move |(i, _)| (i % w, i / w))
    }

    pub fn overlaps(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    /// Nearest-neighbour resample to a new size.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |x, y| {
            let sx = (x * self.width) / width.max(1);
            let sy = (y * self.height) / height.max(1);
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }

    pub fn to_rle(&self) -> Rle {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        Rle { h: self.height, w: self.width, runs }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        let total: u64 = rle.runs.iter().map(|&r| r as u64).sum();
        if total != (rle.h * rle.w) as u64 {
            return Err(invalid!("run lengths sum to {total}, expected {}", rle.h * rle.w));
        }
        let mut bits = Vec::with_capacity(rle.h * rle.w);
        let mut value = false;
        for &r in &rle.runs {
            bits.extend(core::iter::repeat_n(value, r as usize));
            value = !value;
        }
        Ok(Self { height: rle.h, width: rle.w, bits })
    }
}

impl TryFrom<&Rle> for Mask {
    type Error = crate::Error;

    fn try_from(rle: &Rle) -> Result<Self> {
        Mask::from_rle(rle)
    }
}
