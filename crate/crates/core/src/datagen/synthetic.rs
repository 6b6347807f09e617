//! Synthetic two-region benchmark: each image holds two disjoint shapes of
//! different categories, told apart by intensity, on a noisy background.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::mask::Mask;
use crate::Rng;

/// Category names and their 8-bit foreground intensity.
pub const CATEGORIES: [(&str, u8); 4] = [("liver", 220), ("kidney", 165), ("spleen", 115), ("lesion", 15)];
const BACKGROUND: f64 = 60.0;
const NOISE: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub size: usize,
    /// Row-major 8-bit grayscale pixels.
    pub gray: Vec<u8>,
    pub masks: Vec<Mask>,
    pub labels: Vec<String>,
}

fn shape(size: usize, rng: &mut Rng) -> Mask {
    let s = size as f64;
    let rx = rng.random_range(0.08..0.17) * s;
    let ry = rng.random_range(0.08..0.17) * s;
    let cx = rng.random_range(rx + 1.0..s - rx - 1.0);
    let cy = rng.random_range(ry + 1.0..s - ry - 1.0);
    let ellipse = rng.random_bool(0.5);
    Mask::from_fn(size, size, |x, y| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        if ellipse {
            dx * dx + dy * dy <= 1.0
        } else {
            dx.abs() <= 1.0 && dy.abs() <= 1.0
        }
    })
}

fn dilate(m: &Mask, r: usize) -> Mask {
    let (h, w) = (m.height(), m.width());
    Mask::from_fn(h, w, |x, y| {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| m.get(xx, yy)))
    })
}

/// One benchmark image.
pub fn synthetic_image(size: usize, rng: &mut Rng) -> SyntheticImage {
    let mut cats: Vec<usize> = (0..CATEGORIES.len()).collect();
    cats.shuffle(rng);
    let first = shape(size, rng);
    let guard = dilate(&first, 2);
    let second = loop {
        let m = shape(size, rng);
        if !m.overlaps(&guard) {
            break m;
        }
    };
    let masks = alloc::vec![first, second];
    let mut gray = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = BACKGROUND;
            for (m, &c) in masks.iter().zip(&cats) {
                if m.get(x, y) {
                    v = CATEGORIES[c].1 as f64;
                }
            }
            v += rng.random_range(-NOISE..=NOISE);
            gray.push(libm::round(v).clamp(0.0, 255.0) as u8);
        }
    }
    let labels = cats[..2].iter().map(|&c| String::from(CATEGORIES[c].0)).collect();
    SyntheticImage { size, gray, masks, labels }
}

/// `n` benchmark images from one seed.
pub fn synthetic_benchmark(n: usize, size: usize, seed: u64) -> Vec<SyntheticImage> {
    let mut rng = crate::rng_from_seed(seed);
    (0..n).map(|_| synthetic_image(size, &mut rng)).collect()
}
