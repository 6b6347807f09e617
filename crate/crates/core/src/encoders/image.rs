use alloc::string::String;
use alloc::vec::Vec;

use super::EncoderConfig;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Linear, PreNormBlock, PreNormBlockCache};
use crate::params::{join, Parameters};
use crate::tensor::Matrix;
use crate::Rng;

/// Per-channel RGB mean in 8-bit intensity units.
pub const IMAGE_MEAN: [f64; 3] = [123.675, 116.28, 103.53];
/// Per-channel RGB standard deviation in 8-bit intensity units.
pub const IMAGE_STD: [f64; 3] = [58.395, 57.12, 57.375];

/// An `H x W x 3` float image in row-major, channel-last order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    normalized: bool,
}

impl ImageSample {
    pub const CHANNELS: usize = 3;

    /// Raw (un-normalized) image from channel-last float intensities.
    pub fn from_raw(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * Self::CHANNELS {
            return Err(shape_err!("{} values for a {height}x{width}x3 image", pixels.len()));
        }
        Ok(Self { height, width, pixels, normalized: false })
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_raw(height, width, bytes.iter().map(|&b| b as f64).collect())
    }

    /// Grayscale intensities replicated to three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f64]) -> Result<Self> {
        if gray.len() != height * width {
            return Err(shape_err!("{} values for a {height}x{width} gray image", gray.len()));
        }
        let pixels = gray.iter().flat_map(|&g| [g, g, g]).collect();
        Ok(Self { height, width, pixels, normalized: false })
    }

    /// Wrap values that are already normalized.
    pub fn from_normalized(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        let mut s = Self::from_raw(height, width, pixels)?;
        s.normalized = true;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `x' = (x - mean_c) / std_c`. Applying it twice is an error.
    pub fn normalize(&mut self) -> Result<()> {
        if self.normalized {
            return Err(invalid!("image is already normalized"));
        }
        for px in self.pixels.chunks_exact_mut(Self::CHANNELS) {
            for c in 0..Self::CHANNELS {
                px[c] = (px[c] - IMAGE_MEAN[c]) / IMAGE_STD[c];
            }
        }
        self.normalized = true;
        Ok(())
    }

    pub fn into_normalized(mut self) -> Result<Self> {
        self.normalize()?;
        Ok(self)
    }

    /// Cut the image into `patch x patch` tiles, one row per tile in raster
    /// order, features ordered `(dy, dx, channel)`.
    pub fn patchify(&self, patch: usize) -> Result<Matrix> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(shape_err!(
                "image {}x{} is not divisible by patch size {patch}",
                self.height,
                self.width
            ));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let feat = patch * patch * Self::CHANNELS;
        let mut out = Matrix::zeros(gh * gw, feat);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = out.row_mut(gy * gw + gx);
                for dy in 0..patch {
                    let y = gy * patch + dy;
                    let src = (y * self.width + gx * patch) * Self::CHANNELS;
                    let dst = dy * patch * Self::CHANNELS;
                    row[dst..dst + patch * Self::CHANNELS]
                        .copy_from_slice(&self.pixels[src..src + patch * Self::CHANNELS]);
                }
            }
        }
        Ok(out)
    }
}

/// `L x width` patch tokens over an `(h, w)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub tokens: Matrix,
    pub grid: (usize, usize),
}

/// Vision transformer: linear patch embedding, learned positions and a stack
/// of pre-norm blocks. Only the trailing `trainable_blocks` blocks keep
/// activations for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub pos_embed: Matrix,
    pub blocks: Vec<PreNormBlock>,
    patch_size: usize,
}

#[derive(Debug, Clone)]
pub struct ImageEncoderCache {
    patches: Option<Matrix>,
    first_cached: usize,
    blocks: Vec<PreNormBlockCache>,
}

impl ImageEncoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let feat = cfg.patch_size * cfg.patch_size * ImageSample::CHANNELS;
        let hidden = cfg.width * cfg.mlp_ratio;
        Self {
            patch_embed: Linear::new(feat, cfg.width, rng),
            pos_embed: Matrix::randn(cfg.num_patches(), cfg.width, 0.02, rng),
            blocks: (0..cfg.depth).map(|_| PreNormBlock::new(cfg.width, cfg.heads, hidden, rng)).collect(),
            patch_size: cfg.patch_size,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            patch_embed: self.patch_embed.zeros_like(),
            pos_embed: self.pos_embed.zeros_like(),
            blocks: self.blocks.iter().map(PreNormBlock::zeros_like).collect(),
            patch_size: self.patch_size,
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Encode one normalized image. `trainable_blocks` controls how much of
    /// the forward pass is cached for [`ImageEncoder::backward`].
    pub fn forward(&self, image: &ImageSample, trainable_blocks: usize) -> Result<(PatchTokens, ImageEncoderCache)> {
        if !image.is_normalized() {
            return Err(invalid!("image must be normalized before encoding"));
        }
        let patches = image.patchify(self.patch_size)?;
        if patches.rows() != self.pos_embed.rows() {
            return Err(shape_err!(
                "image yields {} patches but the encoder was built for {}",
                patches.rows(),
                self.pos_embed.rows()
            ));
        }
        let grid = (image.height() / self.patch_size, image.width() / self.patch_size);
        let mut x = self.patch_embed.forward(&patches);
        x.add_assign(&self.pos_embed);
        let k = trainable_blocks.min(self.depth());
        let first_cached = self.depth() - k;
        let mut caches = Vec::with_capacity(k);
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block.forward(&x);
            if i >= first_cached {
                caches.push(cache);
            }
            x = y;
        }
        let stem = (k == self.depth()).then_some(patches);
        Ok((PatchTokens { tokens: x, grid }, ImageEncoderCache { patches: stem, first_cached, blocks: caches }))
    }

    /// Back-propagate into the cached (trainable) blocks and, when the whole
    /// encoder is trainable, the patch embedding and position table.
    pub fn backward(&self, cache: &ImageEncoderCache, d_tokens: &Matrix, grad: &mut ImageEncoder) {
        if cache.blocks.is_empty() {
            return;
        }
        let mut d = d_tokens.clone();
        for (j, bc) in cache.blocks.iter().enumerate().rev() {
            let i = cache.first_cached + j;
            d = self.blocks[i].backward(bc, &d, &mut grad.blocks[i]);
        }
        if let Some(patches) = &cache.patches {
            grad.pos_embed.add_assign(&d);
            self.patch_embed.backward_params(patches, &d, &mut grad.patch_embed);
        }
    }
}

impl Parameters for ImageEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
    }
}
