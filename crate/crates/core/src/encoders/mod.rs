//! Vision-transformer image encoder and frozen text encoder.

mod image;
mod text;

pub use image::{ImageEncoder, ImageEncoderCache, ImageSample, PatchTokens, IMAGE_MEAN, IMAGE_STD};
pub use text::{tokenize, TextEmbedding, TextEncoder, TokenSequence, PAD_ID};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of the image and text encoders.
///
/// `width` is the token width shared by the patch tokens, prompt embeddings
/// and the fusion block; `embed_dim` is the joint image/text space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub image_size: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub text_depth: usize,
    /// Number of trailing image-encoder blocks that receive gradients.
    pub trainable_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            image_size: 64,
            width: 128,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: 4096,
            max_len: 32,
            text_depth: 1,
            trainable_blocks: 4,
        }
    }
}

impl EncoderConfig {
    /// ViT-B/16 at 224 pixels.
    pub fn vit_b16() -> Self {
        Self {
            patch_size: 16,
            image_size: 224,
            width: 768,
            embed_dim: 512,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            vocab_size: 49408,
            max_len: 77,
            text_depth: 12,
            trainable_blocks: 12,
        }
    }

    /// ViT-L/14 at 336 pixels.
    pub fn vit_l14_336() -> Self {
        Self {
            patch_size: 14,
            image_size: 336,
            width: 1024,
            embed_dim: 768,
            depth: 24,
            heads: 16,
            mlp_ratio: 4,
            vocab_size: 49408,
            max_len: 77,
            text_depth: 12,
            trainable_blocks: 24,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(invalid!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(invalid!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.width % 2 != 0 {
            return Err(invalid!("width {} must be even for the Fourier codec", self.width));
        }
        if self.trainable_blocks > self.depth {
            return Err(invalid!("trainable_blocks {} exceeds depth {}", self.trainable_blocks, self.depth));
        }
        if self.vocab_size < 2 || self.max_len == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(invalid!("vocab_size, max_len, embed_dim and mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Same config with `k` trainable trailing blocks.
    pub fn set_trainable_blocks(&self, k: usize) -> Result<Self> {
        if k > self.depth {
            return Err(invalid!("trainable_blocks {k} out of range 0..={}", self.depth));
        }
        Ok(Self { trainable_blocks: k, ..self.clone() })
    }
}
