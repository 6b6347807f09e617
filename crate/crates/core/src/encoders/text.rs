use alloc::string::String;
use alloc::vec::Vec;

use super::EncoderConfig;
use crate::error::{invalid, Result};
use crate::nn::{LayerNorm, Linear, PreNormBlock};
use crate::params::{join, Parameters};
use crate::tensor::Matrix;
use crate::Rng;

/// Reserved padding id. Word ids live in `1..vocab_size`.
pub const PAD_ID: u32 = 0;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Token ids padded to `max_len`; `length` counts the real tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub length: usize,
    pub pad_id: u32,
}

impl TokenSequence {
    pub fn valid_ids(&self) -> &[u32] {
        &self.ids[..self.length]
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercase, split on whitespace and hash each word with 64-bit FNV-1a
/// into `1 + hash % (vocab_size - 1)`. Truncates to and pads up to
/// `max_len` with [`PAD_ID`].
pub fn tokenize(text: &str, cfg: &EncoderConfig) -> Result<TokenSequence> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(invalid!("cannot tokenize empty text"));
    }
    if cfg.vocab_size < 2 {
        return Err(invalid!("vocab_size must be at least 2"));
    }
    let lower = trimmed.to_lowercase();
    let buckets = (cfg.vocab_size - 1) as u64;
    let mut ids: Vec<u32> = lower
        .split_whitespace()
        .take(cfg.max_len)
        .map(|w| (1 + fnv1a(w.as_bytes()) % buckets) as u32)
        .collect();
    let length = ids.len();
    ids.resize(cfg.max_len, PAD_ID);
    Ok(TokenSequence { ids, length, pad_id: PAD_ID })
}

/// A `D`-dimensional caption embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

/// Transformer text encoder: token and position tables, pre-norm blocks,
/// mean pooling over the real tokens, final norm and projection to the
/// joint space. It never receives gradients during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub token_embed: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<PreNormBlock>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let hidden = cfg.width * cfg.mlp_ratio;
        Self {
            token_embed: Matrix::randn(cfg.vocab_size, cfg.width, 0.02, rng),
            pos_embed: Matrix::randn(cfg.max_len, cfg.width, 0.01, rng),
            blocks: (0..cfg.text_depth).map(|_| PreNormBlock::new(cfg.width, cfg.heads, hidden, rng)).collect(),
            ln_final: LayerNorm::new(cfg.width),
            proj: Linear::new(cfg.width, cfg.embed_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            token_embed: self.token_embed.zeros_like(),
            pos_embed: self.pos_embed.zeros_like(),
            blocks: self.blocks.iter().map(PreNormBlock::zeros_like).collect(),
            ln_final: self.ln_final.zeros_like(),
            proj: self.proj.zeros_like(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embed.rows()
    }

    /// Unnormalized caption embedding.
    pub fn encode(&self, tokens: &TokenSequence) -> Result<TextEmbedding> {
        let ids = tokens.valid_ids();
        if ids.is_empty() {
            return Err(invalid!("token sequence has no tokens"));
        }
        if ids.len() > self.pos_embed.rows() {
            return Err(invalid!("{} tokens exceed max_len {}", ids.len(), self.pos_embed.rows()));
        }
        let width = self.token_embed.cols();
        let mut x = Matrix::zeros(ids.len(), width);
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= self.vocab_size() {
                return Err(invalid!("token id {id} outside vocabulary of {}", self.vocab_size()));
            }
            let row = x.row_mut(i);
            for ((o, t), p) in row.iter_mut().zip(self.token_embed.row(id as usize)).zip(self.pos_embed.row(i)) {
                *o = t + p;
            }
        }
        for block in &self.blocks {
            x = block.forward(&x).0;
        }
        let pooled = Matrix::row_vector(x.mean_rows());
        let (normed, _) = self.ln_final.forward(&pooled);
        let out = self.proj.forward(&normed);
        Ok(TextEmbedding { vector: out.into_vec(), normalized: false })
    }
}

impl Parameters for TextEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "token_embed"), &self.token_embed);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
        self.ln_final.visit(&join(prefix, "ln_final"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "token_embed"), &mut self.token_embed);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &alloc::format!("blocks.{i}")), f);
        }
        self.ln_final.visit_mut(&join(prefix, "ln_final"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}
