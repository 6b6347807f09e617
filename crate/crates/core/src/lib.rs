//! Region-promptable contrastive vision-language model.
//!
//! Spatial prompts (points, boxes, masks) are encoded into sparse and dense
//! embeddings, fused with vision-transformer patch tokens through a
//! two-way attention block, and aligned with caption embeddings from a
//! frozen text encoder using a symmetric contrastive loss.
//!
//! This crate is `no_std` (with `alloc`): it holds the numerical model,
//! the per-step training math, the region-text data synthesis rules and
//! the evaluation arithmetic. File formats, the training loop over
//! manifests, the HTTP service and the CLI live in the `promptclip` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod datagen;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod mask;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Matrix;

/// Seedable RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
