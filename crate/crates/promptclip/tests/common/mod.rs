#![allow(dead_code)]

use promptclip::dataset::Dataset;
use promptclip::datagen::{synthetic_dataset, SyntheticOptions};
use promptclip_core::encoders::EncoderConfig;
use promptclip_core::fusion::FusionConfig;
use promptclip_core::optim::TrainConfig;
use promptclip_core::{Model, ModelConfig};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 4,
            width: 16,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            vocab_size: 128,
            max_len: 16,
            text_depth: 1,
            trainable_blocks: 2,
        },
        fusion: FusionConfig { fusion_heads: 2, fusion_mlp_dim: 32, ..Default::default() },
        init_seed: 3,
    }
}

pub fn tiny_model() -> Model {
    Model::new(tiny_config()).unwrap()
}

/// Two records per synthetic image at 16 pixels.
pub fn tiny_data(model: &Model, images: usize) -> Dataset {
    let opts = SyntheticOptions { images, size: 16, ..Default::default() };
    synthetic_dataset(&opts, 16, &mut |t| model.embed_text_raw(t)).unwrap()
}

pub fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 8, epochs, base_lr: 1e-3, warmup_steps: 2, milestones: vec![], ..Default::default() }
}

/// Flags that select `tiny_config` on the command line.
pub const TINY_FLAGS: &[&str] = &[
    "--image-size", "16", "--patch-size", "4", "--width", "16", "--embed-dim", "8", "--depth", "2", "--heads", "2",
    "--mlp-ratio", "2", "--vocab-size", "128", "--max-len", "16", "--trainable-blocks", "2", "--fusion-heads", "2",
    "--fusion-mlp-dim", "32", "--init-seed", "3",
];
