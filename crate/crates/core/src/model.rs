//! The full model: image encoder, frozen text encoder, prompt encoder,
//! fusion block and learnable logit scale.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::{tokenize, EncoderConfig, ImageEncoder, ImageEncoderCache, ImageSample, PatchTokens, TextEmbedding, TextEncoder, TokenSequence};
use crate::error::{invalid, shape_err, Result};
use crate::fusion::{AttentionTrace, FusedEmbedding, FusionBlock, FusionCache, FusionConfig};
use crate::objective::{normalize, LogitScale, INIT_LOG_SCALE};
use crate::params::Parameters;
use crate::prompt::{DenseEmbeddings, PromptCache, PromptEncoder, SparseEmbeddings, SpatialPrompt};
use crate::tensor::Matrix;

/// Complete model shape, serialized as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub encoder: EncoderConfig,
    #[serde(flatten)]
    pub fusion: FusionConfig,
    /// Seed for weight initialization.
    #[serde(default = "default_init_seed")]
    pub init_seed: u64,
}

fn default_init_seed() -> u64 {
    2025
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), fusion: FusionConfig::default(), init_seed: default_init_seed() }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let f = &self.fusion;
        if f.fusion_depth == 0 || f.fusion_mlp_dim == 0 {
            return Err(invalid!("fusion_depth and fusion_mlp_dim must be positive"));
        }
        if f.fusion_heads == 0 || self.encoder.width % f.fusion_heads != 0 {
            return Err(invalid!("width {} not divisible by fusion_heads {}", self.encoder.width, f.fusion_heads));
        }
        if !(f.pe_scale > 0.0) {
            return Err(invalid!("pe_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub prompt: PromptEncoder,
    pub fusion: FusionBlock,
    /// `1 x 1` matrix holding `log(s)`.
    pub logit_scale: Matrix,
}

/// Activations kept by [`Model::forward_sample`].
#[derive(Debug, Clone)]
pub struct SampleCache {
    image: ImageEncoderCache,
    prompt: PromptCache,
    fusion: FusionCache,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng_from_seed(config.init_seed);
        let e = &config.encoder;
        let image = ImageEncoder::new(e, &mut rng);
        let text = TextEncoder::new(e, &mut rng);
        let prompt = PromptEncoder::new(e.image_size, e.patch_size, e.width, config.fusion.pe_scale, &mut rng);
        let fusion = FusionBlock::new(e.width, e.embed_dim, &config.fusion, &mut rng);
        Ok(Self { config, image, text, prompt, fusion, logit_scale: Matrix::filled(1, 1, INIT_LOG_SCALE) })
    }

    /// A gradient buffer with every parameter zeroed.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
            prompt: self.prompt.zeros_like(),
            fusion: self.fusion.zeros_like(),
            logit_scale: Matrix::zeros(1, 1),
        }
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.config.encoder
    }

    pub fn trainable_blocks(&self) -> usize {
        self.config.encoder.trainable_blocks
    }

    pub fn set_trainable_blocks(&mut self, k: usize) -> Result<()> {
        self.config.encoder = self.config.encoder.set_trainable_blocks(k)?;
        Ok(())
    }

    pub fn logit_scale(&self) -> LogitScale {
        LogitScale::new(self.logit_scale.get(0, 0))
    }

    /// Whether the named parameter receives gradient updates.
    ///
    /// The text encoder and the Fourier frequencies are always frozen. In the
    /// image encoder only the last `trainable_blocks` blocks train, and the
    /// patch embedding and position table train only when every block does.
    pub fn is_trainable(&self, name: &str) -> bool {
        if name.starts_with("text.") || name == "prompt.codec.frequencies" {
            return false;
        }
        if let Some(rest) = name.strip_prefix("image.") {
            let depth = self.image.depth();
            let k = self.trainable_blocks();
            if let Some(block) = rest.strip_prefix("blocks.") {
                let idx: usize = block.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
                return idx + k >= depth;
            }
            return k == depth;
        }
        true
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        tokenize(text, &self.config.encoder)
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<TextEmbedding> {
        self.text.encode(tokens)
    }

    /// Raw (unnormalized) caption embedding.
    pub fn embed_text_raw(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.encode_text(&self.tokenize(text)?)?.vector)
    }

    /// Unit-norm caption embedding.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        normalize(&self.embed_text_raw(text)?)
    }

    pub fn encode_image(&self, image: &ImageSample) -> Result<PatchTokens> {
        let e = &self.config.encoder;
        if image.height() != e.image_size || image.width() != e.image_size {
            return Err(shape_err!(
                "image is {}x{}, model expects {}x{}",
                image.height(),
                image.width(),
                e.image_size,
                e.image_size
            ));
        }
        Ok(self.image.forward(image, 0)?.0)
    }

    pub fn encode_prompt(&self, prompt: &SpatialPrompt) -> Result<(SparseEmbeddings, Option<DenseEmbeddings>)> {
        let (s, d, _) = self.prompt.encode(prompt)?;
        Ok((s, d))
    }

    fn image_pe(&self, grid: (usize, usize)) -> Option<Matrix> {
        self.config.fusion.image_key_pe.then(|| self.prompt.codec.grid(grid.0, grid.1))
    }

    pub fn fuse(
        &self,
        tokens: &PatchTokens,
        sparse: &SparseEmbeddings,
        dense: Option<&DenseEmbeddings>,
    ) -> Result<(FusedEmbedding, AttentionTrace)> {
        let pe = self.image_pe(tokens.grid);
        let (out, trace, _) =
            self.fusion.forward(&tokens.tokens, &sparse.tokens, dense.map(|d| &d.grid), pe.as_ref())?;
        Ok((out, trace))
    }

    /// Unit-norm region embedding for already encoded image tokens.
    pub fn embed_region(&self, tokens: &PatchTokens, prompt: &SpatialPrompt) -> Result<(Vec<f64>, AttentionTrace)> {
        let (s, d) = self.encode_prompt(prompt)?;
        let (fused, trace) = self.fuse(tokens, &s, d.as_ref())?;
        Ok((normalize(&fused.vector)?, trace))
    }

    /// Training forward pass for one normalized image and prompt. Returns the
    /// raw fused embedding.
    pub fn forward_sample(&self, image: &ImageSample, prompt: &SpatialPrompt) -> Result<(Vec<f64>, SampleCache)> {
        let (tokens, image_cache) = self.image.forward(image, self.trainable_blocks())?;
        let (sparse, dense, prompt_cache) = self.prompt.encode(prompt)?;
        let pe = self.image_pe(tokens.grid);
        let (out, _, fusion_cache) =
            self.fusion.forward(&tokens.tokens, &sparse.tokens, dense.as_ref().map(|d| &d.grid), pe.as_ref())?;
        Ok((out.vector, SampleCache { image: image_cache, prompt: prompt_cache, fusion: fusion_cache }))
    }

    /// Accumulate parameter gradients for one sample given the gradient of
    /// the loss with respect to its raw fused embedding.
    pub fn backward_sample(&self, cache: &SampleCache, d_out: &[f64], grad: &mut Model) {
        let g = self.fusion.backward(&cache.fusion, d_out, &mut grad.fusion);
        self.prompt.backward(&cache.prompt, &g.sparse, g.dense.as_ref(), &mut grad.prompt);
        self.image.backward(&cache.image, &g.image_tokens, &mut grad.image);
    }

    /// Names of all trainable parameters, in traversal order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _| {
            if self.is_trainable(&n) {
                out.push(n)
            }
        });
        out
    }
}

impl Parameters for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        use crate::params::join;
        self.image.visit(&join(prefix, "image"), f);
        self.text.visit(&join(prefix, "text"), f);
        self.prompt.visit(&join(prefix, "prompt"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        f(join(prefix, "logit_scale"), &self.logit_scale);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        use crate::params::join;
        self.image.visit_mut(&join(prefix, "image"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
        self.prompt.visit_mut(&join(prefix, "prompt"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        f(join(prefix, "logit_scale"), &mut self.logit_scale);
    }
}
