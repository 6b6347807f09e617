//! Prompt-conditioned attention block.
//!
//! Each fusion layer runs, with post-norm residual wrappers
//! (`LN(x + sublayer(x))`):
//!
//! 1. self-attention over the sparse prompt tokens, and
//!    `image' = image + dense` (or `image` when no mask is given);
//! 2. cross-attention with the sparse tokens as queries over `image'`,
//!    followed by a pointwise MLP;
//! 3. cross-attention with `image'` as queries over the updated sparse
//!    tokens.
//!
//! The image tokens of the last layer are averaged over the patch axis and
//! mapped to the joint embedding space by a two-layer GELU MLP.
//!
//! When an image positional grid is supplied it is added to the image-side
//! keys of step 2 and the image-side queries of step 3 only; values and the
//! residual stream never see it.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Attention, AttentionCache, LayerNorm, LayerNormCache, Mlp, MlpCache};
use crate::params::{join, Parameters};
use crate::tensor::Matrix;
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub fusion_depth: usize,
    pub fusion_heads: usize,
    pub fusion_mlp_dim: usize,
    /// Add the Fourier encoding of patch centres to image-side attention
    /// keys/queries.
    pub image_key_pe: bool,
    /// Standard deviation of the Fourier frequency matrix.
    pub pe_scale: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { fusion_depth: 1, fusion_heads: 4, fusion_mlp_dim: 256, image_key_pe: true, pe_scale: 2.0 }
    }
}

/// Unit-norm (or raw) image-side embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    pub vector: Vec<f64>,
    pub normalized: bool,
}

/// Attention weights from steps 2 and 3 of the last fusion layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// `heads` matrices of shape `S x L` (sparse queries over image tokens).
    pub step2_weights: Vec<Matrix>,
    /// `heads` matrices of shape `L x S` (image queries over sparse tokens).
    pub step3_weights: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer {
    pub self_attn: Attention,
    pub ln_self: LayerNorm,
    pub cross_sparse_to_image: Attention,
    pub ln_cross_sparse: LayerNorm,
    pub mlp: Mlp,
    pub ln_mlp: LayerNorm,
    pub cross_image_to_sparse: Attention,
    pub ln_cross_image: LayerNorm,
}

#[derive(Debug, Clone)]
struct LayerCache {
    self_attn: AttentionCache,
    ln_self: LayerNormCache,
    cross_s: AttentionCache,
    ln_cross_s: LayerNormCache,
    mlp: MlpCache,
    ln_mlp: LayerNormCache,
    cross_i: AttentionCache,
    ln_cross_i: LayerNormCache,
}

impl FusionLayer {
    fn new(width: usize, heads: usize, mlp_dim: usize, rng: &mut Rng) -> Self {
        let mut cross_sparse_to_image = Attention::new(width, heads, rng);
        cross_sparse_to_image.k = cross_sparse_to_image.q.clone();
        Self {
            self_attn: Attention::new(width, heads, rng),
            ln_self: LayerNorm::new(width),
            cross_sparse_to_image,
            ln_cross_sparse: LayerNorm::new(width),
            mlp: Mlp::new(width, mlp_dim, width, rng),
            ln_mlp: LayerNorm::new(width),
            cross_image_to_sparse: Attention::new(width, heads, rng),
            ln_cross_image: LayerNorm::new(width),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            self_attn: self.self_attn.zeros_like(),
            ln_self: self.ln_self.zeros_like(),
            cross_sparse_to_image: self.cross_sparse_to_image.zeros_like(),
            ln_cross_sparse: self.ln_cross_sparse.zeros_like(),
            mlp: self.mlp.zeros_like(),
            ln_mlp: self.ln_mlp.zeros_like(),
            cross_image_to_sparse: self.cross_image_to_sparse.zeros_like(),
            ln_cross_image: self.ln_cross_image.zeros_like(),
        }
    }

    fn forward(&self, sparse: &Matrix, image: &Matrix, image_pe: Option<&Matrix>) -> (Matrix, Matrix, LayerCache) {
        // (1)
        let (sa, self_attn) = self.self_attn.forward(sparse, sparse, sparse);
        let (a1, ln_self) = self.ln_self.forward(&sparse.add(&sa));
        // (2)
        let image_pos = image_pe.map(|pe| image.add(pe));
        let image_keys = image_pos.as_ref().unwrap_or(image);
        let (ca, cross_s) = self.cross_sparse_to_image.forward(&a1, image_keys, image);
        let (c, ln_cross_s) = self.ln_cross_sparse.forward(&a1.add(&ca));
        let (m, mlp) = self.mlp.forward(&c);
        let (a2, ln_mlp) = self.ln_mlp.forward(&c.add(&m));
        // (3)
        let (cb, cross_i) = self.cross_image_to_sparse.forward(image_keys, &a2, &a2);
        let (i3, ln_cross_i) = self.ln_cross_image.forward(&image.add(&cb));
        let cache = LayerCache { self_attn, ln_self, cross_s, ln_cross_s, mlp, ln_mlp, cross_i, ln_cross_i };
        (a2, i3, cache)
    }

    /// Returns `(d_sparse_in, d_image_in)`.
    fn backward(&self, cache: &LayerCache, d_a2: &Matrix, d_i3: &Matrix, grad: &mut FusionLayer) -> (Matrix, Matrix) {
        // (3)
        let d_pre_i = self.ln_cross_image.backward(&cache.ln_cross_i, d_i3, &mut grad.ln_cross_image);
        let g3 = self.cross_image_to_sparse.backward(&cache.cross_i, &d_pre_i, &mut grad.cross_image_to_sparse);
        let mut d_image = d_pre_i;
        d_image.add_assign(&g3.query);
        let mut d_a2_total = d_a2.clone();
        d_a2_total.add_assign(&g3.key);
        d_a2_total.add_assign(&g3.value);
        // (2)
        let d_pre_m = self.ln_mlp.backward(&cache.ln_mlp, &d_a2_total, &mut grad.ln_mlp);
        let mut d_c = self.mlp.backward(&cache.mlp, &d_pre_m, &mut grad.mlp);
        d_c.add_assign(&d_pre_m);
        let d_pre_c = self.ln_cross_sparse.backward(&cache.ln_cross_s, &d_c, &mut grad.ln_cross_sparse);
        let g2 = self.cross_sparse_to_image.backward(&cache.cross_s, &d_pre_c, &mut grad.cross_sparse_to_image);
        let mut d_a1 = d_pre_c;
        d_a1.add_assign(&g2.query);
        d_image.add_assign(&g2.key);
        d_image.add_assign(&g2.value);
        // (1)
        let d_pre_s = self.ln_self.backward(&cache.ln_self, &d_a1, &mut grad.ln_self);
        let mut d_sparse = self.self_attn.backward(&cache.self_attn, &d_pre_s, &mut grad.self_attn).sum();
        d_sparse.add_assign(&d_pre_s);
        (d_sparse, d_image)
    }
}

impl Parameters for FusionLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.ln_self.visit(&join(prefix, "ln_self"), f);
        self.cross_sparse_to_image.visit(&join(prefix, "cross_sparse_to_image"), f);
        self.ln_cross_sparse.visit(&join(prefix, "ln_cross_sparse"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.ln_mlp.visit(&join(prefix, "ln_mlp"), f);
        self.cross_image_to_sparse.visit(&join(prefix, "cross_image_to_sparse"), f);
        self.ln_cross_image.visit(&join(prefix, "ln_cross_image"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.ln_self.visit_mut(&join(prefix, "ln_self"), f);
        self.cross_sparse_to_image.visit_mut(&join(prefix, "cross_sparse_to_image"), f);
        self.ln_cross_sparse.visit_mut(&join(prefix, "ln_cross_sparse"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.ln_mlp.visit_mut(&join(prefix, "ln_mlp"), f);
        self.cross_image_to_sparse.visit_mut(&join(prefix, "cross_image_to_sparse"), f);
        self.ln_cross_image.visit_mut(&join(prefix, "ln_cross_image"), f);
    }
}

/// Fusion layers plus the pooled projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBlock {
    pub layers: Vec<FusionLayer>,
    pub head: Mlp,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    layers: Vec<LayerCache>,
    head: MlpCache,
    num_tokens: usize,
    has_dense: bool,
}

/// Gradients with respect to the fusion inputs.
#[derive(Debug, Clone)]
pub struct FusionInputGrads {
    pub image_tokens: Matrix,
    pub sparse: Matrix,
    pub dense: Option<Matrix>,
}

impl FusionBlock {
    pub fn new(width: usize, embed_dim: usize, cfg: &FusionConfig, rng: &mut Rng) -> Self {
        Self {
            layers: (0..cfg.fusion_depth.max(1))
                .map(|_| FusionLayer::new(width, cfg.fusion_heads, cfg.fusion_mlp_dim, rng))
                .collect(),
            head: Mlp::new(width, width, embed_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(FusionLayer::zeros_like).collect(), head: self.head.zeros_like() }
    }

    pub fn width(&self) -> usize {
        self.head.fc1.fan_in()
    }

    /// Fuse patch tokens with prompt embeddings into one raw embedding.
    pub fn forward(
        &self,
        image_tokens: &Matrix,
        sparse: &Matrix,
        dense: Option<&Matrix>,
        image_pe: Option<&Matrix>,
    ) -> Result<(FusedEmbedding, AttentionTrace, FusionCache)> {
        let width = self.width();
        if image_tokens.cols() != width || image_tokens.rows() == 0 {
            return Err(shape_err!("image tokens {:?} do not have width {width}", image_tokens.shape()));
        }
        if sparse.cols() != width || sparse.rows() == 0 {
            return Err(shape_err!("sparse tokens {:?} must be S x {width} with S >= 1", sparse.shape()));
        }
        if let Some(d) = dense {
            if d.shape() != image_tokens.shape() {
                return Err(shape_err!("dense grid {:?} does not match image tokens {:?}", d.shape(), image_tokens.shape()));
            }
        }
        if let Some(pe) = image_pe {
            if pe.shape() != image_tokens.shape() {
                return Err(shape_err!("positional grid {:?} does not match image tokens", pe.shape()));
            }
        }
        if image_tokens.has_nan() || sparse.has_nan() || dense.is_some_and(Matrix::has_nan) {
            return Err(Error::Numerical(String::from("NaN in fusion inputs")));
        }
        let mut image = match dense {
            Some(d) => image_tokens.add(d),
            None => image_tokens.clone(),
        };
        let mut tokens = sparse.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a2, i3, cache) = layer.forward(&tokens, &image, image_pe);
            caches.push(cache);
            tokens = a2;
            image = i3;
        }
        let pooled = Matrix::row_vector(image.mean_rows());
        let (out, head) = self.head.forward(&pooled);
        let last = caches.last().expect("at least one fusion layer");
        let trace = AttentionTrace {
            step2_weights: last.cross_s.probs.clone(),
            step3_weights: last.cross_i.probs.clone(),
        };
        let cache = FusionCache { layers: caches, head, num_tokens: image_tokens.rows(), has_dense: dense.is_some() };
        Ok((FusedEmbedding { vector: out.into_vec(), normalized: false }, trace, cache))
    }

    pub fn backward(&self, cache: &FusionCache, d_out: &[f64], grad: &mut FusionBlock) -> FusionInputGrads {
        let d_pooled = self.head.backward(&cache.head, &Matrix::row_vector(d_out.to_vec()), &mut grad.head);
        let l = cache.num_tokens;
        let mut d_image = Matrix::zeros(l, self.width());
        for r in 0..l {
            for (o, g) in d_image.row_mut(r).iter_mut().zip(d_pooled.as_slice()) {
                *o = g / l as f64;
            }
        }
        let s = cache.layers[0].self_attn.probs[0].rows();
        let mut d_tokens = Matrix::zeros(s, self.width());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (ds, di) = layer.backward(&cache.layers[i], &d_tokens, &d_image, &mut grad.layers[i]);
            d_tokens = ds;
            d_image = di;
        }
        let dense = cache.has_dense.then(|| d_image.clone());
        FusionInputGrads { image_tokens: d_image, sparse: d_tokens, dense }
    }
}

impl Parameters for FusionBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &alloc::format!("layers.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &alloc::format!("layers.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// `h x w` heatmap in `[0, 1]`: step-2 attention averaged over heads and
/// sparse tokens, then min-max normalized. A constant map becomes all zeros.
pub fn attention_map(trace: &AttentionTrace, grid: (usize, usize)) -> Result<Matrix> {
    let (h, w) = grid;
    let first = trace.step2_weights.first().ok_or_else(|| shape_err!("empty attention trace"))?;
    if first.cols() != h * w {
        return Err(shape_err!("trace covers {} tokens, grid {h}x{w} has {}", first.cols(), h * w));
    }
    let mut acc = vec![0.0; h * w];
    let mut count = 0usize;
    for head in &trace.step2_weights {
        for r in 0..head.rows() {
            for (a, v) in acc.iter_mut().zip(head.row(r)) {
                *a += v;
            }
            count += 1;
        }
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    let min = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 || !range.is_finite() {
        acc.iter_mut().for_each(|a| *a = 0.0);
    } else {
        acc.iter_mut().for_each(|a| *a = (*a - min) / range);
    }
    Matrix::from_vec(h, w, acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(width: usize) -> FusionBlock {
        let cfg = FusionConfig { fusion_heads: 2, fusion_mlp_dim: 2 * width, ..Default::default() };
        FusionBlock::new(width, 8, &cfg, &mut crate::rng_from_seed(21))
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = crate::rng_from_seed(3);
        let b = block(16);
        let img = Matrix::randn(16, 16, 1.0, &mut rng);
        let sp = Matrix::randn(3, 16, 1.0, &mut rng);
        let (out, trace, _) = b.forward(&img, &sp, None, None).unwrap();
        assert_eq!(out.vector.len(), 8);
        assert_eq!(trace.step2_weights.len(), 2);
        for m in trace.step2_weights.iter().chain(&trace.step3_weights) {
            for r in 0..m.rows() {
                let s: f64 = m.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(m.row(r).iter().all(|&v| v >= 0.0));
            }
        }
        assert_eq!(trace.step2_weights[0].shape(), (3, 16));
        assert_eq!(trace.step3_weights[0].shape(), (16, 3));
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        let mut rng = crate::rng_from_seed(3);
        let b = block(16);
        let img = Matrix::randn(16, 16, 1.0, &mut rng);
        let sp = Matrix::randn(2, 16, 1.0, &mut rng);
        let bad_dense = Matrix::zeros(15, 16);
        assert!(matches!(b.forward(&img, &sp, Some(&bad_dense), None), Err(Error::Shape(_))));
        assert!(matches!(b.forward(&img, &Matrix::zeros(0, 16), None, None), Err(Error::Shape(_))));
        let mut nan = img.clone();
        nan.set(0, 0, f64::NAN);
        assert!(matches!(b.forward(&nan, &sp, None, None), Err(Error::Numerical(_))));
    }

    #[test]
    fn heatmap_degenerate_cases() {
        let uniform = AttentionTrace { step2_weights: vec![Matrix::filled(1, 4, 0.25)], step3_weights: vec![] };
        let hm = attention_map(&uniform, (2, 2)).unwrap();
        assert!(hm.as_slice().iter().all(|&v| v == 0.0));
        let mut one_hot = Matrix::zeros(1, 4);
        one_hot.set(0, 2, 1.0);
        let trace = AttentionTrace { step2_weights: vec![one_hot], step3_weights: vec![] };
        let hm = attention_map(&trace, (2, 2)).unwrap();
        assert_eq!(hm.as_slice(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(attention_map(&trace, (3, 2)).is_err());
    }
}
