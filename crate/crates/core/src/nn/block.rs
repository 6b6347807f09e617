use alloc::string::String;

use super::{Attention, AttentionCache, LayerNorm, LayerNormCache, Mlp, MlpCache};
use crate::params::{join, Parameters};
use crate::tensor::Matrix;
use crate::Rng;

/// Pre-norm transformer encoder block:
/// `x + Attn(LN(x))` followed by `x + MLP(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreNormBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct PreNormBlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl PreNormBlock {
    pub fn new(dim: usize, heads: usize, mlp_hidden: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, mlp_hidden, dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, PreNormBlockCache) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&n1, &n1, &n1);
        let x1 = x.add(&a);
        let (n2, ln2) = self.ln2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&n2);
        (x1.add(&m), PreNormBlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&self, cache: &PreNormBlockCache, dy: &Matrix, grad: &mut PreNormBlock) -> Matrix {
        let dn2 = self.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
        let mut dx1 = self.ln2.backward(&cache.ln2, &dn2, &mut grad.ln2);
        dx1.add_assign(dy);
        let dn1 = self.attn.backward(&cache.attn, &dx1, &mut grad.attn).sum();
        let mut dx = self.ln1.backward(&cache.ln1, &dn1, &mut grad.ln1);
        dx.add_assign(&dx1);
        dx
    }
}

impl Parameters for PreNormBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}
