use alloc::string::String;
use alloc::vec::Vec;

use super::{softmax_in_place, Linear};
use crate::params::{join, Parameters};
use crate::tensor::{gemm, MatViewMut, Matrix};
use crate::Rng;

/// Multi-head scaled dot-product attention with separate query, key and
/// value inputs. Self-attention passes the same matrix three times.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    query_in: Matrix,
    key_in: Matrix,
    value_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Row-stochastic attention weights, one `Lq x Lk` matrix per head.
    pub probs: Vec<Matrix>,
    ctx: Matrix,
}

/// Gradients with respect to the three attention inputs.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

impl AttentionGrads {
    /// Total input gradient for self-attention.
    pub fn sum(mut self) -> Matrix {
        self.query.add_assign(&self.key);
        self.query.add_assign(&self.value);
        self.query
    }
}

impl Attention {
    pub fn new(dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            o: Linear::new(dim, dim, rng),
            heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.q.fan_in()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
            heads: self.heads,
        }
    }

    pub fn forward(&self, query_in: &Matrix, key_in: &Matrix, value_in: &Matrix) -> (Matrix, AttentionCache) {
        debug_assert_eq!(key_in.rows(), value_in.rows());
        let q = self.q.forward(query_in);
        let k = self.k.forward(key_in);
        let v = self.v.forward(value_in);
        let dim = self.dim();
        let hd = dim / self.heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let (lq, lk) = (q.rows(), k.rows());
        let mut ctx = Matrix::zeros(lq, dim);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut p = Matrix::zeros(lq, lk);
            gemm(scale, q.col_block(h * hd, hd), k.col_block(h * hd, hd).t(), 0.0, &mut p);
            for r in 0..lq {
                softmax_in_place(p.row_mut(r));
            }
            gemm(1.0, p.view(), v.col_block(h * hd, hd), 0.0, MatViewMut::col_block(&mut ctx, h * hd, hd));
            probs.push(p);
        }
        let out = self.o.forward(&ctx);
        let cache = AttentionCache {
            query_in: query_in.clone(),
            key_in: key_in.clone(),
            value_in: value_in.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &AttentionCache, dout: &Matrix, grad: &mut Attention) -> AttentionGrads {
        let dim = self.dim();
        let hd = dim / self.heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let dctx = self.o.backward(&cache.ctx, dout, &mut grad.o);
        let (lq, lk) = (cache.q.rows(), cache.k.rows());
        let mut dq = Matrix::zeros(lq, dim);
        let mut dk = Matrix::zeros(lk, dim);
        let mut dv = Matrix::zeros(lk, dim);
        let mut dp = Matrix::zeros(lq, lk);
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = h * hd;
            // dP = dctx_h · v_hᵀ ; dv_h = Pᵀ · dctx_h
            gemm(1.0, dctx.col_block(cols, hd), cache.v.col_block(cols, hd).t(), 0.0, &mut dp);
            gemm(1.0, p.view().t(), dctx.col_block(cols, hd), 0.0, MatViewMut::col_block(&mut dv, cols, hd));
            // softmax backward, in place on dp
            for r in 0..lq {
                let pr = p.row(r);
                let dr = dp.row_mut(r);
                let inner: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - inner);
                }
            }
            gemm(scale, dp.view(), cache.k.col_block(cols, hd), 0.0, MatViewMut::col_block(&mut dq, cols, hd));
            gemm(scale, dp.view().t(), cache.q.col_block(cols, hd), 0.0, MatViewMut::col_block(&mut dk, cols, hd));
        }
        AttentionGrads {
            query: self.q.backward(&cache.query_in, &dq, &mut grad.q),
            key: self.k.backward(&cache.key_in, &dk, &mut grad.k),
            value: self.v.backward(&cache.value_in, &dv, &mut grad.v),
        }
    }
}

impl Parameters for Attention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}
