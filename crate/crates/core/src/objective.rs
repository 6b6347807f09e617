//! Normalization, scaled cosine logits and the symmetric contrastive loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::log_sum_exp;
use crate::tensor::{dot, norm, Matrix};

/// Clamp bound for the learnable log scale: `ln(100)`.
pub const MAX_LOG_SCALE: f64 = 4.605_170_185_988_092;
/// Initial log scale.
pub const INIT_LOG_SCALE: f64 = 4.6052;
/// Norms at or below this are rejected by [`normalize`].
pub const NORM_EPS: f64 = 1e-12;
/// Maximum deviation from unit norm accepted by [`similarity_logits`].
pub const UNIT_TOLERANCE: f64 = 1e-3;

/// Learnable temperature, stored as `log(s)` with `s = 1 / tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitScale {
    pub log_scale: f64,
}

impl Default for LogitScale {
    fn default() -> Self {
        Self { log_scale: INIT_LOG_SCALE }
    }
}

impl LogitScale {
    pub fn new(log_scale: f64) -> Self {
        Self { log_scale }
    }

    /// Whether the clamp is active (no gradient reaches `log_scale`).
    pub fn is_clamped(&self) -> bool {
        self.log_scale > MAX_LOG_SCALE
    }

    /// Effective scale `exp(min(log_scale, ln 100))`.
    pub fn scale(&self) -> f64 {
        if self.is_clamped() {
            100.0
        } else {
            libm::exp(self.log_scale)
        }
    }

    pub fn temperature(&self) -> f64 {
        1.0 / self.scale()
    }
}

/// `v / ||v||`.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::Numerical(format!("cannot normalize a vector with norm {n}")));
    }
    if n <= NORM_EPS {
        return Err(Error::Numerical(format!("cannot normalize a vector with norm {n:e}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Gradient of `normalize` at `raw` given the gradient `d_unit` of its
/// output: `(d - u (u . d)) / ||raw||`.
pub fn normalize_backward(raw: &[f64], d_unit: &[f64]) -> Vec<f64> {
    let n = norm(raw);
    let u: Vec<f64> = raw.iter().map(|x| x / n).collect();
    let proj = dot(&u, d_unit);
    u.iter().zip(d_unit).map(|(ui, di)| (di - ui * proj) / n).collect()
}

/// Normalize every row of a matrix.
pub fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&normalize(m.row(r))?);
    }
    Ok(out)
}

/// Scaled cosine logits between image and text rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub logits: Matrix,
    pub scale: f64,
}

/// `logits[i][j] = s * <img_i, txt_j>` for unit-norm rows.
pub fn similarity_logits(img: &Matrix, txt: &Matrix, scale: &LogitScale) -> Result<SimilarityMatrix> {
    if img.cols() != txt.cols() {
        return Err(shape_err!("embedding widths differ: {} vs {}", img.cols(), txt.cols()));
    }
    for (which, m) in [("image", img), ("text", txt)] {
        for r in 0..m.rows() {
            let n = norm(m.row(r));
            if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(invalid!("{which} row {r} has norm {n}, expected unit norm"));
            }
        }
    }
    let s = scale.scale();
    let mut logits = img.matmul_t(txt);
    logits.scale(s);
    Ok(SimilarityMatrix { logits, scale: s })
}

/// Mean cross-entropy of each row against the diagonal (image to text).
pub fn loss_image_to_text(logits: &Matrix) -> Result<f64> {
    check_square(logits)?;
    let n = logits.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        total += log_sum_exp(row.iter().copied()) - row[i];
    }
    Ok(total / n as f64)
}

/// Mean cross-entropy of each column against the diagonal (text to image).
pub fn loss_text_to_image(logits: &Matrix) -> Result<f64> {
    check_square(logits)?;
    let n = logits.rows();
    let mut total = 0.0;
    for j in 0..n {
        let col = (0..n).map(|i| logits.get(i, j));
        total += log_sum_exp(col) - logits.get(j, j);
    }
    Ok(total / n as f64)
}

fn check_square(logits: &Matrix) -> Result<()> {
    if logits.rows() != logits.cols() || logits.rows() == 0 {
        return Err(shape_err!("contrastive loss needs a non-empty square matrix, got {:?}", logits.shape()));
    }
    Ok(())
}

/// `(L_i2t + L_t2i) / 2`.
pub fn nce_loss(m: &SimilarityMatrix) -> Result<f64> {
    nce_loss_from_logits(&m.logits)
}

pub fn nce_loss_from_logits(logits: &Matrix) -> Result<f64> {
    Ok(0.5 * (loss_image_to_text(logits)? + loss_text_to_image(logits)?))
}

/// Loss and its gradient with respect to the logits.
pub fn nce_loss_grad(logits: &Matrix) -> Result<(f64, Matrix)> {
    let loss = nce_loss_from_logits(logits)?;
    let n = logits.rows();
    let w = 1.0 / (2.0 * n as f64);
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        for j in 0..n {
            let p = libm::exp(row[j] - lse);
            d.set(i, j, w * (p - if i == j { 1.0 } else { 0.0 }));
        }
    }
    for j in 0..n {
        let lse = log_sum_exp((0..n).map(|i| logits.get(i, j)));
        for i in 0..n {
            let p = libm::exp(logits.get(i, j) - lse);
            let v = d.get(i, j) + w * (p - if i == j { 1.0 } else { 0.0 });
            d.set(i, j, v);
        }
    }
    Ok((loss, d))
}

/// Everything the trainer needs from one contrastive batch.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub logits: Matrix,
    /// Gradient with respect to the raw (unnormalized) image rows.
    pub d_image: Matrix,
    /// Gradient with respect to the raw text rows.
    pub d_text: Matrix,
    pub d_log_scale: f64,
}

/// Normalize raw embeddings, build logits and back-propagate the loss to
/// the raw embeddings and the log scale.
pub fn contrastive_loss(img_raw: &Matrix, txt_raw: &Matrix, scale: &LogitScale) -> Result<ContrastiveOutput> {
    if img_raw.shape() != txt_raw.shape() {
        return Err(shape_err!("image {:?} and text {:?} batches differ", img_raw.shape(), txt_raw.shape()));
    }
    let img = normalize_rows(img_raw)?;
    let txt = normalize_rows(txt_raw)?;
    let sim = similarity_logits(&img, &txt, scale)?;
    let (loss, d_logits) = nce_loss_grad(&sim.logits)?;
    let d_log_scale = if scale.is_clamped() {
        0.0
    } else {
        d_logits.as_slice().iter().zip(sim.logits.as_slice()).map(|(a, b)| a * b).sum()
    };
    let mut d_img_unit = d_logits.matmul(&txt);
    d_img_unit.scale(sim.scale);
    let mut d_txt_unit = d_logits.transpose().matmul(&img);
    d_txt_unit.scale(sim.scale);
    let back = |raw: &Matrix, d_unit: &Matrix| {
        let mut out = Matrix::zeros(raw.rows(), raw.cols());
        for r in 0..raw.rows() {
            out.row_mut(r).copy_from_slice(&normalize_backward(raw.row(r), d_unit.row(r)));
        }
        out
    };
    Ok(ContrastiveOutput {
        loss,
        d_image: back(img_raw, &d_img_unit),
        d_text: back(txt_raw, &d_txt_unit),
        logits: sim.logits,
        d_log_scale,
    })
}

/// Min, max, mean and diagonal mean of a logit matrix, for diagnostics.
pub fn logit_stats(logits: &Matrix) -> [f64; 4] {
    let s = logits.as_slice();
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = s.iter().sum::<f64>() / s.len().max(1) as f64;
    let n = logits.rows().min(logits.cols());
    let diag = (0..n).map(|i| logits.get(i, i)).sum::<f64>() / n.max(1) as f64;
    [min, max, mean, diag]
}

/// Cosine similarity of two raw vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::Numerical(format!("cosine of near-zero vector ({na:e}, {nb:e})")));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Row-wise softmax of `scale * scores`.
pub fn softmax_scores(scores: &[f64], scale: f64) -> Vec<f64> {
    let mut out: Vec<f64> = scores.iter().map(|s| s * scale).collect();
    if out.is_empty() {
        return vec![];
    }
    crate::nn::softmax_in_place(&mut out);
    out
}
