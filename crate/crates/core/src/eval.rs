//! Zero-shot classification, region retrieval, deterministic evaluation
//! prompts and metric aggregation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{mask_stats, pixel_center};
use crate::error::{invalid, Result};
use crate::mask::Mask;
use crate::objective::{normalize, softmax_scores};
use crate::prompt::{Point, SpatialPrompt};
use crate::tensor::dot;

/// Class name to caption templates. Templates may use `{class}` and
/// `{modality}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassPromptSet {
    pub classes: BTreeMap<String, Vec<String>>,
}

impl ClassPromptSet {
    /// The same templates for every class.
    pub fn uniform(classes: &[&str], templates: &[&str]) -> Self {
        let t: Vec<String> = templates.iter().map(|s| String::from(*s)).collect();
        Self { classes: classes.iter().map(|c| (String::from(*c), t.clone())).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(invalid!("class prompt set is empty"));
        }
        for (name, templates) in &self.classes {
            if templates.is_empty() {
                return Err(invalid!("class {name} has no templates"));
            }
            if templates.iter().any(|t| render(t, name, "").trim().is_empty()) {
                return Err(invalid!("class {name} has a template that renders empty"));
            }
        }
        Ok(())
    }

    pub fn rendered(&self, class: &str, modality: &str) -> Vec<String> {
        self.classes.get(class).map(|ts| ts.iter().map(|t| render(t, class, modality)).collect()).unwrap_or_default()
    }
}

pub fn render(template: &str, class: &str, modality: &str) -> String {
    template.replace("{class}", class).replace("{modality}", modality)
}

/// Normalize each vector, average, and normalize the mean.
pub fn ensemble_vectors(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or_else(|| invalid!("cannot ensemble an empty template set"))?;
    let mut mean = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != mean.len() {
            return Err(invalid!("embedding widths differ in ensemble"));
        }
        for (m, x) in mean.iter_mut().zip(normalize(v)?) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    normalize(&mean)
}

/// Embed each text with `embed` and ensemble the results.
pub fn ensemble_text_embedding(texts: &[String], embed: &mut dyn FnMut(&str) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    if texts.is_empty() {
        return Err(invalid!("cannot ensemble an empty template set"));
    }
    let vs = texts.iter().map(|t| embed(t)).collect::<Result<Vec<_>>>()?;
    ensemble_vectors(&vs)
}

/// Unit-norm class embeddings, in lexicographic class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    pub names: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl ClassEmbeddings {
    pub fn build(
        set: &ClassPromptSet,
        modality: &str,
        embed: &mut dyn FnMut(&str) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        set.validate()?;
        let mut names = Vec::new();
        let mut vectors = Vec::new();
        for name in set.classes.keys() {
            vectors.push(ensemble_text_embedding(&set.rendered(name, modality), embed)?);
            names.push(name.clone());
        }
        Ok(Self { names, vectors })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: String,
    /// Cosine score per class, aligned with [`ClassEmbeddings::names`].
    pub scores: Vec<f64>,
    /// Class indices from best to worst.
    pub ranking: Vec<usize>,
}

/// Indices sorted by descending score; ties keep the input order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(core::cmp::Ordering::Equal));
    idx
}

/// Nearest class by cosine. Ties go to the lexicographically first name.
pub fn classify(query: &[f64], classes: &ClassEmbeddings) -> Result<Classification> {
    if classes.names.is_empty() {
        return Err(invalid!("no classes to choose from"));
    }
    let q = normalize(query)?;
    let scores: Vec<f64> = classes.vectors.iter().map(|v| dot(&q, v)).collect();
    let ranking = rank_desc(&scores);
    Ok(Classification { label: classes.names[ranking[0]].clone(), scores, ranking })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMatch {
    pub index: usize,
    pub cosine: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// Best `k` candidates.
    pub top: Vec<RankedMatch>,
    /// Softmax confidence of every candidate, in input order.
    pub confidences: Vec<f64>,
}

/// Rank unit-norm candidates against a query. Confidences are a softmax of
/// `scale * cosine` over all candidates.
pub fn region_retrieval(query: &[f64], candidates: &[Vec<f64>], k: usize, scale: f64) -> Result<Retrieval> {
    if k == 0 || k > candidates.len() {
        return Err(invalid!("k = {k} must lie in 1..={}", candidates.len()));
    }
    let q = normalize(query)?;
    let cos: Vec<f64> = candidates.iter().map(|c| dot(&q, c)).collect();
    let confidences = softmax_scores(&cos, scale);
    let top = rank_desc(&cos)
        .into_iter()
        .take(k)
        .map(|i| RankedMatch { index: i, cosine: cos[i], confidence: confidences[i] })
        .collect();
    Ok(Retrieval { top, confidences })
}

/// How evaluation prompts are derived from a region mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    None,
    Point,
    Box,
    Both,
    Mask,
}

impl PromptMode {
    pub const ALL: [PromptMode; 5] = [PromptMode::None, PromptMode::Point, PromptMode::Box, PromptMode::Both, PromptMode::Mask];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMode::None => "none",
            PromptMode::Point => "point",
            PromptMode::Box => "box",
            PromptMode::Both => "both",
            PromptMode::Mask => "mask",
        }
    }
}

impl FromStr for PromptMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid!("unknown prompt mode {s:?}; expected none, point, box, both or mask"))
    }
}

/// Squared Euclidean distance of every pixel to the nearest background
/// pixel, treating everything outside the image as background.
pub fn distance_transform_sq(mask: &Mask) -> Vec<f64> {
    let (h, w) = (mask.height() + 2, mask.width() + 2);
    let inside = |x: usize, y: usize| x > 0 && y > 0 && x < w - 1 && y < h - 1 && mask.get(x - 1, y - 1);
    let big = ((h * h + w * w) as f64) * 4.0;
    let mut grid = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            grid[y * w + x] = if inside(x, y) { big } else { 0.0 };
        }
    }
    let mut buf = vec![0.0; h.max(w)];
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| grid[y * w + x]).collect();
        edt_1d(&col, &mut buf[..h]);
        for y in 0..h {
            grid[y * w + x] = buf[y];
        }
    }
    for y in 0..h {
        let row: Vec<f64> = grid[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, &mut buf[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&buf[..w]);
    }
    let mut out = Vec::with_capacity(mask.height() * mask.width());
    for y in 1..h - 1 {
        out.extend_from_slice(&grid[y * w + 1..y * w + w - 1]);
    }
    out
}

/// Lower envelope of parabolas (Felzenszwalb and Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

/// The mask pixel farthest from the background, first in raster order on
/// ties, as a normalized pixel centre.
pub fn center_point(mask: &Mask) -> Result<Point> {
    if mask.is_empty() {
        return Err(invalid!("mask has no set pixels"));
    }
    let dt = distance_transform_sq(mask);
    let mut best = 0;
    for (i, &v) in dt.iter().enumerate() {
        if v > dt[best] {
            best = i;
        }
    }
    Ok(pixel_center(mask, best % mask.width(), best / mask.width()))
}

/// Deterministic evaluation prompt for a region.
pub fn eval_prompt(mode: PromptMode, mask: &Mask) -> Result<SpatialPrompt> {
    Ok(match mode {
        PromptMode::None => SpatialPrompt::None,
        PromptMode::Point => SpatialPrompt::Points(vec![center_point(mask)?]),
        PromptMode::Box => SpatialPrompt::Box(mask_stats(mask)?.bbox_prompt()),
        PromptMode::Both => {
            SpatialPrompt::PointsAndBox { points: vec![center_point(mask)?], bbox: mask_stats(mask)?.bbox_prompt() }
        }
        PromptMode::Mask => {
            if mask.is_empty() {
                return Err(invalid!("mask has no set pixels"));
            }
            SpatialPrompt::Mask(mask.clone())
        }
    })
}

/// One evaluated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: usize,
    pub truth: String,
    pub pred: String,
    /// Up to five best labels, best first.
    pub top5: Vec<String>,
    /// Score of the predicted label.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub n: usize,
    pub top1_correct: usize,
    pub top5_correct: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub top5: f64,
    /// Macro average of per-class top-1 recall.
    pub recall: f64,
    pub n_samples: usize,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

/// Reduce predictions to a report. Order-independent.
pub fn aggregate(preds: &[Prediction]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(invalid!("no predictions to aggregate"));
    }
    let mut per_class: BTreeMap<String, ClassMetrics> = BTreeMap::new();
    let (mut t1, mut t5) = (0usize, 0usize);
    for p in preds {
        let c = per_class.entry(p.truth.clone()).or_default();
        c.n += 1;
        let hit1 = p.pred == p.truth;
        let hit5 = hit1 || p.top5.iter().any(|l| *l == p.truth);
        c.top1_correct += hit1 as usize;
        c.top5_correct += hit5 as usize;
        t1 += hit1 as usize;
        t5 += hit5 as usize;
    }
    for c in per_class.values_mut() {
        c.recall = c.top1_correct as f64 / c.n as f64;
    }
    let recall = per_class.values().map(|c| c.recall).sum::<f64>() / per_class.len() as f64;
    let n = preds.len() as f64;
    Ok(MetricsReport { top1: t1 as f64 / n, top5: t5 as f64 / n, recall, n_samples: preds.len(), per_class })
}
