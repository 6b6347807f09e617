//! Spatial prompts and their encoding into sparse tokens and a dense grid.
//!
//! Points and box corners become `pe(x, y) + type_embedding[kind]` tokens,
//! where `pe` is a random Fourier feature map with a frozen Gaussian
//! frequency matrix. Masks go through a small stack of non-overlapping
//! strided convolutions that lands exactly on the image patch grid. Prompts
//! without sparse geometry (mask-only and no-prompt) contribute a single
//! learnable null token so the fusion block always has at least one query.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::mask::{Mask, Rle};
use crate::nn::{gelu, gelu_grad, Linear};
use crate::params::{join, Parameters};
use crate::tensor::Matrix;
use crate::Rng;

/// A point in normalized `[0, 1]` image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !ok(self.x) || !ok(self.y) {
            return Err(invalid!("point ({}, {}) outside [0, 1]", self.x, self.y));
        }
        Ok(())
    }
}

/// Axis-aligned box in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPrompt {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoxPrompt {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn top_left(&self) -> Point {
        Point::new(self.x_min, self.y_min)
    }

    pub fn bottom_right(&self) -> Point {
        Point::new(self.x_max, self.y_max)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn validate(&self) -> Result<()> {
        self.top_left().validate()?;
        self.bottom_right().validate()?;
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(invalid!(
                "degenerate box ({}, {}, {}, {})",
                self.x_min,
                self.y_min,
                self.x_max,
                self.y_max
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Points,
    Box,
    Mask,
    PointsAndBox,
    None,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] =
        [PromptKind::None, PromptKind::Points, PromptKind::Box, PromptKind::Mask, PromptKind::PointsAndBox];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptKind::Points => "points",
            PromptKind::Box => "box",
            PromptKind::Mask => "mask",
            PromptKind::PointsAndBox => "points_and_box",
            PromptKind::None => "none",
        }
    }
}

/// A user prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialPrompt {
    Points(Vec<Point>),
    Box(BoxPrompt),
    Mask(Mask),
    PointsAndBox { points: Vec<Point>, bbox: BoxPrompt },
    None,
}

impl SpatialPrompt {
    pub fn kind(&self) -> PromptKind {
        match self {
            SpatialPrompt::Points(_) => PromptKind::Points,
            SpatialPrompt::Box(_) => PromptKind::Box,
            SpatialPrompt::Mask(_) => PromptKind::Mask,
            SpatialPrompt::PointsAndBox { .. } => PromptKind::PointsAndBox,
            SpatialPrompt::None => PromptKind::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_points = |pts: &[Point]| -> Result<()> {
            if pts.is_empty() {
                return Err(invalid!("point prompt has no points"));
            }
            pts.iter().try_for_each(Point::validate)
        };
        match self {
            SpatialPrompt::Points(p) => check_points(p),
            SpatialPrompt::Box(b) => b.validate(),
            SpatialPrompt::Mask(m) => {
                if m.is_empty() {
                    Err(invalid!("mask prompt has no set pixels"))
                } else {
                    Ok(())
                }
            }
            SpatialPrompt::PointsAndBox { points, bbox } => {
                check_points(points)?;
                bbox.validate()
            }
            SpatialPrompt::None => Ok(()),
        }
    }
}

/// Wire form shared with the HTTP service and its clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptJson {
    pub kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 2]>>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<Rle>,
}

impl TryFrom<&PromptJson> for SpatialPrompt {
    type Error = crate::Error;

    fn try_from(j: &PromptJson) -> Result<Self> {
        let points = || -> Result<Vec<Point>> {
            let pts = j.points.as_ref().ok_or_else(|| invalid!("kind {} requires points", j.kind.as_str()))?;
            Ok(pts.iter().map(|p| Point::new(p[0], p[1])).collect())
        };
        let bbox = || -> Result<BoxPrompt> {
            let b = j.bbox.ok_or_else(|| invalid!("kind {} requires box", j.kind.as_str()))?;
            Ok(BoxPrompt::new(b[0], b[1], b[2], b[3]))
        };
        let prompt = match j.kind {
            PromptKind::Points => SpatialPrompt::Points(points()?),
            PromptKind::Box => SpatialPrompt::Box(bbox()?),
            PromptKind::Mask => {
                let rle = j.mask_rle.as_ref().ok_or_else(|| invalid!("kind mask requires mask_rle"))?;
                SpatialPrompt::Mask(Mask::from_rle(rle)?)
            }
            PromptKind::PointsAndBox => SpatialPrompt::PointsAndBox { points: points()?, bbox: bbox()? },
            PromptKind::None => SpatialPrompt::None,
        };
        prompt.validate()?;
        Ok(prompt)
    }
}

impl From<&SpatialPrompt> for PromptJson {
    fn from(p: &SpatialPrompt) -> Self {
        let pts = |v: &[Point]| Some(v.iter().map(|p| [p.x, p.y]).collect());
        let bx = |b: &BoxPrompt| Some([b.x_min, b.y_min, b.x_max, b.y_max]);
        let mut j = PromptJson { kind: p.kind(), points: None, bbox: None, mask_rle: None };
        match p {
            SpatialPrompt::Points(v) => j.points = pts(v),
            SpatialPrompt::Box(b) => j.bbox = bx(b),
            SpatialPrompt::Mask(m) => j.mask_rle = Some(m.to_rle()),
            SpatialPrompt::PointsAndBox { points, bbox } => {
                j.points = pts(points);
                j.bbox = bx(bbox);
            }
            SpatialPrompt::None => {}
        }
        j
    }
}

/// Random Fourier features `concat(sin(2π·G·p), cos(2π·G·p))` with a frozen
/// `2 x width/2` Gaussian frequency matrix `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierPositionCodec {
    pub frequencies: Matrix,
}

impl FourierPositionCodec {
    pub fn new(width: usize, scale: f64, rng: &mut Rng) -> Self {
        Self { frequencies: Matrix::randn(2, width / 2, scale, rng) }
    }

    pub fn width(&self) -> usize {
        self.frequencies.cols() * 2
    }

    pub fn encode(&self, x: f64, y: f64) -> Vec<f64> {
        let half = self.frequencies.cols();
        let mut out = vec![0.0; 2 * half];
        let (gx, gy) = (self.frequencies.row(0), self.frequencies.row(1));
        for j in 0..half {
            let angle = 2.0 * PI * (gx[j] * x + gy[j] * y);
            out[j] = libm::sin(angle);
            out[half + j] = libm::cos(angle);
        }
        out
    }

    /// Encodings of the patch-cell centres of an `h x w` grid, raster order.
    pub fn grid(&self, h: usize, w: usize) -> Matrix {
        let mut out = Matrix::zeros(h * w, self.width());
        for gy in 0..h {
            for gx in 0..w {
                let e = self.encode((gx as f64 + 0.5) / w as f64, (gy as f64 + 0.5) / h as f64);
                out.row_mut(gy * w + gx).copy_from_slice(&e);
            }
        }
        out
    }
}

/// Rows of the learnable type table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenType {
    Point = 0,
    TopLeft = 1,
    BottomRight = 2,
    Null = 3,
}

const NUM_TOKEN_TYPES: usize = 4;

/// Stack of non-overlapping strided convolutions (kernel = stride = one
/// prime factor of the patch size, GELU after each) followed by a 1x1
/// projection to the token width.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEncoder {
    pub stages: Vec<Linear>,
    pub proj: Linear,
    factors: Vec<usize>,
    input_size: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct MaskEncoderCache {
    /// Space-to-depth input of each stage and of the projection.
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    dims: Vec<(usize, usize, usize)>,
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while n > 1 {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    out
}

/// `(h*w) x c` map → `(h/f * w/f) x (f*f*c)`, features ordered `(dy, dx, c)`.
fn space_to_depth(x: &Matrix, h: usize, w: usize, f: usize) -> Matrix {
    let c = x.cols();
    let (oh, ow) = (h / f, w / f);
    let mut out = Matrix::zeros(oh * ow, f * f * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = out.row_mut(oy * ow + ox);
            for dy in 0..f {
                for dx in 0..f {
                    let src = x.row((oy * f + dy) * w + ox * f + dx);
                    let dst = (dy * f + dx) * c;
                    row[dst..dst + c].copy_from_slice(src);
                }
            }
        }
    }
    out
}

fn depth_to_space(x: &Matrix, h: usize, w: usize, f: usize, c: usize) -> Matrix {
    let (oh, ow) = (h / f, w / f);
    let mut out = Matrix::zeros(h * w, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = x.row(oy * ow + ox);
            for dy in 0..f {
                for dx in 0..f {
                    let dst = out.row_mut((oy * f + dy) * w + ox * f + dx);
                    let src = (dy * f + dx) * c;
                    dst.copy_from_slice(&row[src..src + c]);
                }
            }
        }
    }
    out
}

impl MaskEncoder {
    pub fn new(image_size: usize, patch_size: usize, width: usize, rng: &mut Rng) -> Self {
        let factors = prime_factors(patch_size);
        let cap = (width / 4).max(4);
        let mut stages = Vec::with_capacity(factors.len());
        let mut c_in = 1;
        for (i, &f) in factors.iter().enumerate() {
            let c_out = (4usize << (2 * i).min(16)).min(cap);
            stages.push(Linear::new(f * f * c_in, c_out, rng));
            c_in = c_out;
        }
        Self { stages, proj: Linear::new(c_in, width, rng), factors, input_size: (image_size, image_size) }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stages: self.stages.iter().map(Linear::zeros_like).collect(),
            proj: self.proj.zeros_like(),
            factors: self.factors.clone(),
            input_size: self.input_size,
        }
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn forward(&self, mask: &Mask) -> Result<(Matrix, MaskEncoderCache)> {
        if (mask.height(), mask.width()) != self.input_size {
            return Err(shape_err!(
                "mask is {}x{}, expected {}x{}",
                mask.height(),
                mask.width(),
                self.input_size.0,
                self.input_size.1
            ));
        }
        let (mut h, mut w) = self.input_size;
        let mut x = Matrix::from_vec(h * w, 1, mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
        let mut cache = MaskEncoderCache { inputs: Vec::new(), pre: Vec::new(), dims: Vec::new() };
        for (stage, &f) in self.stages.iter().zip(&self.factors) {
            let s2d = space_to_depth(&x, h, w, f);
            cache.dims.push((h, w, x.cols()));
            let pre = stage.forward(&s2d);
            let mut act = pre.clone();
            act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
            cache.inputs.push(s2d);
            cache.pre.push(pre);
            h /= f;
            w /= f;
            x = act;
        }
        let out = self.proj.forward(&x);
        cache.inputs.push(x);
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &MaskEncoderCache, d_out: &Matrix, grad: &mut MaskEncoder) {
        let n = self.stages.len();
        let mut d = self.proj.backward(&cache.inputs[n], d_out, &mut grad.proj);
        for i in (0..n).rev() {
            for (g, p) in d.as_mut_slice().iter_mut().zip(cache.pre[i].as_slice()) {
                *g *= gelu_grad(*p);
            }
            if i == 0 {
                self.stages[i].backward_params(&cache.inputs[i], &d, &mut grad.stages[i]);
                break;
            }
            let d_s2d = self.stages[i].backward(&cache.inputs[i], &d, &mut grad.stages[i]);
            let (h, w, c) = cache.dims[i];
            d = depth_to_space(&d_s2d, h, w, self.factors[i], c);
        }
    }
}

impl Parameters for MaskEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &alloc::format!("stages.{i}")), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &alloc::format!("stages.{i}")), f);
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// `S x width` sparse prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEmbeddings {
    pub tokens: Matrix,
}

impl SparseEmbeddings {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// `L x width` dense prompt grid aligned with the patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEmbeddings {
    pub grid: Matrix,
}

#[derive(Debug, Clone)]
pub struct PromptCache {
    token_types: Vec<TokenType>,
    mask: Option<MaskEncoderCache>,
}

/// Sparse and dense prompt encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoder {
    pub codec: FourierPositionCodec,
    /// Learnable rows indexed by [`TokenType`].
    pub type_embed: Matrix,
    pub mask_encoder: MaskEncoder,
}

impl PromptEncoder {
    pub fn new(image_size: usize, patch_size: usize, width: usize, pe_scale: f64, rng: &mut Rng) -> Self {
        Self {
            codec: FourierPositionCodec::new(width, pe_scale, rng),
            type_embed: Matrix::randn(NUM_TOKEN_TYPES, width, 1.0, rng),
            mask_encoder: MaskEncoder::new(image_size, patch_size, width, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            codec: FourierPositionCodec { frequencies: self.codec.frequencies.zeros_like() },
            type_embed: self.type_embed.zeros_like(),
            mask_encoder: self.mask_encoder.zeros_like(),
        }
    }

    pub fn width(&self) -> usize {
        self.type_embed.cols()
    }

    fn token(&self, p: Option<Point>, t: TokenType) -> Vec<f64> {
        let mut v = match p {
            Some(p) => self.codec.encode(p.x, p.y),
            None => vec![0.0; self.width()],
        };
        for (a, b) in v.iter_mut().zip(self.type_embed.row(t as usize)) {
            *a += b;
        }
        v
    }

    fn build(&self, items: &[(Option<Point>, TokenType)]) -> SparseEmbeddings {
        let mut tokens = Matrix::zeros(items.len(), self.width());
        for (i, &(p, t)) in items.iter().enumerate() {
            tokens.row_mut(i).copy_from_slice(&self.token(p, t));
        }
        SparseEmbeddings { tokens }
    }

    /// One `pe(p) + type[POINT]` token per point.
    pub fn encode_points(&self, points: &[Point]) -> Result<SparseEmbeddings> {
        if points.is_empty() {
            return Err(invalid!("no points to encode"));
        }
        points.iter().try_for_each(Point::validate)?;
        let items: Vec<_> = points.iter().map(|&p| (Some(p), TokenType::Point)).collect();
        Ok(self.build(&items))
    }

    /// Corner tokens `pe(tl) + type[TL]`, `pe(br) + type[BR]`.
    pub fn encode_box(&self, b: &BoxPrompt) -> Result<SparseEmbeddings> {
        b.validate()?;
        Ok(self.build(&[(Some(b.top_left()), TokenType::TopLeft), (Some(b.bottom_right()), TokenType::BottomRight)]))
    }

    pub fn null_token(&self) -> SparseEmbeddings {
        self.build(&[(None, TokenType::Null)])
    }

    pub fn encode_mask(&self, mask: &Mask) -> Result<DenseEmbeddings> {
        Ok(DenseEmbeddings { grid: self.mask_encoder.forward(mask)?.0 })
    }

    /// Dispatch a prompt to the sparse/dense encoders.
    pub fn encode(&self, prompt: &SpatialPrompt) -> Result<(SparseEmbeddings, Option<DenseEmbeddings>, PromptCache)> {
        prompt.validate()?;
        let mut items: Vec<(Option<Point>, TokenType)> = Vec::new();
        let mut dense = None;
        let mut mask_cache = None;
        match prompt {
            SpatialPrompt::Points(pts) => items.extend(pts.iter().map(|&p| (Some(p), TokenType::Point))),
            SpatialPrompt::Box(b) => {
                items.push((Some(b.top_left()), TokenType::TopLeft));
                items.push((Some(b.bottom_right()), TokenType::BottomRight));
            }
            SpatialPrompt::PointsAndBox { points, bbox } => {
                items.extend(points.iter().map(|&p| (Some(p), TokenType::Point)));
                items.push((Some(bbox.top_left()), TokenType::TopLeft));
                items.push((Some(bbox.bottom_right()), TokenType::BottomRight));
            }
            SpatialPrompt::Mask(m) => {
                items.push((None, TokenType::Null));
                let (grid, cache) = self.mask_encoder.forward(m)?;
                dense = Some(DenseEmbeddings { grid });
                mask_cache = Some(cache);
            }
            SpatialPrompt::None => items.push((None, TokenType::Null)),
        }
        let sparse = self.build(&items);
        let token_types = items.iter().map(|&(_, t)| t).collect();
        Ok((sparse, dense, PromptCache { token_types, mask: mask_cache }))
    }

    /// Accumulate gradients for the type table and the mask stack. The
    /// Fourier frequencies are frozen and receive nothing.
    pub fn backward(
        &self,
        cache: &PromptCache,
        d_sparse: &Matrix,
        d_dense: Option<&Matrix>,
        grad: &mut PromptEncoder,
    ) {
        for (i, &t) in cache.token_types.iter().enumerate() {
            for (g, d) in grad.type_embed.row_mut(t as usize).iter_mut().zip(d_sparse.row(i)) {
                *g += d;
            }
        }
        if let (Some(mc), Some(dd)) = (&cache.mask, d_dense) {
            self.mask_encoder.backward(mc, dd, &mut grad.mask_encoder);
        }
    }
}

impl Parameters for PromptEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "codec.frequencies"), &self.codec.frequencies);
        f(join(prefix, "type_embed"), &self.type_embed);
        self.mask_encoder.visit(&join(prefix, "mask_encoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "codec.frequencies"), &mut self.codec.frequencies);
        f(join(prefix, "type_embed"), &mut self.type_embed);
        self.mask_encoder.visit_mut(&join(prefix, "mask_encoder"), f);
    }
}
