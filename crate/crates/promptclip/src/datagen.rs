//! Manifest generation from the synthetic benchmark or from an annotation
//! archive index.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use promptclip_core::datagen::synthetic::{synthetic_benchmark, SyntheticImage, CATEGORIES};
use promptclip_core::datagen::{explode_image, CaptionPolicy, ExplodeOptions, RegionRecord, CLASS_TEMPLATE, TEMPLATES};
use promptclip_core::encoders::ImageSample;
use promptclip_core::eval::ClassPromptSet;
use promptclip_core::mask::Mask;
use serde::{Deserialize, Serialize};

use crate::dataset::{resolve_image, Dataset};
use crate::error::{io_at, Error, Result};
use crate::imageio::{load_png, save_gray_png};
use crate::manifest::write_manifest;

/// Caption style for generated records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionStyle {
    /// One category-only caption per region.
    Class,
    /// Several template captions with size, shape and location.
    Rich,
}

impl CaptionStyle {
    pub fn policy(self) -> CaptionPolicy {
        match self {
            CaptionStyle::Class => CaptionPolicy::class_only(),
            CaptionStyle::Rich => CaptionPolicy::default(),
        }
    }
}

impl std::str::FromStr for CaptionStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "class" => Ok(Self::Class),
            "rich" => Ok(Self::Rich),
            other => Err(format!("unknown caption style {other:?} (expected class or rich)")),
        }
    }
}

/// A named class set with the modality its templates are rendered for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedClassSet {
    pub modality: String,
    pub classes: ClassPromptSet,
}

pub type ClassSets = BTreeMap<String, NamedClassSet>;

pub fn read_class_sets(path: &Path) -> Result<ClassSets> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    let sets: ClassSets = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })?;
    for (name, s) in &sets {
        s.classes.validate().map_err(|e| Error::Config(format!("class set {name}: {e}")))?;
    }
    Ok(sets)
}

/// Class sets for the synthetic categories: `benchmark` uses the class-only
/// caption template, `ensemble` adds two paraphrases.
pub fn benchmark_class_sets(modality: &str) -> ClassSets {
    let names: Vec<&str> = CATEGORIES.iter().map(|c| c.0).collect();
    let class_only = TEMPLATES[CLASS_TEMPLATE].replace("{category}", "{class}");
    let single = ClassPromptSet::uniform(&names, &[&class_only]);
    let ensemble = ClassPromptSet::uniform(
        &names,
        &[&class_only, "a {modality} scan showing the {class}", "the {class} in a {modality} image"],
    );
    [("benchmark", single), ("ensemble", ensemble)]
        .into_iter()
        .map(|(n, classes)| (n.to_string(), NamedClassSet { modality: modality.into(), classes }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticOptions {
    pub images: usize,
    pub size: usize,
    pub seed: u64,
    pub modality: String,
    pub captions: CaptionStyle,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self { images: 200, size: 64, seed: 7, modality: "CT".into(), captions: CaptionStyle::Class }
    }
}

/// Benchmark images and their records. Image references are
/// `images/img_NNNNN.png`.
pub fn synthetic_records(
    opts: &SyntheticOptions,
    embed: &mut dyn FnMut(&str) -> promptclip_core::Result<Vec<f64>>,
) -> Result<(Vec<SyntheticImage>, Vec<RegionRecord>, Vec<String>)> {
    let images = synthetic_benchmark(opts.images, opts.size, opts.seed);
    let explode = ExplodeOptions { modality: opts.modality.clone(), policy: opts.captions.policy(), seed: opts.seed };
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let out = explode_image(&synthetic_ref(i), img.size, img.size, &img.masks, &img.labels, &explode, embed)?;
        records.extend(out.records);
        warnings.extend(out.warnings);
    }
    Ok((images, records, warnings))
}

pub fn synthetic_ref(i: usize) -> String {
    format!("images/img_{i:05}.png")
}

/// In-memory dataset for the benchmark, without touching the filesystem.
pub fn synthetic_dataset(
    opts: &SyntheticOptions,
    image_size: usize,
    embed: &mut dyn FnMut(&str) -> promptclip_core::Result<Vec<f64>>,
) -> Result<Dataset> {
    let (images, records, _) = synthetic_records(opts, embed)?;
    let by_ref: BTreeMap<String, &SyntheticImage> = images.iter().enumerate().map(|(i, im)| (synthetic_ref(i), im)).collect();
    Dataset::from_records(records, image_size, |r| {
        let img = by_ref[r];
        let gray: Vec<f64> = img.gray.iter().map(|&g| g as f64).collect();
        let sample = ImageSample::from_gray(img.size, img.size, &gray)?;
        if img.size != image_size {
            return Err(Error::Config(format!("synthetic size {} differs from model input {image_size}", img.size)));
        }
        Ok(sample.into_normalized()?)
    })
}

/// Files written by a generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub manifests: Vec<PathBuf>,
    pub records: usize,
    pub warnings: Vec<String>,
}

/// Write benchmark PNGs, `manifest.jsonl` and `class_sets.json` into `out`.
/// With `test_images > 0` the last images go to `test.jsonl` instead.
pub fn write_synthetic(
    out: &Path,
    opts: &SyntheticOptions,
    test_images: usize,
    embed: &mut dyn FnMut(&str) -> promptclip_core::Result<Vec<f64>>,
) -> Result<Generated> {
    if test_images >= opts.images {
        return Err(Error::Config(format!("test_images {test_images} leaves no training images of {}", opts.images)));
    }
    let (images, records, warnings) = synthetic_records(opts, embed)?;
    let dir = out.join("images");
    std::fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    for (i, img) in images.iter().enumerate() {
        save_gray_png(&out.join(synthetic_ref(i)), img.size, img.size, &img.gray)?;
    }
    let split = opts.images - test_images;
    let is_train = |r: &RegionRecord| r.image < synthetic_ref(split);
    let (train, test): (Vec<RegionRecord>, Vec<RegionRecord>) = records.into_iter().partition(is_train);
    let mut manifests = vec![out.join("manifest.jsonl")];
    write_manifest(&train, &manifests[0])?;
    if !test.is_empty() {
        manifests.push(out.join("test.jsonl"));
        write_manifest(&test, &manifests[1])?;
    }
    write_class_sets(&benchmark_class_sets(&opts.modality), &out.join("class_sets.json"))?;
    Ok(Generated { manifests, records: train.len() + test.len(), warnings })
}

pub fn write_class_sets(sets: &ClassSets, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(sets).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, body + "\n").map_err(io_at(path))
}

/// One archive image with its labelled structure masks (PNG, non-zero is
/// foreground). Paths are relative to the index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub image: String,
    #[serde(default = "default_modality")]
    pub modality: String,
    pub masks: Vec<ArchiveMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMask {
    pub label: String,
    pub path: String,
}

fn default_modality() -> String {
    "CT".into()
}

/// Explode every archive entry into records and write `manifest.jsonl`.
/// Image references in the manifest are absolute paths.
pub fn write_archive(
    index: &Path,
    out: &Path,
    style: CaptionStyle,
    seed: u64,
    embed: &mut dyn FnMut(&str) -> promptclip_core::Result<Vec<f64>>,
) -> Result<Generated> {
    let text = std::fs::read_to_string(index).map_err(io_at(index))?;
    let entries: Vec<ArchiveEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: index.to_path_buf(), line: e.line(), msg: e.to_string() })?;
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for e in &entries {
        let image_path = resolve_image(index, &e.image);
        let image_path = std::fs::canonicalize(&image_path).map_err(io_at(&image_path))?;
        let img = load_png(&image_path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut masks = Vec::new();
        for m in &e.masks {
            let p = resolve_image(index, &m.path);
            let gray = image::DynamicImage::ImageRgb8(load_png(&p)?).to_luma8();
            masks.push(Mask::from_fn(gray.height() as usize, gray.width() as usize, |x, y| gray.get_pixel(x as u32, y as u32).0[0] > 0));
        }
        let labels: Vec<String> = e.masks.iter().map(|m| m.label.clone()).collect();
        let opts = ExplodeOptions { modality: e.modality.clone(), policy: style.policy(), seed };
        let reference = image_path.to_string_lossy().into_owned();
        let exploded = explode_image(&reference, h, w, &masks, &labels, &opts, embed)?;
        records.extend(exploded.records);
        warnings.extend(exploded.warnings);
    }
    let manifest = out.join("manifest.jsonl");
    write_manifest(&records, &manifest)?;
    Ok(Generated { manifests: vec![manifest], records: records.len(), warnings })
}
