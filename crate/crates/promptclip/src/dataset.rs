//! A manifest loaded into memory at the model's input resolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use promptclip_core::datagen::RegionRecord;
use promptclip_core::encoders::ImageSample;
use promptclip_core::mask::Mask;
use promptclip_core::Model;

use crate::error::{Error, Result};
use crate::imageio::{load_png, to_model_input};
use crate::manifest::read_manifest;

/// Records with their decoded images and masks. Images shared by several
/// records are decoded once.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<RegionRecord>,
    /// Normalized model-size images, one per distinct image path.
    pub images: Vec<ImageSample>,
    /// Index into `images` for each record.
    pub image_of: Vec<usize>,
    /// Masks resized to the model input size.
    pub masks: Vec<Mask>,
}

/// Resolve a manifest image reference against the manifest directory.
pub fn resolve_image(manifest: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

impl Dataset {
    pub fn load(manifest: &Path, image_size: usize) -> Result<Self> {
        let records = read_manifest(manifest)?;
        Self::from_records(records, image_size, |image| to_model_input(&load_png(&resolve_image(manifest, image))?, image_size))
    }

    pub fn from_records(
        records: Vec<RegionRecord>,
        image_size: usize,
        mut load: impl FnMut(&str) -> Result<ImageSample>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(promptclip_core::Error::InvalidInput("manifest has no records".into()).into());
        }
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut images = Vec::new();
        let mut image_of = Vec::with_capacity(records.len());
        let mut masks = Vec::with_capacity(records.len());
        for r in &records {
            let i = match index.get(&r.image) {
                Some(&i) => i,
                None => {
                    images.push(load(&r.image)?);
                    index.insert(r.image.clone(), images.len() - 1);
                    images.len() - 1
                }
            };
            image_of.push(i);
            let m = r.mask()?;
            let m = if m.height() == image_size && m.width() == image_size { m } else { m.resize_nearest(image_size, image_size) };
            if m.is_empty() {
                return Err(Error::Config(format!("mask of a {} record vanishes at {image_size} pixels", r.category)));
            }
            masks.push(m);
        }
        Ok(Self { records, images, image_of, masks })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, record: usize) -> &ImageSample {
        &self.images[self.image_of[record]]
    }

    /// The records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let mut images = Vec::new();
        let mut image_of = Vec::new();
        for &i in indices {
            let src = self.image_of[i];
            let dst = *remap.entry(src).or_insert_with(|| {
                images.push(self.images[src].clone());
                images.len() - 1
            });
            image_of.push(dst);
        }
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            images,
            image_of,
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
        }
    }

    /// Distinct caption texts in first-seen order, and for each record the
    /// indices of its captions.
    pub fn caption_index(&self) -> (Vec<String>, Vec<Vec<usize>>) {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        let mut texts = Vec::new();
        let per_record = self
            .records
            .iter()
            .map(|r| {
                r.captions
                    .iter()
                    .map(|c| {
                        *seen.entry(c.as_str()).or_insert_with(|| {
                            texts.push(c.clone());
                            texts.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();
        (texts, per_record)
    }
}

/// Frozen-encoder caption embeddings for a dataset.
#[derive(Debug, Clone)]
pub struct CaptionBank {
    pub texts: Vec<String>,
    /// Raw embeddings aligned with `texts`.
    pub vectors: Vec<Vec<f64>>,
    pub per_record: Vec<Vec<usize>>,
}

impl CaptionBank {
    pub fn build(data: &Dataset, model: &Model) -> Result<Self> {
        let (texts, per_record) = data.caption_index();
        let vectors = texts.iter().map(|t| model.embed_text_raw(t)).collect::<Result<_, _>>()?;
        Ok(Self { texts, vectors, per_record })
    }
}
