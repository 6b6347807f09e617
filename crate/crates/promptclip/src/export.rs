//! Caption-embedding and attention-map export.

use std::path::Path;

use promptclip_core::eval::{eval_prompt, PromptMode};
use promptclip_core::fusion::attention_map;
use promptclip_core::{Matrix, Model};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{io_at, Error, Result};
use crate::fit::csv_io;
use crate::imageio::heatmap_image;

/// Row-major grid of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl From<&Matrix> for Heatmap {
    fn from(m: &Matrix) -> Self {
        Self { h: m.rows(), w: m.cols(), values: m.as_slice().to_vec() }
    }
}

/// One CSV row per caption: `record_id,category,e0,...` with unit-norm
/// frozen-encoder embeddings. Returns the number of rows.
pub fn export_embeddings(data: &Dataset, model: &Model, path: &Path) -> Result<usize> {
    let dim = model.config.encoder.embed_dim;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    let mut header = vec!["record_id".to_string(), "category".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(|e| csv_io(e, path))?;
    let mut rows = 0;
    for (i, rec) in data.records.iter().enumerate() {
        for caption in &rec.captions {
            let v = model.embed_text(caption)?;
            let mut row = vec![i.to_string(), rec.category.clone()];
            row.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&row).map_err(|e| csv_io(e, path))?;
            rows += 1;
        }
    }
    w.flush().map_err(io_at(path))?;
    Ok(rows)
}

/// Step-2 attention heatmap for one record under the deterministic prompt.
pub fn record_heatmap(model: &Model, data: &Dataset, record: usize, mode: PromptMode) -> Result<Matrix> {
    let tokens = model.encode_image(data.image(record))?;
    let prompt = eval_prompt(mode, &data.masks[record])?;
    let (_, trace) = model.embed_region(&tokens, &prompt)?;
    Ok(attention_map(&trace, tokens.grid)?)
}

/// Write `attn_<id>.png` (upsampled to the image size) and
/// `attn_<id>.json` for each requested record.
pub fn export_attention(model: &Model, data: &Dataset, records: &[usize], mode: PromptMode, dir: &Path) -> Result<()> {
    let size = model.config.encoder.image_size;
    for &r in records {
        if r >= data.len() {
            return Err(promptclip_core::Error::InvalidInput(format!("record {r} out of range (have {})", data.len())).into());
        }
        let map = record_heatmap(model, data, r, mode)?;
        let png = dir.join(format!("attn_{r}.png"));
        heatmap_image(&map, size).save(&png).map_err(|e| Error::Image(format!("{}: {e}", png.display())))?;
        let json = dir.join(format!("attn_{r}.json"));
        let body = serde_json::to_string(&Heatmap::from(&map)).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&json, body).map_err(io_at(&json))?;
    }
    Ok(())
}
