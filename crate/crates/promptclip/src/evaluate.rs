//! Manifest-level evaluation: zero-shot classification with template
//! ensembles or retrieval over the manifest's own captions.

use std::collections::BTreeSet;
use std::path::Path;

use promptclip_core::eval::{aggregate, classify, eval_prompt, ClassEmbeddings, ClassPromptSet, MetricsReport, Prediction, PromptMode};
use promptclip_core::Model;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{io_at, Error, Result};
use crate::fit::csv_io;

/// What each record is scored against.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalTarget {
    /// Classes with caption templates; the truth is the record category.
    Classes(ClassPromptSet),
    /// Every distinct caption in the manifest; a record is a hit when one
    /// of its own captions ranks first.
    Captions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
}

/// Candidate embeddings in lexicographic name order.
pub fn candidate_embeddings(model: &Model, data: &Dataset, target: &EvalTarget) -> Result<ClassEmbeddings> {
    let modality = data.records.first().map(|r| r.modality.as_str()).unwrap_or("");
    Ok(match target {
        EvalTarget::Classes(set) => ClassEmbeddings::build(set, modality, &mut |t| model.embed_text(t))?,
        EvalTarget::Captions => {
            let names: Vec<String> =
                data.records.iter().flat_map(|r| r.captions.iter().cloned()).collect::<BTreeSet<_>>().into_iter().collect();
            let vectors = names.iter().map(|t| model.embed_text(t)).collect::<Result<_, _>>()?;
            ClassEmbeddings { names, vectors }
        }
    })
}

/// Score every record under the deterministic prompt for `mode`.
pub fn eval_dataset(model: &Model, data: &Dataset, target: &EvalTarget, mode: PromptMode) -> Result<EvalOutput> {
    let classes = candidate_embeddings(model, data, target)?;
    let tokens = data.images.iter().map(|img| model.encode_image(img)).collect::<Result<Vec<_>, _>>()?;
    let mut predictions = Vec::with_capacity(data.len());
    for (i, rec) in data.records.iter().enumerate() {
        let prompt = eval_prompt(mode, &data.masks[i])?;
        let (query, _) = model.embed_region(&tokens[data.image_of[i]], &prompt)?;
        let c = classify(&query, &classes)?;
        let truth = match target {
            EvalTarget::Classes(_) => rec.category.clone(),
            EvalTarget::Captions => {
                let own: BTreeSet<&str> = rec.captions.iter().map(String::as_str).collect();
                c.ranking.iter().map(|&j| &classes.names[j]).find(|n| own.contains(n.as_str())).cloned().unwrap_or_default()
            }
        };
        predictions.push(Prediction {
            record_id: i,
            truth,
            pred: c.label.clone(),
            top5: c.ranking.iter().take(5).map(|&j| classes.names[j].clone()).collect(),
            score: c.scores[c.ranking[0]],
        });
    }
    Ok(EvalOutput { report: aggregate(&predictions)?, predictions })
}

#[derive(Debug, Serialize)]
struct PredictionRow<'a> {
    record_id: usize,
    #[serde(rename = "true")]
    truth: &'a str,
    pred: &'a str,
    top5: String,
    score: f64,
}

/// `record_id,true,pred,top5,score`, with the top-5 labels joined by `|`.
pub fn write_predictions_csv(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    for p in preds {
        let row = PredictionRow { record_id: p.record_id, truth: &p.truth, pred: &p.pred, top5: p.top5.join("|"), score: p.score };
        w.serialize(row).map_err(|e| csv_io(e, path))?;
    }
    w.flush().map_err(io_at(path))
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(e, path))?;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let parse = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 2, msg };
        let row = row.map_err(|e| parse(e.to_string()))?;
        if row.len() != 5 {
            return Err(parse(format!("expected 5 fields, got {}", row.len())));
        }
        out.push(Prediction {
            record_id: row[0].parse().map_err(|e| parse(format!("record_id: {e}")))?,
            truth: row[1].to_string(),
            pred: row[2].to_string(),
            top5: row[3].split('|').filter(|s| !s.is_empty()).map(String::from).collect(),
            score: row[4].parse().map_err(|e| parse(format!("score: {e}")))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    scope: &'a str,
    n: usize,
    top1: f64,
    top5: f64,
    recall: f64,
}

/// Write `report.json` and `report.csv` (one overall row, one per class).
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&json_path, json + "\n").map_err(io_at(&json_path))?;
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_io(e, &csv_path))?;
    let all = ReportRow { scope: "all", n: report.n_samples, top1: report.top1, top5: report.top5, recall: report.recall };
    w.serialize(all).map_err(|e| csv_io(e, &csv_path))?;
    for (name, c) in &report.per_class {
        let n = c.n.max(1) as f64;
        let row = ReportRow {
            scope: name,
            n: c.n,
            top1: c.top1_correct as f64 / n,
            top5: c.top5_correct as f64 / n,
            recall: c.recall,
        };
        w.serialize(row).map_err(|e| csv_io(e, &csv_path))?;
    }
    w.flush().map_err(io_at(&csv_path))
}
