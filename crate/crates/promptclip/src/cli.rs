//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use promptclip_core::eval::PromptMode;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::{resolve, ResolvedConfig};
use crate::datagen::{read_class_sets, write_archive, write_synthetic, CaptionStyle, SyntheticOptions};
use crate::dataset::Dataset;
use crate::error::{io_at, Error, Result};
use crate::evaluate::{eval_dataset, write_predictions_csv, write_report, EvalTarget};
use crate::export::{export_attention, export_embeddings};
use crate::fit::{fit, write_loss_csv};
use crate::service::{self, ServeConfig};
use crate::studies::{scaling_study, unfreeze_study, write_rows};

#[derive(Debug, Parser)]
#[command(name = "promptclip", version, about = "Region-promptable contrastive vision-language model")]
pub struct Cli {
    /// Emit line-delimited JSON logs.
    #[arg(long, global = true)]
    pub json_logs: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a region-record manifest.
    Datagen(DatagenArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Train and evaluate on nested fractions of a manifest.
    ScalingStudy(ScalingArgs),
    /// Train and evaluate with different numbers of trainable encoder blocks.
    UnfreezeStudy(UnfreezeArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
    /// Export attention heatmaps for manifest records.
    ExportAttn(ExportAttnArgs),
    /// Export unit-norm caption embeddings as CSV.
    ExportEmbeddings(ExportEmbeddingsArgs),
}

/// Model shape flags; each overrides the key of the same name.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct ModelFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trainable_blocks: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion_mlp_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_key_pe: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pe_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_seed: Option<u64>,
}

/// Training flags; each overrides the key of the same name.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[arg(long, value_delimiter = ',', num_args = 2)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub milestones: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aug_prob: Option<f64>,
    #[arg(long, value_delimiter = ',', num_args = 2, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aug_scale: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 2, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aug_shift: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_jitter: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub none_prob: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DatagenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for images, captions and per-record seeds.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of synthetic images.
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    /// Synthetic image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value = "CT")]
    pub modality: String,
    /// Caption style: class or rich.
    #[arg(long, default_value = "class")]
    pub captions: CaptionStyle,
    /// Trailing synthetic images written to test.jsonl instead.
    #[arg(long, default_value_t = 0)]
    pub test_images: usize,
    /// Annotation archive index (JSON) to explode instead of synthesizing.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints, loss history and resolved config.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

/// Candidate source shared by evaluation commands.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TargetArgs {
    /// Class-set file; without it records are scored against the
    /// manifest's own captions.
    #[arg(long)]
    pub class_sets: Option<PathBuf>,
    /// Name of the class set to use.
    #[arg(long, default_value = "benchmark")]
    pub class_set: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// none, point, box, both or mask.
    #[arg(long, default_value = "box")]
    pub prompt_mode: PromptMode,
    #[command(flatten)]
    pub target: TargetArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScalingArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Held-out manifest to evaluate on (defaults to the training manifest).
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1.0")]
    pub fractions: Vec<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub target: TargetArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct UnfreezeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,2,4")]
    pub ks: Vec<usize>,
    #[arg(long, default_value = "box")]
    pub prompt_mode: PromptMode,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub target: TargetArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, env = "CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "CLASS_SETS")]
    pub class_sets: Option<PathBuf>,
    #[arg(long, env = "PORT", default_value_t = service::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "MAX_IMAGE_BYTES", default_value_t = service::DEFAULT_MAX_IMAGE_BYTES)]
    pub max_image_bytes: usize,
    #[arg(long, env = "CACHE_CAPACITY", default_value_t = service::DEFAULT_CACHE_CAPACITY)]
    pub cache_capacity: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportAttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Record indices (defaults to every record).
    #[arg(long, value_delimiter = ',')]
    pub records: Vec<usize>,
    #[arg(long, default_value = "box")]
    pub prompt_mode: PromptMode,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportEmbeddingsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; embeddings go to embeddings.csv.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `argv`, run the command and return the process exit code:
/// 0 on success, 1 on a domain error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(cli.json_logs, cli.quiet);
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

fn init_logging(json: bool, quiet: bool) {
    let level = if quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let mut b = env_logger::Builder::new();
    b.filter_level(level).parse_env("RUST_LOG").target(env_logger::Target::Stdout);
    if json {
        b.format(|buf, rec| {
            let line = json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": rec.level().as_str(),
                "target": rec.target(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    let _ = b.try_init();
}

/// Flag values that were actually given, keyed by config name.
fn overrides(model: &ModelFlags, train: Option<&TrainFlags>) -> Map<String, Value> {
    let mut out = Map::new();
    for v in [serde_json::to_value(model).ok(), train.and_then(|t| serde_json::to_value(t).ok())].into_iter().flatten() {
        if let Value::Object(m) = v {
            out.extend(m);
        }
    }
    out
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))
}

/// Write `resolved-config.json` so the run can be replayed from `dir`.
fn write_resolved(dir: &Path, command: &str, args: &impl Serialize, config: Option<&ResolvedConfig>) -> Result<()> {
    let body = json!({
        "command": command,
        "args": args,
        "config": config.map(|c| Value::Object(c.flat.clone())),
    });
    let path = dir.join("resolved-config.json");
    let text = serde_json::to_string_pretty(&body).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(io_at(&path))
}

fn eval_target(t: &TargetArgs) -> Result<EvalTarget> {
    match &t.class_sets {
        None => Ok(EvalTarget::Captions),
        Some(path) => {
            let mut sets = read_class_sets(path)?;
            let set = sets
                .remove(&t.class_set)
                .ok_or_else(|| Error::Usage(format!("class set {:?} not found in {}", t.class_set, path.display())))?;
            Ok(EvalTarget::Classes(set.classes))
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ScalingStudy(a) => scaling(a),
        Command::UnfreezeStudy(a) => unfreeze(a),
        Command::Serve(a) => serve(a),
        Command::ExportAttn(a) => export_attn(a),
        Command::ExportEmbeddings(a) => export_emb(a),
    }
}

fn datagen(a: DatagenArgs) -> Result<()> {
    let cfg = resolve(a.config.as_deref(), overrides(&a.model, None))?;
    let model = promptclip_core::Model::new(cfg.model.clone())?;
    create_dir(&a.out)?;
    let mut embed = |t: &str| model.embed_text_raw(t);
    let generated = match &a.archive {
        Some(index) => write_archive(index, &a.out, a.captions, a.seed, &mut embed)?,
        None => {
            let opts = SyntheticOptions {
                images: a.images,
                size: a.size,
                seed: a.seed,
                modality: a.modality.clone(),
                captions: a.captions,
            };
            write_synthetic(&a.out, &opts, a.test_images, &mut embed)?
        }
    };
    for w in &generated.warnings {
        log::warn!("{w}");
    }
    log::info!("wrote {} records to {}", generated.records, a.out.display());
    write_resolved(&a.out, "datagen", &a, Some(&cfg))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve(a.config.as_deref(), overrides(&a.model, Some(&a.train)))?;
    let data = Dataset::load(&a.manifest, cfg.model.encoder.image_size)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, "train", &a, Some(&cfg))?;
    let mut model = promptclip_core::Model::new(cfg.model.clone())?;
    log::info!("training on {} records for {} epochs", data.len(), cfg.train.epochs);
    let every = cfg.train.checkpoint_every;
    let out = a.out.clone();
    let report = fit(&mut model, &data, &cfg.train, &mut |e| {
        if every > 0 && (e.epoch + 1) % every == 0 {
            let meta = meta_of(e.history, e.epoch);
            let path = out.join(format!("checkpoint-epoch{}.bin", e.epoch + 1));
            save_checkpoint(e.model, &meta, &path)?;
        }
        Ok(())
    })?;
    write_loss_csv(&report.history, &a.out.join("loss.csv"))?;
    let meta = meta_of(&report.history, cfg.train.epochs.saturating_sub(1));
    let id = save_checkpoint(&model, &meta, &a.out.join("checkpoint.bin"))?;
    log::info!("saved checkpoint {id}");
    Ok(())
}

fn meta_of(history: &[crate::fit::LossRow], epoch: usize) -> CheckpointMeta {
    CheckpointMeta {
        step: history.len() as u64,
        epoch,
        loss_history: history.iter().map(|r| r.loss).collect(),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = a.manifest.as_deref().ok_or_else(|| Error::Usage("eval needs --manifest".into()))?;
    let out = a.out.as_deref().ok_or_else(|| Error::Usage("eval needs --out".into()))?;
    let target = eval_target(&a.target)?;
    let data = Dataset::load(manifest, ckpt.model.config.encoder.image_size)?;
    create_dir(out)?;
    write_resolved(out, "eval", &a, None)?;
    let result = eval_dataset(&ckpt.model, &data, &target, a.prompt_mode)?;
    write_predictions_csv(&result.predictions, &out.join("predictions.csv"))?;
    write_report(&result.report, out)?;
    log::info!(
        "{} records, top1 {:.4} top5 {:.4} recall {:.4}",
        result.report.n_samples,
        result.report.top1,
        result.report.top5,
        result.report.recall
    );
    Ok(())
}

fn load_pair(manifest: &Path, eval: Option<&Path>, size: usize) -> Result<(Dataset, Dataset)> {
    let train = Dataset::load(manifest, size)?;
    let eval = match eval {
        Some(p) => Dataset::load(p, size)?,
        None => train.clone(),
    };
    Ok((train, eval))
}

fn scaling(a: ScalingArgs) -> Result<()> {
    let cfg = resolve(a.config.as_deref(), overrides(&a.model, Some(&a.train)))?;
    let target = eval_target(&a.target)?;
    let (train, eval) = load_pair(&a.manifest, a.eval_manifest.as_deref(), cfg.model.encoder.image_size)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, "scaling-study", &a, Some(&cfg))?;
    let rows = scaling_study(&train, &eval, &a.fractions, &cfg.model, &cfg.train, &target)?;
    write_rows(&rows, &a.out.join("scaling.csv"))
}

fn unfreeze(a: UnfreezeArgs) -> Result<()> {
    let cfg = resolve(a.config.as_deref(), overrides(&a.model, Some(&a.train)))?;
    let target = eval_target(&a.target)?;
    let (train, eval) = load_pair(&a.manifest, a.eval_manifest.as_deref(), cfg.model.encoder.image_size)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, "unfreeze-study", &a, Some(&cfg))?;
    let rows = unfreeze_study(&train, &eval, &a.ks, &cfg.model, &cfg.train, &target, a.prompt_mode)?;
    write_rows(&rows, &a.out.join("unfreeze.csv"))
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = ServeConfig {
        host: a.host,
        port: a.port,
        checkpoint: a.checkpoint,
        class_sets: a.class_sets,
        max_image_bytes: a.max_image_bytes,
        cache_capacity: a.cache_capacity,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|source| Error::Io { path: PathBuf::from("tokio runtime"), source })?;
    rt.block_on(service::serve(cfg))
}

fn export_attn(a: ExportAttnArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.manifest, ckpt.model.config.encoder.image_size)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, "export-attn", &a, None)?;
    let records: Vec<usize> = if a.records.is_empty() { (0..data.len()).collect() } else { a.records.clone() };
    export_attention(&ckpt.model, &data, &records, a.prompt_mode, &a.out)?;
    log::info!("wrote {} heatmaps to {}", records.len(), a.out.display());
    Ok(())
}

fn export_emb(a: ExportEmbeddingsArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.manifest, ckpt.model.config.encoder.image_size)?;
    create_dir(&a.out)?;
    write_resolved(&a.out, "export-embeddings", &a, None)?;
    let rows = export_embeddings(&data, &ckpt.model, &a.out.join("embeddings.csv"))?;
    log::info!("wrote {rows} caption embeddings");
    Ok(())
}
