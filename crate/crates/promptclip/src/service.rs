//! HTTP inference service: image registration and prompted region queries.
//!
//! The model snapshot is immutable once loaded and shared by all requests.
//! Registered images keep their encoded patch tokens in a bounded LRU
//! cache; entries never change after insertion.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use indexmap::IndexMap;
use promptclip_core::encoders::PatchTokens;
use promptclip_core::eval::{region_retrieval, ClassEmbeddings};
use promptclip_core::fusion::attention_map;
use promptclip_core::prompt::{PromptJson, SpatialPrompt};
use promptclip_core::{Model, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::load_checkpoint;
use crate::datagen::read_class_sets;
use crate::error::Result;
use crate::export::Heatmap;
use crate::imageio::{decode_png, to_model_input};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 4 * 1024 * 1024;
pub const DEFAULT_CACHE_CAPACITY: usize = 256;
const DEFAULT_K: usize = 5;

/// Loaded model and precomputed class-set embeddings.
#[derive(Debug)]
pub struct Snapshot {
    pub model: Model,
    pub checkpoint_id: String,
    pub class_sets: IndexMap<String, ClassEmbeddings>,
}

impl Snapshot {
    pub fn new(model: Model, checkpoint_id: String, class_sets: Option<&Path>) -> Result<Self> {
        let mut sets = IndexMap::new();
        if let Some(path) = class_sets {
            for (name, set) in read_class_sets(path)? {
                let emb = ClassEmbeddings::build(&set.classes, &set.modality, &mut |t| model.embed_text(t))?;
                sets.insert(name, emb);
            }
        }
        Ok(Self { model, checkpoint_id, class_sets: sets })
    }

    pub fn load(checkpoint: &Path, class_sets: Option<&Path>) -> Result<Self> {
        let ckpt = load_checkpoint(checkpoint)?;
        Self::new(ckpt.model, ckpt.id, class_sets)
    }
}

#[derive(Debug)]
pub struct SessionImage {
    pub tokens: PatchTokens,
    pub height: usize,
    pub width: usize,
}

/// Least-recently-used map of registered images.
#[derive(Debug)]
struct ImageCache {
    entries: IndexMap<String, Arc<SessionImage>>,
    capacity: usize,
}

impl ImageCache {
    fn get(&mut self, id: &str) -> Option<Arc<SessionImage>> {
        let (k, v) = self.entries.shift_remove_entry(id)?;
        self.entries.insert(k, v.clone());
        Some(v)
    }

    fn insert(&mut self, id: String, img: Arc<SessionImage>) {
        while self.entries.len() >= self.capacity.max(1) {
            self.entries.shift_remove_index(0);
        }
        self.entries.insert(id, img);
    }
}

/// Shared state behind the router.
#[derive(Debug)]
pub struct AppState {
    snapshot: OnceLock<Arc<Snapshot>>,
    cache: Mutex<ImageCache>,
    next_id: AtomicU64,
    max_image_bytes: usize,
}

impl AppState {
    pub fn new(max_image_bytes: usize, cache_capacity: usize) -> Self {
        Self {
            snapshot: OnceLock::new(),
            cache: Mutex::new(ImageCache { entries: IndexMap::new(), capacity: cache_capacity }),
            next_id: AtomicU64::new(1),
            max_image_bytes,
        }
    }

    /// Install the model. Later calls are ignored.
    pub fn set_snapshot(&self, snapshot: Snapshot) {
        let _ = self.snapshot.set(Arc::new(snapshot));
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.get().cloned()
    }

    pub fn cached_images(&self) -> usize {
        self.cache.lock().unwrap().entries.len()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    // Base64 bodies are a third larger than the image they carry.
    let limit = state.max_image_bytes / 3 * 4 + 64 * 1024;
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/images", post(register_image))
        .route("/v1/query", post(query))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: Option<String>,
    pub model_config: Option<ModelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registered {
    pub image_id: String,
    pub h: usize,
    pub w: usize,
    pub patch_grid: PatchGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub rank: usize,
    pub index: usize,
    pub text: String,
    pub confidence: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub image_id: String,
    pub prompt: PromptJson,
    pub matches: Vec<Match>,
    /// Softmax confidence of every candidate, in candidate order.
    pub confidences: Vec<f64>,
    pub heatmap: Heatmap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn fail(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    match state.snapshot() {
        Some(s) => {
            let body = Health {
                status: "ok".into(),
                checkpoint_id: Some(s.checkpoint_id.clone()),
                model_config: Some(s.model.config.clone()),
            };
            (StatusCode::OK, Json(body)).into_response()
        }
        None => {
            let body = Health { status: "loading".into(), checkpoint_id: None, model_config: None };
            (StatusCode::SERVICE_UNAVAILABLE, Json(body)).into_response()
        }
    }
}

#[derive(Deserialize)]
struct Base64Image {
    png_base64: String,
}

fn is_json(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"))
}

async fn register_image(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(snap) = state.snapshot() else {
        return fail(StatusCode::SERVICE_UNAVAILABLE, "model is still loading");
    };
    let png: Vec<u8> = if is_json(&headers) {
        let req: Base64Image = match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return fail(StatusCode::BAD_REQUEST, format!("expected {{\"png_base64\": ...}}: {e}")),
        };
        match base64::engine::general_purpose::STANDARD.decode(req.png_base64.trim()) {
            Ok(b) => b,
            Err(e) => return fail(StatusCode::BAD_REQUEST, format!("invalid base64: {e}")),
        }
    } else {
        body.to_vec()
    };
    if png.len() > state.max_image_bytes {
        return fail(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image is {} bytes, limit is {}", png.len(), state.max_image_bytes),
        );
    }
    let encoded = tokio::task::spawn_blocking(move || -> Result<SessionImage> {
        let rgb = decode_png(&png)?;
        let size = snap.model.config.encoder.image_size;
        let tokens = snap.model.encode_image(&to_model_input(&rgb, size)?)?;
        Ok(SessionImage { tokens, height: rgb.height() as usize, width: rgb.width() as usize })
    })
    .await;
    let img = match encoded {
        Ok(Ok(img)) => img,
        Ok(Err(e)) => return fail(StatusCode::BAD_REQUEST, format!("cannot decode image: {e}")),
        Err(e) => return fail(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let image_id = format!("img-{:08}", state.next_id.fetch_add(1, Ordering::Relaxed));
    let body = Registered {
        image_id: image_id.clone(),
        h: img.height,
        w: img.width,
        patch_grid: PatchGrid { h: img.tokens.grid.0, w: img.tokens.grid.1 },
    };
    state.cache.lock().unwrap().insert(image_id, Arc::new(img));
    (StatusCode::CREATED, Json(body)).into_response()
}

/// Parse and validate a prompt; masks are resized to the model input.
fn parse_prompt(v: &Value, size: usize) -> Result<(PromptJson, SpatialPrompt), String> {
    let json: PromptJson = serde_json::from_value(v.clone()).map_err(|e| format!("invalid prompt: {e}"))?;
    let mut adjusted = json.clone();
    if let Some(rle) = &json.mask_rle {
        let mask = promptclip_core::mask::Mask::from_rle(rle).map_err(|e| format!("invalid mask: {e}"))?;
        if mask.height() != size || mask.width() != size {
            adjusted.mask_rle = Some(mask.resize_nearest(size, size).to_rle());
        }
    }
    let prompt = SpatialPrompt::try_from(&adjusted).map_err(|e| format!("invalid prompt: {e}"))?;
    Ok((json, prompt))
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let Some(snap) = state.snapshot() else {
        return fail(StatusCode::SERVICE_UNAVAILABLE, "model is still loading");
    };
    let req: Value = match serde_json::from_slice(&body) {
        Ok(Value::Object(m)) => Value::Object(m),
        Ok(_) => return fail(StatusCode::BAD_REQUEST, "request body must be a JSON object"),
        Err(e) => return fail(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}")),
    };
    let Some(image_id) = req.get("image_id").and_then(Value::as_str).map(str::to_string) else {
        return fail(StatusCode::BAD_REQUEST, "image_id must be a string");
    };
    let Some(image) = state.cache.lock().unwrap().get(&image_id) else {
        return fail(StatusCode::NOT_FOUND, format!("unknown image_id {image_id}"));
    };
    let Some(prompt_value) = req.get("prompt") else {
        return fail(StatusCode::UNPROCESSABLE_ENTITY, "missing prompt");
    };
    let size = snap.model.config.encoder.image_size;
    let (echo, prompt) = match parse_prompt(prompt_value, size) {
        Ok(p) => p,
        Err(e) => return fail(StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    let mut texts: Vec<String> = Vec::new();
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    match req.get("candidates") {
        Some(Value::String(name)) => match snap.class_sets.get(name) {
            Some(set) => {
                texts = set.names.clone();
                vectors = set.vectors.clone();
            }
            None => return fail(StatusCode::BAD_REQUEST, format!("unknown class set {name}")),
        },
        Some(Value::Array(items)) => {
            for item in items {
                let Some(t) = item.as_str() else {
                    return fail(StatusCode::BAD_REQUEST, "candidates must be strings");
                };
                match snap.model.embed_text(t) {
                    Ok(v) => vectors.push(v),
                    Err(e) => return fail(StatusCode::BAD_REQUEST, format!("candidate {t:?}: {e}")),
                }
                texts.push(t.to_string());
            }
        }
        _ => return fail(StatusCode::BAD_REQUEST, "candidates must be a list of captions or a class set name"),
    }
    if texts.is_empty() {
        return fail(StatusCode::BAD_REQUEST, "candidate list is empty");
    }
    let k = match req.get("k") {
        None | Some(Value::Null) => DEFAULT_K.min(texts.len()),
        Some(v) => match v.as_u64() {
            Some(k) if k >= 1 && k as usize <= texts.len() => k as usize,
            _ => return fail(StatusCode::BAD_REQUEST, format!("k must be an integer in 1..={}", texts.len())),
        },
    };
    let model = &snap.model;
    let (query, trace) = match model.embed_region(&image.tokens, &prompt) {
        Ok(r) => r,
        Err(e) => return fail(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    };
    let retrieval = match region_retrieval(&query, &vectors, k, model.logit_scale().scale()) {
        Ok(r) => r,
        Err(e) => return fail(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let heatmap = match attention_map(&trace, image.tokens.grid) {
        Ok(m) => Heatmap::from(&m),
        Err(e) => return fail(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    let matches = retrieval
        .top
        .iter()
        .enumerate()
        .map(|(rank, m)| Match {
            rank: rank + 1,
            index: m.index,
            text: texts[m.index].clone(),
            confidence: m.confidence,
            cosine: m.cosine,
        })
        .collect();
    let body = QueryResult { image_id, prompt: echo, matches, confidences: retrieval.confidences, heatmap };
    (StatusCode::OK, Json(body)).into_response()
}

/// Runtime settings, normally from flags or the environment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub checkpoint: PathBuf,
    pub class_sets: Option<PathBuf>,
    pub max_image_bytes: usize,
    pub cache_capacity: usize,
}

/// Bind, start answering (503 until the checkpoint is loaded), load the
/// snapshot in the background and serve until interrupted.
pub async fn serve(cfg: ServeConfig) -> Result<()> {
    let state = Arc::new(AppState::new(cfg.max_image_bytes, cfg.cache_capacity));
    let addr = format!("{}:{}", cfg.host, cfg.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| crate::Error::Io { path: PathBuf::from(&addr), source })?;
    log::info!("listening on http://{addr}");
    let loader = state.clone();
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<crate::Error>();
    tokio::task::spawn_blocking(move || match Snapshot::load(&cfg.checkpoint, cfg.class_sets.as_deref()) {
        Ok(snap) => {
            log::info!("loaded checkpoint {} ({} class sets)", snap.checkpoint_id, snap.class_sets.len());
            loader.set_snapshot(snap);
        }
        Err(e) => {
            let _ = fail_tx.send(e);
        }
    });
    let failure = Arc::new(Mutex::new(None));
    let failed = failure.clone();
    let shutdown = async move {
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            Ok(e) = fail_rx => *failed.lock().unwrap() = Some(e),
        }
    };
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|source| crate::Error::Io { path: PathBuf::from(addr), source })?;
    let failed = failure.lock().unwrap().take();
    failed.map_or(Ok(()), Err)
}
