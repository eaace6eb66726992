//! HTTP API around the counting pipeline.
//!
//! Routes:
//! - `POST /api/images`: multipart upload (PNG or JPEG, at most 20 MB)
//! - `POST /api/count`: count with 1 to 3 exemplar boxes, optionally adapting
//! - `GET /api/health`: model status and configuration fingerprint
//! - `/ui/`: static files from the configured directory

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use famcount::adapt::{adapt_stack_cancellable, AdaptationTrace};
use famcount::annotation::{AnnotatedImage, BBox};
use famcount::checkpoint::{Checkpoint, ModelFingerprint};
use famcount::heatmap::heatmap_png;
use famcount::head::DensityHeadParams;
use famcount::losses::AdaptationConfig;
use famcount::pipeline::CountingPipeline;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub const MAX_UPLOAD_BYTES: usize = 20 * 1024 * 1024;
pub const MAX_STEPS: usize = 1000;
pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub port: u16,
    pub checkpoint: Option<PathBuf>,
    pub max_concurrency: usize,
    pub ui_dir: Option<PathBuf>,
    pub request_timeout: Duration,
    /// Adaptation settings other than the step count.
    pub adaptation: AdaptationConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            port: DEFAULT_PORT,
            checkpoint: None,
            max_concurrency: 1,
            ui_dir: None,
            request_timeout: Duration::from_secs(120),
            adaptation: AdaptationConfig::default(),
        }
    }
}

/// A loaded checkpoint with the pipeline it was trained for.
pub struct Model {
    pub pipeline: CountingPipeline,
    pub params: DensityHeadParams,
    pub fingerprint: ModelFingerprint,
    pub source: String,
}

impl Model {
    pub fn load(path: &std::path::Path) -> famcount::Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, path.display().to_string())
    }

    pub fn from_checkpoint(ckpt: Checkpoint, source: String) -> famcount::Result<Self> {
        let pipeline = CountingPipeline::for_checkpoint(&ckpt)?;
        Ok(Self {
            pipeline,
            params: ckpt.params,
            fingerprint: ckpt.fingerprint,
            source,
        })
    }
}

pub struct AppState {
    model: Option<Arc<Model>>,
    images: RwLock<HashMap<String, Arc<RgbImage>>>,
    permits: Semaphore,
    timeout: Duration,
    adaptation: AdaptationConfig,
}

impl AppState {
    pub fn new(model: Option<Model>, cfg: &ServerConfig) -> Self {
        Self {
            model: model.map(Arc::new),
            images: RwLock::new(HashMap::new()),
            permits: Semaphore::new(cfg.max_concurrency.max(1)),
            timeout: cfg.request_timeout,
            adaptation: cfg.adaptation,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("upload exceeds {} bytes", MAX_UPLOAD_BYTES)]
    TooLarge,
    #[error("{0}")]
    Unsupported(String),
    #[error("{0}")]
    Invalid(String),
    #[error("no model loaded")]
    NoModel,
    #[error("request timed out")]
    Timeout,
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::UnknownImage(_) => StatusCode::NOT_FOUND,
            ApiError::TooLarge => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::Unsupported(_) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::NoModel => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Timeout => StatusCode::GATEWAY_TIMEOUT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadResponse {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountRequest {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    #[serde(default)]
    pub adapt: bool,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub return_heatmap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub diverged: bool,
}

impl From<&AdaptationTrace> for TraceSummary {
    fn from(t: &AdaptationTrace) -> Self {
        Self {
            initial_loss: t.initial_loss(),
            final_loss: t.final_loss(),
            steps: t.steps_taken(),
            diverged: t.diverged,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountResponse {
    pub count: f64,
    pub density_sum: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<String>,
    pub trace: TraceSummary,
    pub timing_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    #[serde(default)]
    pub model_checkpoint: Option<String>,
    #[serde(default)]
    pub fingerprint: Option<ModelFingerprint>,
    #[serde(default)]
    pub fingerprint_digest: Option<String>,
}

fn content_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Decodes a PNG or JPEG upload.
pub fn decode_upload(bytes: &[u8]) -> Result<RgbImage, ApiError> {
    if bytes.len() > MAX_UPLOAD_BYTES {
        return Err(ApiError::TooLarge);
    }
    let format = image::guess_format(bytes).map_err(|_| ApiError::Unsupported("not a PNG or JPEG image".into()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(ApiError::Unsupported(format!("{format:?} images are not accepted")));
    }
    image::load_from_memory_with_format(bytes, format)
        .map(|img| img.to_rgb8())
        .map_err(|e| ApiError::Unsupported(format!("cannot decode image: {e}")))
}

async fn upload(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> Result<Json<UploadResponse>, ApiError> {
    let too_large = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::TooLarge
        } else {
            ApiError::BadRequest(e.body_text())
        }
    };
    let field = multipart
        .next_field()
        .await
        .map_err(too_large)?
        .ok_or_else(|| ApiError::BadRequest("multipart body has no file field".into()))?;
    let bytes = field.bytes().await.map_err(too_large)?;
    let pixels = decode_upload(&bytes)?;
    let id = content_id(&bytes);
    let (width, height) = pixels.dimensions();
    state
        .images
        .write()
        .expect("image store lock")
        .insert(id.clone(), Arc::new(pixels));
    Ok(Json(UploadResponse {
        image_id: id,
        width,
        height,
    }))
}

fn validate_request(req: &CountRequest, width: u32, height: u32) -> Result<(), ApiError> {
    if req.boxes.is_empty() || req.boxes.len() > 3 {
        return Err(ApiError::Invalid(format!("expected 1 to 3 boxes, got {}", req.boxes.len())));
    }
    for (i, b) in req.boxes.iter().enumerate() {
        if !b.is_ordered() {
            return Err(ApiError::Invalid(format!("box {i} {b}: corners must satisfy x1 < x2 and y1 < y2")));
        }
        if !b.within(width as f64, height as f64) {
            return Err(ApiError::Invalid(format!("box {i} {b}: outside the {width}x{height} image")));
        }
    }
    if let Some(s) = req.steps.filter(|s| *s > MAX_STEPS) {
        return Err(ApiError::Invalid(format!("steps {s} exceeds the limit of {MAX_STEPS}")));
    }
    Ok(())
}

fn run_count(
    model: &Model,
    pixels: &RgbImage,
    req: &CountRequest,
    base: AdaptationConfig,
    cancel: &AtomicBool,
) -> Result<CountResponse, ApiError> {
    let start = Instant::now();
    let image = AnnotatedImage {
        id: req.image_id.clone(),
        pixels: pixels.clone(),
        dots: Vec::new(),
        exemplars: req.boxes.clone(),
        category: String::new(),
    };
    let steps = if req.adapt { req.steps.unwrap_or(DEFAULT_STEPS) } else { 0 };
    let prepared = model.pipeline.prepare(&image).map_err(|e| match e {
        famcount::Error::Argument(_) | famcount::Error::OutOfBounds(_) | famcount::Error::DegenerateExemplar { .. } | famcount::Error::ImageTooSmall { .. } | famcount::Error::KernelTooLarge { .. } => {
            ApiError::Invalid(e.to_string())
        }
        other => ApiError::Internal(other.to_string()),
    })?;
    let pred = adapt_stack_cancellable(&prepared.stack, &prepared.boxes, &model.params, &base.with_steps(steps), cancel)
        .map_err(|e| match e {
            famcount::Error::Cancelled => ApiError::Timeout,
            other => ApiError::Internal(other.to_string()),
        })?;
    let heatmap = if req.return_heatmap {
        let png = heatmap_png(&pred.density, pixels.width(), pixels.height()).map_err(|e| ApiError::Internal(e.to_string()))?;
        Some(base64::engine::general_purpose::STANDARD.encode(png))
    } else {
        None
    };
    Ok(CountResponse {
        count: pred.count,
        density_sum: pred.density.count(),
        heatmap,
        trace: TraceSummary::from(&pred.trace),
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

async fn count(State(state): State<Arc<AppState>>, Json(req): Json<CountRequest>) -> Result<Json<CountResponse>, ApiError> {
    let model = state.model.clone().ok_or(ApiError::NoModel)?;
    let pixels = state
        .images
        .read()
        .expect("image store lock")
        .get(&req.image_id)
        .cloned()
        .ok_or_else(|| ApiError::UnknownImage(req.image_id.clone()))?;
    validate_request(&req, pixels.width(), pixels.height())?;
    // Set on timeout so an abandoned adaptation stops at its next step.
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    let work = async {
        let _permit = state.permits.acquire().await.map_err(|e| ApiError::Internal(e.to_string()))?;
        let base = state.adaptation;
        tokio::task::spawn_blocking(move || run_count(&model, &pixels, &req, base, &flag))
            .await
            .map_err(|e| ApiError::Internal(e.to_string()))?
    };
    match tokio::time::timeout(state.timeout, work).await {
        Ok(result) => result.map(Json),
        Err(_) => {
            cancel.store(true, Ordering::Relaxed);
            Err(ApiError::Timeout)
        }
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match &state.model {
        Some(m) => Json(HealthResponse {
            status: "ok".into(),
            model_checkpoint: Some(m.source.clone()),
            fingerprint_digest: Some(m.fingerprint.digest()),
            fingerprint: Some(m.fingerprint.clone()),
        })
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(HealthResponse {
                status: "no model loaded".into(),
                model_checkpoint: None,
                fingerprint: None,
                fingerprint_digest: None,
            }),
        )
            .into_response(),
    }
}

pub fn router(state: Arc<AppState>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/images", post(upload))
        // Leave room for multipart framing around a maximal file.
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES + 64 * 1024))
        .route("/api/count", post(count))
        .route("/api/health", get(health))
        .with_state(state);
    let app = match ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

/// Startup failures: a bad checkpoint or a socket error.
#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Model(#[from] famcount::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loads the checkpoint (if any) and serves until Ctrl-C.
pub async fn serve(cfg: ServerConfig) -> Result<(), ServeError> {
    let model = match &cfg.checkpoint {
        Some(path) => Some(Model::load(path)?),
        None => {
            log::warn!("no checkpoint configured, /api/count will answer 503");
            None
        }
    };
    let state = Arc::new(AppState::new(model, &cfg));
    let app = router(state, cfg.ui_dir.clone());
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
