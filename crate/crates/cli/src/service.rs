//! JSON-over-HTTP front end for inversion, editing and mixing.
//!
//! Images travel as base64-encoded PNG. An inversion is cached under a
//! session id so later edits reuse its pyramid; the cache evicts the least
//! recently used session once full.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use lru::LruCache;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use styleprompter::checkpoint::load_models;
use styleprompter::image_io::{decode_png, encode_png, png_dimensions};
use styleprompter::latent_spaces::{DirectionCatalog, LatentCode};
use styleprompter::models::Models;
use styleprompter::pipeline::{self, InversionResult, MixMode};
use styleprompter::smart::BetaWeights;
use styleprompter::{Error, Tensor};

pub const ENV_BIND: &str = "STYLEPROMPTER_BIND";
pub const ENV_CHECKPOINT: &str = "STYLEPROMPTER_CHECKPOINT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub checkpoint: PathBuf,
    /// JSON direction catalog; none serves an empty catalog.
    pub directions: Option<PathBuf>,
    /// Largest accepted image side in pixels.
    pub max_image_size: u32,
    pub request_timeout_secs: u64,
    pub session_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            checkpoint: PathBuf::new(),
            directions: None,
            max_image_size: 256,
            request_timeout_secs: 60,
            session_capacity: 32,
        }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> styleprompter::Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Overrides the bind address and checkpoint from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(b) = lookup(ENV_BIND) {
            self.bind = b;
        }
        if let Some(c) = lookup(ENV_CHECKPOINT) {
            self.checkpoint = c.into();
        }
    }

    pub fn validate(&self) -> styleprompter::Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_image_size == 0 || self.request_timeout_secs == 0 || self.session_capacity == 0
        {
            return bad("limits must be positive".into());
        }
        if !self.checkpoint.is_file() {
            return bad(format!(
                "checkpoint {} does not exist",
                self.checkpoint.display()
            ));
        }
        if let Some(d) = &self.directions {
            if !d.is_file() {
                return bad(format!("direction catalog {} does not exist", d.display()));
            }
        }
        Ok(())
    }
}

pub struct AppState {
    models: Models,
    catalog: DirectionCatalog,
    checkpoint: String,
    sessions: Mutex<LruCache<String, Arc<InversionResult>>>,
    max_image_size: u32,
    timeout: Duration,
}

impl AppState {
    pub fn new(models: Models, catalog: DirectionCatalog, cfg: &ServiceConfig) -> Self {
        let cap = NonZeroUsize::new(cfg.session_capacity).unwrap_or(NonZeroUsize::MIN);
        Self {
            models,
            catalog,
            checkpoint: cfg.checkpoint.display().to_string(),
            sessions: Mutex::new(LruCache::new(cap)),
            max_image_size: cfg.max_image_size,
            timeout: Duration::from_secs(cfg.request_timeout_secs),
        }
    }

    pub fn load(cfg: &ServiceConfig) -> styleprompter::Result<Self> {
        cfg.validate()?;
        let models = load_models(&cfg.checkpoint)?;
        let catalog = match &cfg.directions {
            Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
            None => DirectionCatalog::default(),
        };
        Ok(Self::new(models, catalog, cfg))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }

    fn session(&self, id: &str) -> Result<Arc<InversionResult>, ApiError> {
        self.sessions
            .lock()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session"))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/directions", get(directions))
        .route("/api/invert", post(invert))
        .route("/api/edit", post(edit))
        .route("/api/mix", post(mix))
        .with_state(state)
}

pub async fn serve(cfg: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::load(&cfg).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str) -> Self {
        Self {
            status,
            code,
            detail: None,
        }
    }

    fn with(status: StatusCode, code: &'static str, detail: impl ToString) -> Self {
        Self {
            status,
            code,
            detail: Some(detail.to_string()),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        if e.is_usage() || matches!(e, Error::Image(_)) {
            Self::with(StatusCode::BAD_REQUEST, "invalid_request", e)
        } else {
            Self::with(StatusCode::INTERNAL_SERVER_ERROR, "internal", e)
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match self.detail {
            Some(d) => json!({ "error": self.code, "detail": d }),
            None => json!({ "error": self.code }),
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<serde_json::Value>, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::with(StatusCode::BAD_REQUEST, "malformed_request", e))
}

fn beta(beta1: Option<f64>, beta2: Option<f64>) -> Result<BetaWeights, ApiError> {
    Ok(BetaWeights::new(
        beta1.unwrap_or(1.0),
        beta2.unwrap_or(1.0),
    )?)
}

fn png_b64(t: &Tensor) -> Result<String, ApiError> {
    Ok(B64.encode(encode_png(t)?))
}

/// Runs model work off the async threads, bounded by the request timeout.
async fn blocking<T, F>(state: &Arc<AppState>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    let st = Arc::clone(state);
    let task = tokio::task::spawn_blocking(move || f(&st));
    match tokio::time::timeout(state.timeout, task).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => Err(ApiError::with(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            e,
        )),
        Err(_) => Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "timeout")),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint": state.checkpoint }))
}

async fn directions(State(state): State<Arc<AppState>>) -> Json<DirectionCatalog> {
    Json(state.catalog.clone())
}

#[derive(Deserialize)]
struct InvertRequest {
    image: String,
    beta1: Option<f64>,
    beta2: Option<f64>,
}

#[derive(Serialize)]
struct InvertResponse {
    latents: LatentCode,
    image_baseline: String,
    image_refined: String,
    session_id: String,
}

async fn invert(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: InvertRequest = parse(&body)?;
    let beta = beta(req.beta1, req.beta2)?;
    let png = B64
        .decode(req.image.trim())
        .map_err(|e| ApiError::with(StatusCode::BAD_REQUEST, "malformed_request", e))?;
    let (w, h) = png_dimensions(&png)?;
    if w > state.max_image_size || h > state.max_image_size {
        return Err(ApiError::with(
            StatusCode::PAYLOAD_TOO_LARGE,
            "image_too_large",
            format!("{w}x{h} exceeds {0}x{0}", state.max_image_size),
        ));
    }
    let image = decode_png(&png)?;
    let (result, resp) = blocking(&state, move |st| {
        let r = pipeline::invert(&st.models, &image, beta)?;
        let resp = InvertResponse {
            latents: r.w_inv.clone(),
            image_baseline: png_b64(&r.image_baseline.tensor)?,
            image_refined: png_b64(&r.image_refined.tensor)?,
            session_id: uuid::Uuid::new_v4().simple().to_string(),
        };
        Ok((r, resp))
    })
    .await?;
    state
        .sessions
        .lock()
        .expect("session lock")
        .put(resp.session_id.clone(), Arc::new(result));
    Ok(Json(serde_json::to_value(resp).map_err(Error::from)?))
}

#[derive(Deserialize)]
struct EditRequest {
    session_id: String,
    direction: String,
    alpha: f64,
    beta1: Option<f64>,
    beta2: Option<f64>,
}

async fn edit(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: EditRequest = parse(&body)?;
    let beta = beta(req.beta1, req.beta2)?;
    let inv = state.session(&req.session_id)?;
    let dir = state
        .catalog
        .get(&req.direction)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_direction"))?;
    let image = blocking(&state, move |st| {
        let out = pipeline::edit(&st.models, &inv, &dir, req.alpha, beta)?;
        png_b64(&out.tensor)
    })
    .await?;
    Ok(Json(json!({ "image": image })))
}

#[derive(Deserialize)]
struct MixRequest {
    session_a: String,
    session_b: String,
    mode: MixMode,
    param: f64,
    #[serde(default = "yes")]
    smart: bool,
}

fn yes() -> bool {
    true
}

async fn mix(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: MixRequest = parse(&body)?;
    let a = state.session(&req.session_a)?;
    let b = state.session(&req.session_b)?;
    let image = blocking(&state, move |st| {
        let out = pipeline::mix(&st.models, &a, &b, req.mode, req.param, req.smart)?;
        png_b64(&out.tensor)
    })
    .await?;
    Ok(Json(json!({ "image": image })))
}
