//! HTTP service for interactive generation: a client opens a session,
//! steps through the sequence one token at a time, and may reject the
//! latest token to have it redrawn. Each response carries the newly decoded
//! column band as a base64 PNG.

mod error;
mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use eqar_core::data_io::ModelBundle;
use eqar_core::generator::Variant;
use serde::{Deserialize, Serialize};

pub use error::ApiError;
pub use session::{Session, SessionConfig, SessionStatus, StepResponse};

/// Environment variable holding the bind address.
pub const BIND_ENV: &str = "EQAR_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_sessions: usize,
    /// Sessions untouched for this long are dropped.
    pub idle_ttl: Duration,
    /// Longest sequence served, as a multiple of the training length.
    pub ceiling_factor: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { max_sessions: 64, idle_ttl: Duration::from_secs(30 * 60), ceiling_factor: 16 }
    }
}

struct Slot {
    session: Arc<tokio::sync::Mutex<Session>>,
    last_used: Instant,
}

/// Shared server state: the model is read-only, each session is locked
/// on its own.
pub struct AppState {
    model: Option<Arc<ModelBundle>>,
    sessions: Mutex<HashMap<String, Slot>>,
    cfg: ServiceConfig,
}

impl AppState {
    /// `model = None` serves everything but session creation and stepping,
    /// which answer 503.
    pub fn new(model: Option<ModelBundle>, cfg: ServiceConfig) -> Result<Self, eqar_core::Error> {
        if let Some(m) = &model {
            m.codec.band_width()?;
        }
        Ok(Self { model: model.map(Arc::new), sessions: Mutex::new(HashMap::new()), cfg })
    }

    fn model(&self) -> Result<Arc<ModelBundle>, ApiError> {
        self.model.clone().ok_or_else(|| ApiError::unavailable("no model loaded"))
    }

    fn sessions(&self) -> std::sync::MutexGuard<'_, HashMap<String, Slot>> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Drop idle sessions; returns how many were removed.
    pub fn evict_idle(&self) -> usize {
        let ttl = self.cfg.idle_ttl;
        let mut map = self.sessions();
        let before = map.len();
        map.retain(|_, s| s.last_used.elapsed() < ttl);
        before - map.len()
    }

    /// Handle to a live session, e.g. to inspect it under its lock.
    pub fn session(&self, id: &str) -> Option<Arc<tokio::sync::Mutex<Session>>> {
        self.sessions().get(id).map(|s| s.session.clone())
    }

    pub fn session_count(&self) -> usize {
        self.sessions().len()
    }

    fn touch(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        let ttl = self.cfg.idle_ttl;
        let mut map = self.sessions();
        match map.get_mut(id) {
            Some(slot) if slot.last_used.elapsed() < ttl => {
                slot.last_used = Instant::now();
                Ok(slot.session.clone())
            }
            Some(_) => {
                map.remove(id);
                Err(ApiError::not_found(id))
            }
            None => Err(ApiError::not_found(id)),
        }
    }

    fn max_target_len(&self, model: &ModelBundle) -> usize {
        if model.generator.config().extrapolates() {
            self.cfg.ceiling_factor * model.train_len()
        } else {
            model.train_len()
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub class_id: usize,
    pub target_len: usize,
    pub seed: Option<u64>,
    pub cfg_start: Option<f64>,
    pub cfg_end: Option<f64>,
    pub n_steps: Option<usize>,
    pub temperature: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Created {
    pub session_id: String,
    pub config: SessionConfig,
    pub image_h: usize,
    pub band_width: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelInfo {
    pub variant: Variant,
    pub train_len: usize,
    pub max_target_len: usize,
    pub n_classes: usize,
    pub image_h: usize,
    pub band_width: usize,
    pub extrapolates: bool,
    pub defaults: SessionDefaults,
}

#[derive(Clone, Debug, Serialize)]
pub struct SessionDefaults {
    pub cfg_start: f64,
    pub cfg_end: f64,
    pub n_steps: usize,
    pub temperature: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub config: SessionConfig,
    pub accepted: usize,
    pub status: SessionStatus,
}

/// Seeds stay below 2⁵³ so JavaScript clients can echo them exactly.
fn draw_seed() -> u64 {
    rand::random::<u64>() >> 11
}

async fn create(State(app): State<Arc<AppState>>, body: Result<Json<CreateSession>, JsonRejection>) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let model = app.model()?;
    let n_classes = model.generator.config().n_classes;
    if req.class_id >= n_classes {
        return Err(ApiError::bad_request(format!("class_id {} outside [0, {n_classes})", req.class_id)));
    }
    let max_len = app.max_target_len(&model);
    if req.target_len == 0 || req.target_len > max_len {
        return Err(ApiError::bad_request(format!("target_len must be in [1, {max_len}]")));
    }
    let d = &model.config.sampler;
    let config = SessionConfig {
        class_id: req.class_id,
        target_len: req.target_len,
        seed: req.seed.unwrap_or_else(draw_seed),
        cfg_start: req.cfg_start.unwrap_or(d.cfg_start),
        cfg_end: req.cfg_end.unwrap_or(d.cfg_end),
        n_steps: req.n_steps.unwrap_or(d.n_steps),
        temperature: req.temperature.unwrap_or(d.temperature),
    };
    if config.n_steps > 10_000 {
        return Err(ApiError::bad_request("n_steps above 10000"));
    }
    let id = format!("{:032x}", rand::random::<u128>());
    let session = Session::new(id.clone(), &model, config.clone())?;
    app.evict_idle();
    {
        let mut map = app.sessions();
        if map.len() >= app.cfg.max_sessions {
            return Err(ApiError::unavailable(format!("session limit of {} reached", app.cfg.max_sessions)));
        }
        map.insert(id.clone(), Slot { session: Arc::new(tokio::sync::Mutex::new(session)), last_used: Instant::now() });
    }
    let (image_h, _) = model.codec.image_hw();
    let band_width = model.codec.band_width()?;
    Ok((StatusCode::CREATED, Json(Created { session_id: id, config, image_h, band_width })))
}

/// Run `op` on the session under its lock on a blocking thread; a second
/// request while one is running gets 423.
async fn with_session<R: Send + 'static>(
    app: &AppState,
    id: &str,
    op: impl FnOnce(&mut Session, &ModelBundle) -> Result<R, ApiError> + Send + 'static,
) -> Result<R, ApiError> {
    let model = app.model()?;
    let slot = app.touch(id)?;
    let mut guard = slot.try_lock_owned().map_err(|_| ApiError::locked())?;
    tokio::task::spawn_blocking(move || op(&mut guard, &model))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn step(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<StepResponse>, ApiError> {
    with_session(&app, &id, |s, m| s.step(m)).await.map(Json)
}

async fn reject(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<StepResponse>, ApiError> {
    with_session(&app, &id, |s, m| s.reject(m)).await.map(Json)
}

async fn image(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let png = with_session(&app, &id, |s, m| s.image_png(m)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

async fn info(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionInfo>, ApiError> {
    let info = with_session(&app, &id, |s, _| {
        Ok(SessionInfo { session_id: s.id.clone(), config: s.config.clone(), accepted: s.accepted(), status: s.status() })
    })
    .await?;
    Ok(Json(info))
}

async fn delete(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> StatusCode {
    app.sessions().remove(&id);
    StatusCode::NO_CONTENT
}

async fn classes(State(app): State<Arc<AppState>>) -> Result<Json<Vec<ClassInfo>>, ApiError> {
    let model = app.model()?;
    Ok(Json(model.class_names().into_iter().enumerate().map(|(id, name)| ClassInfo { id, name }).collect()))
}

async fn model_info(State(app): State<Arc<AppState>>) -> Result<Json<ModelInfo>, ApiError> {
    let model = app.model()?;
    let g = model.generator.config();
    let d = &model.config.sampler;
    Ok(Json(ModelInfo {
        variant: g.variant,
        train_len: model.train_len(),
        max_target_len: app.max_target_len(&model),
        n_classes: g.n_classes,
        image_h: model.codec.image_hw().0,
        band_width: model.codec.band_width()?,
        extrapolates: g.extrapolates(),
        defaults: SessionDefaults { cfg_start: d.cfg_start, cfg_end: d.cfg_end, n_steps: d.n_steps, temperature: d.temperature },
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/classes", get(classes))
        .route("/v1/model", get(model_info))
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(info).delete(delete))
        .route("/v1/sessions/{id}/step", post(step))
        .route("/v1/sessions/{id}/reject", post(reject))
        .route("/v1/sessions/{id}/image", get(image))
        .with_state(state)
}

/// Bind address from [`BIND_ENV`], or [`DEFAULT_BIND`].
pub fn bind_addr_from_env() -> Result<SocketAddr, std::net::AddrParseError> {
    std::env::var(BIND_ENV).unwrap_or_else(|_| DEFAULT_BIND.to_string()).parse()
}

/// Serve until the process is stopped, sweeping idle sessions once a minute.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = sweeper.evict_idle();
            if n > 0 {
                log::info!("evicted {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(state)).await
}
