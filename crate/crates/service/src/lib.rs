//! HTTP service around a loaded surrogate: checkpoint registry, per-session
//! patch selection, and a streamed drag run.
//!
//! Frames of a run are delivered as server-sent events: one `frame` event per
//! trajectory record (step 0 included) followed by a single `end` event. The
//! same events can be replayed through `GET /sessions/{id}/events` or read
//! incrementally through the poll endpoint.

pub mod config;
pub mod error;
pub mod session;

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use surrogate_core::drag::{DragConfig, DragSession, DragStatus, TrajectoryRecord};
use surrogate_core::image::RenderedImage;
use surrogate_core::model::{Checkpoint, GeneratorConfig, Model, TrainingMetadata};
use surrogate_core::patch::{select_patch, PatchOptions, PatchSelection, Pixel};
use surrogate_core::synthdata::{ParameterSpec, ParameterVector};

pub use config::ServiceConfig;
pub use error::ApiError;
pub use session::{png_base64, EndEvent, FrameEvent, ServiceStatus, Session};

type ApiResult<T> = Result<T, ApiError>;

pub struct CheckpointEntry {
    pub id: String,
    pub path: PathBuf,
    pub model: Arc<Model>,
    pub metadata: TrainingMetadata,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub path: PathBuf,
    pub spec: ParameterSpec,
    pub generator: GeneratorConfig,
    pub resolution: usize,
    pub metadata: TrainingMetadata,
}

impl CheckpointEntry {
    fn info(&self) -> CheckpointInfo {
        CheckpointInfo {
            id: self.id.clone(),
            path: self.path.clone(),
            spec: self.model.spec.clone(),
            generator: self.model.config().clone(),
            resolution: self.model.resolution(),
            metadata: self.metadata.clone(),
        }
    }
}

struct Inner {
    config: ServiceConfig,
    checkpoints: RwLock<BTreeMap<String, Arc<CheckpointEntry>>>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    counter: AtomicU64,
    started: Instant,
}

/// Shared state behind the router. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                checkpoints: RwLock::default(),
                sessions: RwLock::default(),
                counter: AtomicU64::new(0),
                started: Instant::now(),
            }),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    /// Loads a checkpoint file; registering the same contents twice returns
    /// the existing entry.
    pub fn register_checkpoint(&self, path: &Path) -> ApiResult<CheckpointInfo> {
        let ckpt = Checkpoint::load(path)?;
        let id = ckpt.digest_hex()?[..16].to_string();
        if let Ok(e) = self.checkpoint(&id) {
            return Ok(e.info());
        }
        let entry = Arc::new(CheckpointEntry {
            id: id.clone(),
            path: path.to_path_buf(),
            model: Arc::new(ckpt.model),
            metadata: ckpt.metadata,
        });
        let info = entry.info();
        self.inner.checkpoints.write().unwrap().insert(id, entry);
        Ok(info)
    }

    /// Registers every `*.ckpt` file in `dir`, sorted by name.
    pub fn register_dir(&self, dir: &Path) -> ApiResult<Vec<CheckpointInfo>> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| ApiError::BadRequest(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        paths.sort();
        paths.iter().map(|p| self.register_checkpoint(p)).collect()
    }

    pub fn checkpoints(&self) -> Vec<CheckpointInfo> {
        self.inner.checkpoints.read().unwrap().values().map(|e| e.info()).collect()
    }

    fn checkpoint(&self, id: &str) -> ApiResult<Arc<CheckpointEntry>> {
        self.inner
            .checkpoints
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no checkpoint {id}")))
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.inner
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session {id}")))
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.read().unwrap().len()
    }

    fn next_id(&self) -> String {
        let n = self.inner.counter.fetch_add(1, Ordering::Relaxed);
        let t = self.inner.started.elapsed().as_nanos() as u64;
        format!("s{n:04}-{:08x}", (t ^ (n.wrapping_mul(0x9e37_79b9_7f4a_7c15))) as u32)
    }

    /// Drops sessions idle for longer than `timeout`, except running ones.
    /// Returns the number removed.
    pub fn evict_idle(&self, timeout: Duration) -> usize {
        let mut sessions = self.inner.sessions.write().unwrap();
        let before = sessions.len();
        sessions.retain(|_, s| {
            let st = s.state.lock().unwrap_or_else(|e| e.into_inner());
            st.status == ServiceStatus::Running || st.last_access.elapsed() <= timeout
        });
        let removed = before - sessions.len();
        if removed > 0 {
            tracing::info!(removed, "evicted idle sessions");
        }
        removed
    }
}

#[derive(Deserialize)]
struct RegisterRequest {
    path: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub checkpoint: String,
    /// Physical values, simulation parameters first.
    pub theta: Vec<f64>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct SessionView {
    pub id: String,
    pub created_at: u64,
    pub checkpoint: String,
    pub status: ServiceStatus,
    pub theta: Vec<f64>,
    pub selections: Vec<PatchSelection>,
    pub steps: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct CreatedSession {
    #[serde(flatten)]
    pub session: SessionView,
    pub width: usize,
    pub height: usize,
    /// Base64 PNG of the generated image at `theta`.
    pub frame: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRequest {
    pub point: Pixel,
    pub target: Pixel,
    pub threshold: Option<f64>,
    pub radius: Option<f64>,
    pub max_extent: Option<f64>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct SelectionResponse {
    pub index: usize,
    pub selection: PatchSelection,
    /// Base64 PNG, white on the patch pixels.
    pub mask: String,
}

#[derive(Deserialize)]
struct PollQuery {
    #[serde(default)]
    since: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct PollResponse {
    pub status: ServiceStatus,
    /// Index to pass as `since` on the next poll.
    pub next: usize,
    pub frames: Vec<FrameEvent>,
    pub end: Option<EndEvent>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct TrajectoryResponse {
    pub status: ServiceStatus,
    pub records: Vec<TrajectoryRecord>,
}

fn view(s: &Session) -> SessionView {
    let st = s.state();
    SessionView {
        id: s.id.clone(),
        created_at: s.created_at,
        checkpoint: s.checkpoint.id.clone(),
        status: st.status,
        theta: st.trajectory.last().map_or_else(|| s.theta.values().collect(), |r| r.theta.clone()),
        selections: st.selections.clone(),
        steps: st.trajectory.last().map_or(0, |r| r.step),
    }
}

fn theta_from(spec: &ParameterSpec, values: &[f64]) -> ApiResult<ParameterVector> {
    let want = spec.sim_dim() + spec.vis_dim();
    if values.len() != want {
        return Err(ApiError::Validation {
            message: format!("theta has {} values, expected {want}", values.len()),
            parameters: spec.all().map(|d| d.name.clone()).collect(),
        });
    }
    let theta = ParameterVector::new(values[..spec.sim_dim()].to_vec(), values[spec.sim_dim()..].to_vec());
    let bad = spec.violations(&theta);
    if !bad.is_empty() {
        return Err(ApiError::Validation { message: format!("outside the training range: {}", bad.join(", ")), parameters: bad });
    }
    Ok(theta)
}

fn blocking_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::Internal(format!("worker failed: {e}"))
}

async fn register(State(app): State<AppState>, Json(req): Json<RegisterRequest>) -> ApiResult<(StatusCode, Json<CheckpointInfo>)> {
    let info = tokio::task::spawn_blocking(move || app.register_checkpoint(&req.path)).await.map_err(blocking_error)??;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn list_checkpoints(State(app): State<AppState>) -> Json<Vec<CheckpointInfo>> {
    Json(app.checkpoints())
}

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateSessionRequest>) -> ApiResult<(StatusCode, Json<CreatedSession>)> {
    let ckpt = app.checkpoint(&req.checkpoint)?;
    let theta = theta_from(&ckpt.model.spec, &req.theta)?;
    let (model, t) = (ckpt.model.clone(), theta.clone());
    let image = tokio::task::spawn_blocking(move || model.generate(&t)).await.map_err(blocking_error)??;
    let frame = png_base64(&image)?;
    let (width, height) = (image.width, image.height);
    let session = Arc::new(Session::new(app.next_id(), ckpt, theta, image));
    app.inner.sessions.write().unwrap().insert(session.id.clone(), session.clone());
    tracing::info!(id = %session.id, "session created");
    Ok((StatusCode::CREATED, Json(CreatedSession { session: view(&session), width, height, frame })))
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let s = app.session(&id)?;
    Ok(Json(view(&s)))
}

async fn delete_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    let s = app
        .inner
        .sessions
        .write()
        .unwrap()
        .remove(&id)
        .ok_or_else(|| ApiError::NotFound(format!("no session {id}")))?;
    s.cancel.store(true, Ordering::SeqCst);
    Ok(StatusCode::NO_CONTENT)
}

fn mask_image(sel: &PatchSelection, width: usize, height: usize) -> RenderedImage {
    let mut img = RenderedImage::filled(width, height, [0.0; 3]);
    for p in &sel.pixels {
        img.set_pixel(p[0] as usize, p[1] as usize, [1.0; 3]);
    }
    img
}

async fn add_selection(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SelectionRequest>,
) -> ApiResult<(StatusCode, Json<SelectionResponse>)> {
    let s = app.session(&id)?;
    let defaults = PatchOptions::default();
    let opts = PatchOptions {
        threshold: req.threshold.unwrap_or(defaults.threshold),
        radius: req.radius.unwrap_or(defaults.radius),
        max_extent: req.max_extent.or(defaults.max_extent),
    };
    let (w, h) = (s.image.width as i64, s.image.height as i64);
    if req.target[0] < 0 || req.target[1] < 0 || req.target[0] >= w || req.target[1] >= h {
        return Err(ApiError::BadRequest(format!("target {:?} outside the {w}×{h} image", req.target)));
    }
    let sel = select_patch(&s.image, req.point, &opts)?.with_target(req.target);
    if sel.pixels.is_empty() {
        return Err(ApiError::EmptyPatch(format!("no pixels selected at {:?}", req.point)));
    }
    let mut st = s.state();
    if st.status != ServiceStatus::Configured {
        return Err(ApiError::Conflict(format!("session is {:?}; selections are fixed", st.status)));
    }
    st.selections.push(sel.clone());
    let index = st.selections.len() - 1;
    drop(st);
    let mask = png_base64(&mask_image(&sel, s.image.width, s.image.height))?;
    Ok((StatusCode::CREATED, Json(SelectionResponse { index, selection: sel, mask })))
}

/// Serialized `frame` event for a record.
fn frame_json(record: &TrajectoryRecord, image: &RenderedImage) -> String {
    match FrameEvent::new(record, image) {
        Ok(ev) => serde_json::to_string(&ev).expect("frame event serializes"),
        Err(e) => {
            tracing::error!("frame encoding failed: {e}");
            serde_json::to_string(&FrameEvent { record: record.clone(), frame: String::new() }).expect("frame event serializes")
        }
    }
}

fn run_worker(session: Arc<Session>, mut drag: DragSession) {
    let first = drag.trajectory()[0].clone();
    session.push_frame(frame_json(&first, &drag.frames()[0]));
    session.state().trajectory.push(first);
    let result = drag.run(Some(&session.cancel), |rec, img| {
        session.push_frame(frame_json(rec, img));
        session.state().trajectory.push(rec.clone());
    });
    let cancelled = session.cancel.load(Ordering::SeqCst) && drag.status() == DragStatus::Aborted;
    let status = if cancelled { ServiceStatus::Cancelled } else { ServiceStatus::from(drag.status()) };
    {
        let mut st = session.state();
        st.status = status;
        st.selections = drag.selections().to_vec();
        // abort() relabels the last record
        if let (Some(last), Some(rec)) = (st.trajectory.last_mut(), drag.trajectory().last()) {
            *last = rec.clone();
        }
    }
    let end = EndEvent { status, steps: drag.step_count(), error: result.err().map(|e| e.to_string()) };
    tracing::info!(id = %session.id, ?status, steps = end.steps, "drag finished");
    session.finish(&end);
}

/// Starts the drag worker. Fails without side effects if the session is not
/// in the configured state or the configuration is rejected.
async fn start_drag(app: &AppState, id: &str, config: DragConfig) -> ApiResult<Arc<Session>> {
    let s = app.session(id)?;
    let selections = {
        let mut st = s.state();
        if st.status != ServiceStatus::Configured {
            return Err(ApiError::Conflict(format!("session is {:?}", st.status)));
        }
        if st.selections.is_empty() {
            return Err(ApiError::BadRequest("add at least one selection before dragging".into()));
        }
        st.status = ServiceStatus::Running;
        st.selections.clone()
    };
    let (model, theta) = (s.checkpoint.model.clone(), s.theta.clone());
    let created = tokio::task::spawn_blocking(move || DragSession::new(model, theta, selections, config)).await.map_err(blocking_error);
    let drag = match created {
        Ok(Ok(d)) => d,
        Ok(Err(e)) => {
            s.state().status = ServiceStatus::Configured;
            return Err(e.into());
        }
        Err(e) => {
            s.state().status = ServiceStatus::Configured;
            return Err(e);
        }
    };
    let worker = s.clone();
    tokio::task::spawn_blocking(move || run_worker(worker, drag));
    Ok(s)
}

/// Event stream over the session log, starting at the first frame. Dropping
/// the stream never affects the worker.
fn event_stream(session: Arc<Session>) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = session.version.subscribe();
    stream::unfold((session, rx, 0usize, false), |(s, mut rx, next, done)| async move {
        if done {
            return None;
        }
        loop {
            let (frame, end) = {
                let log = s.events();
                (log.frames.get(next).cloned(), log.end.clone())
            };
            if let Some(f) = frame {
                let ev = Event::default().event("frame").id(next.to_string()).data(f.as_ref());
                return Some((Ok(ev), (s, rx, next + 1, false)));
            }
            if let Some(e) = end {
                let ev = Event::default().event("end").data(e.as_ref());
                return Some((Ok(ev), (s, rx, next, true)));
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

fn sse(session: Arc<Session>) -> Response {
    Sse::new(event_stream(session)).keep_alive(KeepAlive::default()).into_response()
}

async fn drag(State(app): State<AppState>, UrlPath(id): UrlPath<String>, body: Option<Json<DragConfig>>) -> ApiResult<Response> {
    let config = body.map(|Json(c)| c).unwrap_or_default();
    let s = start_drag(&app, &id, config).await?;
    Ok(sse(s))
}

async fn events(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = app.session(&id)?;
    if s.status() == ServiceStatus::Configured {
        return Err(ApiError::Conflict("no drag has been started".into()));
    }
    Ok(sse(s))
}

async fn poll(State(app): State<AppState>, UrlPath(id): UrlPath<String>, Query(q): Query<PollQuery>) -> ApiResult<Json<PollResponse>> {
    let s = app.session(&id)?;
    let status = s.status();
    let log = s.events();
    let frames = log
        .frames
        .iter()
        .skip(q.since)
        .map(|f| serde_json::from_str(f).map_err(|e| ApiError::Internal(e.to_string())))
        .collect::<ApiResult<Vec<FrameEvent>>>()?;
    let end = match &log.end {
        Some(e) => Some(serde_json::from_str(e).map_err(|e| ApiError::Internal(e.to_string()))?),
        None => None,
    };
    Ok(Json(PollResponse { status, next: log.frames.len().max(q.since), frames, end }))
}

async fn trajectory(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<TrajectoryResponse>> {
    let s = app.session(&id)?;
    let st = s.state();
    Ok(Json(TrajectoryResponse { status: st.status, records: st.trajectory.clone() }))
}

async fn cancel(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let s = app.session(&id)?;
    s.cancel.store(true, Ordering::SeqCst);
    {
        let mut st = s.state();
        if st.status == ServiceStatus::Configured {
            st.status = ServiceStatus::Cancelled;
        }
    }
    Ok(Json(view(&s)))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/checkpoints", get(list_checkpoints).post(register))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/selections", post(add_selection))
        .route("/sessions/{id}/drag", post(drag))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/poll", get(poll))
        .route("/sessions/{id}/trajectory", get(trajectory))
        .route("/sessions/{id}/cancel", post(cancel))
        .with_state(state)
}

/// Binds and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> ApiResult<()> {
    let state = AppState::new(config.clone());
    if let Some(dir) = &config.checkpoint_dir {
        let loaded = state.register_dir(dir)?;
        tracing::info!(count = loaded.len(), dir = %dir.display(), "checkpoints registered");
    }
    let timeout = config.idle_timeout();
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(timeout.clamp(Duration::from_secs(1), Duration::from_secs(60)));
        loop {
            tick.tick().await;
            sweeper.evict_idle(timeout);
        }
    });
    let addr = format!("{}:{}", config.host, config.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| ApiError::Internal(format!("bind {addr}: {e}")))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))
}
