//! HTTP + server-sent-event API over live sessions.

use std::collections::HashMap;
use std::convert::Infallible;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use machstate_core::model::{ParameterDef, TimeWindow, Values};
use machstate_core::{MachineStatus, ModelBundle, QualityConfig, QualityModel};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use tokio::task::JoinHandle;
use tokio_stream::wrappers::BroadcastStream;

use crate::session::{Session, SessionConfig, SessionError, TickEvent};

const CHANNEL_CAPACITY: usize = 256;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session: {id}"))
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use machstate_core::Error as Core;
        let status = match &e {
            SessionError::Closed | SessionError::NoTick => StatusCode::CONFLICT,
            SessionError::Core(Core::NoMatchingStatus) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Core(Core::Io(_)) | SessionError::Io(_) | SessionError::Json(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<machstate_core::Error> for ApiError {
    fn from(e: machstate_core::Error) -> Self {
        SessionError::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// What a subscriber sees on a session's event stream.
#[derive(Debug, Clone)]
pub enum StreamEvent {
    Tick(Arc<TickEvent>),
    Closed(ClosedInfo),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClosedInfo {
    pub id: String,
    pub ticks: u64,
    pub final_label: Option<String>,
    pub error: Option<String>,
}

pub struct SessionHandle {
    session: Mutex<Session>,
    tx: broadcast::Sender<StreamEvent>,
    driver: Mutex<Option<JoinHandle<()>>>,
}

impl SessionHandle {
    fn lock(&self) -> std::sync::MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Closes under the lock and announces it unless it was closed and
    /// announced before. A tick that ends the session closes it itself, so
    /// the tick path always announces.
    fn finish(&self, s: &mut Session, error: Option<String>, announce: bool) -> ClosedInfo {
        let final_label = s.close().ok().flatten();
        let info = ClosedInfo {
            id: s.id().to_string(),
            ticks: s.ticks(),
            final_label,
            error,
        };
        if announce {
            let _ = self.tx.send(StreamEvent::Closed(info.clone()));
        }
        info
    }

    /// One tick under the lock; returns false once the session is over.
    pub fn step(&self) -> bool {
        let mut s = self.lock();
        if s.is_closed() {
            return false;
        }
        match s.tick() {
            Ok(Some(ev)) => {
                let _ = self.tx.send(StreamEvent::Tick(Arc::new(ev)));
                true
            }
            Ok(None) => {
                self.finish(&mut s, None, true);
                false
            }
            Err(e) => {
                self.finish(&mut s, Some(e.to_string()), true);
                false
            }
        }
    }

    pub fn subscribe(&self) -> (broadcast::Receiver<StreamEvent>, Option<TickEvent>, Option<ClosedInfo>) {
        let s = self.lock();
        let closed = s.is_closed().then(|| ClosedInfo {
            id: s.id().to_string(),
            ticks: s.ticks(),
            final_label: s.running_label().map(str::to_string),
            error: None,
        });
        (self.tx.subscribe(), s.latest().cloned(), closed)
    }

    pub fn with_session<T>(&self, f: impl FnOnce(&mut Session) -> T) -> T {
        f(&mut self.lock())
    }
}

async fn drive(handle: Arc<SessionHandle>, period: Duration) {
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        interval.tick().await;
        if !handle.step() {
            break;
        }
    }
}

pub struct AppState {
    model: Arc<QualityModel>,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    next_id: AtomicU64,
    log_dir: Option<PathBuf>,
    /// Whether sessions tick on their own. Off lets callers step them.
    autostart: bool,
}

impl AppState {
    pub fn new(model: Arc<QualityModel>) -> Self {
        AppState {
            model,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            log_dir: None,
            autostart: true,
        }
    }

    /// Persists each session log to `<dir>/<id>.jsonl`.
    pub fn with_log_dir(mut self, dir: PathBuf) -> Self {
        self.log_dir = Some(dir);
        self
    }

    pub fn manual_ticks(mut self) -> Self {
        self.autostart = false;
        self
    }

    pub fn model(&self) -> &Arc<QualityModel> {
        &self.model
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<SessionHandle>> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    /// Creates a session and, unless ticks are manual, starts its tick loop.
    /// Must be called inside a tokio runtime.
    pub fn start_session(&self, config: SessionConfig) -> ApiResult<String> {
        let model = match &config.bundle_path {
            Some(p) => {
                let bundle = ModelBundle::load(p)?;
                let violations = bundle.validate();
                if !violations.is_empty() {
                    return Err(machstate_core::Error::InvalidBundle(violations.join("; ")).into());
                }
                Arc::new(QualityModel::new(bundle)?)
            }
            None => Arc::clone(&self.model),
        };
        let id = format!("session-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let session = match &self.log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(SessionError::from)?;
                let file = std::fs::File::create(dir.join(format!("{id}.jsonl"))).map_err(SessionError::from)?;
                Session::with_writer(&id, config, model, Box::new(BufWriter::new(file)))?
            }
            None => Session::with_writer(&id, config, model, Box::new(std::io::sink()))?,
        };
        let period = session.wall_interval();
        let (tx, _) = broadcast::channel(CHANNEL_CAPACITY);
        let handle = Arc::new(SessionHandle {
            session: Mutex::new(session),
            tx,
            driver: Mutex::new(None),
        });
        if self.autostart {
            let task = tokio::spawn(drive(Arc::clone(&handle), period));
            *handle.driver.lock().unwrap_or_else(|p| p.into_inner()) = Some(task);
        }
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id.clone(), handle);
        Ok(id)
    }

    pub fn close_session(&self, id: &str) -> ApiResult<ClosedInfo> {
        let handle = self.session(id)?;
        if let Some(task) = handle.driver.lock().unwrap_or_else(|p| p.into_inner()).take() {
            task.abort();
        }
        let mut s = handle.lock();
        let announce = !s.is_closed();
        Ok(handle.finish(&mut s, None, announce))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelSummary {
    pub format_version: u32,
    pub dataset_fingerprint: String,
    pub min_leaf_size: usize,
    pub grid_seconds: f64,
    pub training_window: TimeWindow,
    pub training_sample_count: usize,
    pub status_state_count: usize,
    pub settings_state_count: usize,
    pub composite_count: usize,
    pub supported_composite_count: usize,
    pub parameters: Vec<ParameterDef>,
    pub quality_config: QualityConfig,
}

impl ModelSummary {
    pub fn of(b: &ModelBundle) -> Self {
        ModelSummary {
            format_version: b.format_version,
            dataset_fingerprint: b.dataset_fingerprint.clone(),
            min_leaf_size: b.min_leaf_size,
            grid_seconds: b.grid_seconds,
            training_window: b.training_window,
            training_sample_count: b.training_sample_count,
            status_state_count: b.status_states.len(),
            settings_state_count: b.settings_states.len(),
            composite_count: b.composites.len(),
            supported_composite_count: b.supported_composite_count(),
            parameters: b.manifest.params().to_vec(),
            quality_config: b.quality_config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CreatedSession {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SettingsRequest {
    pub settings: Values,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QualityRequest {
    pub measurement: f64,
}

/// Either a session (its latest status) or an explicit status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WhatIfRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub status: Option<MachineStatus>,
    pub candidate_settings: Values,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/model", get(get_model))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(get_session).delete(delete_session))
        .route("/api/session/{id}/events", get(session_events))
        .route("/api/session/{id}/settings", post(apply_settings))
        .route("/api/session/{id}/quality", post(record_quality))
        .route("/api/session/{id}/recommendation", get(recommendation))
        .route("/api/whatif", post(whatif))
        .with_state(state)
}

async fn get_model(State(app): State<Arc<AppState>>) -> Json<ModelSummary> {
    Json(ModelSummary::of(app.model.bundle()))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(config): Json<SessionConfig>,
) -> ApiResult<(StatusCode, Json<CreatedSession>)> {
    let id = app.start_session(config)?;
    Ok((StatusCode::CREATED, Json(CreatedSession { id })))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let handle = app.session(&id)?;
    Ok(match handle.with_session(|s| s.latest().cloned()) {
        Some(ev) => Json(ev).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ClosedInfo>> {
    Ok(Json(app.close_session(&id)?))
}

fn sse_event(ev: &StreamEvent) -> Event {
    match ev {
        StreamEvent::Tick(t) => Event::default()
            .event("tick")
            .id(t.seq.to_string())
            .json_data(t.as_ref())
            .expect("tick events serialize"),
        StreamEvent::Closed(c) => Event::default()
            .event("closed")
            .json_data(c)
            .expect("close events serialize"),
    }
}

/// The latest tick (if any), then live ticks in order, then `closed`.
/// A subscriber that falls behind skips the ticks it missed.
pub fn event_stream(handle: &SessionHandle) -> impl Stream<Item = StreamEvent> + Send + 'static {
    let (rx, latest, closed) = handle.subscribe();
    let head: Vec<StreamEvent> = latest
        .map(|e| StreamEvent::Tick(Arc::new(e)))
        .into_iter()
        .chain(closed.clone().map(StreamEvent::Closed))
        .collect();
    let live = BroadcastStream::new(rx).filter_map(|r| async move { r.ok() });
    let live = if closed.is_some() { live.take(0).left_stream() } else { live.right_stream() };
    let events = Box::pin(stream::iter(head).chain(live));
    stream::unfold((events, false), |(mut events, done)| async move {
        if done {
            return None;
        }
        let ev = events.next().await?;
        let closed = matches!(ev, StreamEvent::Closed(_));
        Some((ev, (events, closed)))
    })
}

async fn session_events(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let handle = app.session(&id)?;
    let events = event_stream(&handle).map(|ev| Ok(sse_event(&ev)));
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn apply_settings(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<SettingsRequest>,
) -> ApiResult<Json<crate::session::ApplyAck>> {
    let handle = app.session(&id)?;
    Ok(Json(handle.with_session(|s| s.apply_settings(&req.settings))?))
}

async fn record_quality(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<QualityRequest>,
) -> ApiResult<Json<crate::session::QualityAck>> {
    let handle = app.session(&id)?;
    Ok(Json(handle.with_session(|s| s.record_quality(req.measurement))?))
}

async fn recommendation(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<machstate_core::Recommendation>> {
    let handle = app.session(&id)?;
    Ok(Json(handle.with_session(|s| s.recommendation())?))
}

async fn whatif(
    State(app): State<Arc<AppState>>,
    Json(req): Json<WhatIfRequest>,
) -> ApiResult<Json<machstate_core::Prediction>> {
    match (&req.session_id, &req.status) {
        (Some(id), None) => {
            let handle = app.session(id)?;
            Ok(Json(handle.with_session(|s| s.whatif(&req.candidate_settings))?))
        }
        (None, Some(status)) => Ok(Json(app.model.whatif(
            status,
            &req.candidate_settings,
            machstate_core::analytics::DEFAULT_DECISION_THRESHOLD,
        )?)),
        _ => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "exactly one of sessionId or status is required",
        )),
    }
}

/// Binds and serves until ctrl-c. `static_dir` serves console assets.
pub async fn serve(state: Arc<AppState>, port: u16, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let mut app = router(state);
    if let Some(dir) = static_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
