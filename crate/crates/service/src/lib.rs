//! HTTP session host for a ringflow stream.
//!
//! Request/response: session lifecycle, control and PCM fetch. Server push:
//! telemetry as server-sent events. All bodies are versioned JSON.

use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::header::{HeaderName, HeaderValue, CONTENT_TYPE};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use ringflow_core::driver::Control;
use ringflow_core::pipeline::Snapshot;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, Mutex};

pub mod config;
pub mod error;
pub mod session;
pub mod telemetry;

pub use config::{Args, Clock, SessionConfig};
pub use error::ServiceError;
pub use session::{Ack, Session, CONTROL_CAPACITY};
pub use telemetry::{AppliedControl, CompletionSummary, Telemetry, TelemetryMessage, TickTelemetry, SCHEMA_VERSION};

pub const PCM_HEADER: &str = "x-pcm-header";
pub const PCM_TICK: &str = "x-pcm-tick";

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    /// Idle time after which a telemetry subscriber gets a heartbeat.
    pub heartbeat: Duration,
    /// Per-subscriber backlog before the oldest records are dropped.
    pub subscriber_backlog: usize,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            heartbeat: Duration::from_secs(1),
            subscriber_backlog: 1024,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    defaults: SessionConfig,
    options: ServiceOptions,
    /// The running session, or the last stopped one.
    session: Mutex<Option<Session>>,
    telemetry: broadcast::Sender<Arc<TelemetryMessage>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(defaults: SessionConfig, options: ServiceOptions) -> Self {
        let (telemetry, _) = broadcast::channel(options.subscriber_backlog);
        Self {
            inner: Arc::new(Inner {
                defaults,
                options,
                session: Mutex::new(None),
                telemetry,
                next_id: AtomicU64::new(1),
            }),
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<TelemetryMessage>> {
        self.inner.telemetry.subscribe()
    }

    pub async fn start(&self, overrides: Option<serde_json::Value>) -> Result<SessionInfo, ServiceError> {
        let config = self.inner.defaults.merged(overrides)?;
        let mut slot = self.inner.session.lock().await;
        if slot.as_ref().is_some_and(Session::is_running) {
            return Err(ServiceError::AlreadyRunning);
        }
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let session = Session::start(id, config, self.inner.telemetry.clone())?;
        let info = SessionInfo::of(&session);
        *slot = Some(session);
        Ok(info)
    }

    pub async fn stop(&self) -> Result<SessionInfo, ServiceError> {
        let mut slot = self.inner.session.lock().await;
        match slot.as_mut() {
            Some(s) if s.is_running() => {
                s.stop().await?;
                Ok(SessionInfo::of(s))
            }
            _ => Err(ServiceError::NotRunning),
        }
    }

    pub async fn info(&self) -> Option<SessionInfo> {
        self.inner.session.lock().await.as_ref().map(SessionInfo::of)
    }

    pub async fn control(&self, control: Control) -> Result<Ack, ServiceError> {
        let slot = self.inner.session.lock().await;
        match slot.as_ref() {
            Some(s) if s.is_running() => s.control(control).await,
            _ => Err(ServiceError::NotRunning),
        }
    }

    pub async fn step(&self, ticks: u64) -> Result<Option<u64>, ServiceError> {
        let slot = self.inner.session.lock().await;
        match slot.as_ref() {
            Some(s) if s.is_running() => s.step(ticks).await,
            _ => Err(ServiceError::NotRunning),
        }
    }

    async fn heartbeat(&self) -> TelemetryMessage {
        let slot = self.inner.session.lock().await;
        TelemetryMessage::new(Telemetry::Heartbeat {
            session: slot.as_ref().map(|s| s.id),
            running: slot.as_ref().is_some_and(Session::is_running),
            last_tick: slot.as_ref().and_then(|s| s.shared.last_tick()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub schema_version: u32,
    pub session: u64,
    pub running: bool,
    pub config: SessionConfig,
    pub last_tick: Option<u64>,
    pub registry_digest: String,
    pub receptive_field: usize,
    pub snapshot: Snapshot,
}

impl SessionInfo {
    fn of(s: &Session) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            session: s.id,
            running: s.is_running(),
            config: s.config.clone(),
            last_tick: s.shared.last_tick(),
            registry_digest: s.shared.registry_digest(),
            receptive_field: s.receptive_field,
            snapshot: s.shared.snapshot(),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", get(get_session))
        .route("/session/start", post(start_session))
        .route("/session/stop", post(stop_session))
        .route("/session/step", post(step_session))
        .route("/control", post(post_control))
        .route("/telemetry", get(telemetry_stream))
        .route("/telemetry/recent", get(telemetry_recent))
        .route("/pcm/latest", get(pcm_latest))
        .with_state(state)
}

fn schema(e: JsonRejection) -> ServiceError {
    ServiceError::Schema(e.body_text())
}

async fn get_session(State(app): State<AppState>) -> Result<Json<SessionInfo>, ServiceError> {
    app.info().await.map(Json).ok_or(ServiceError::NotRunning)
}

async fn start_session(
    State(app): State<AppState>,
    body: Option<Json<serde_json::Value>>,
) -> Result<Json<SessionInfo>, ServiceError> {
    app.start(body.map(|Json(v)| v)).await.map(Json)
}

async fn stop_session(State(app): State<AppState>) -> Result<Json<SessionInfo>, ServiceError> {
    app.stop().await.map(Json)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepBody {
    ticks: u64,
}

#[derive(Debug, Serialize)]
struct StepReply {
    last_tick: Option<u64>,
}

async fn step_session(
    State(app): State<AppState>,
    body: Result<Json<StepBody>, JsonRejection>,
) -> Result<Json<StepReply>, ServiceError> {
    let Json(body) = body.map_err(schema)?;
    let last_tick = app.step(body.ticks).await?;
    Ok(Json(StepReply { last_tick }))
}

async fn post_control(
    State(app): State<AppState>,
    body: Result<Json<Control>, JsonRejection>,
) -> Result<Json<Ack>, ServiceError> {
    let Json(control) = body.map_err(schema)?;
    app.control(control).await.map(Json)
}

async fn telemetry_stream(State(app): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = app.subscribe();
    let heartbeat = app.inner.options.heartbeat;
    let stream = futures::stream::unfold((rx, app), move |(mut rx, app)| async move {
        let msg = match tokio::time::timeout(heartbeat, rx.recv()).await {
            Ok(Ok(m)) => m,
            Ok(Err(broadcast::error::RecvError::Lagged(count))) => {
                Arc::new(TelemetryMessage::new(Telemetry::Dropped { count }))
            }
            Ok(Err(broadcast::error::RecvError::Closed)) => return None,
            Err(_) => Arc::new(app.heartbeat().await),
        };
        let event = Event::default()
            .event(msg.kind())
            .json_data(&*msg)
            .expect("telemetry serializes");
        Some((Ok(event), (rx, app)))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

#[derive(Debug, Deserialize)]
struct RecentQuery {
    since: Option<u64>,
}

#[derive(Debug, Serialize)]
struct RecentReply {
    schema_version: u32,
    session: Option<u64>,
    records: Vec<Arc<TelemetryMessage>>,
}

async fn telemetry_recent(State(app): State<AppState>, Query(q): Query<RecentQuery>) -> Json<RecentReply> {
    let slot = app.inner.session.lock().await;
    Json(RecentReply {
        schema_version: SCHEMA_VERSION,
        session: slot.as_ref().map(|s| s.id),
        records: slot.as_ref().map(|s| s.shared.recent(q.since)).unwrap_or_default(),
    })
}

#[derive(Debug, Deserialize)]
struct PcmQuery {
    start: Option<usize>,
    frames: Option<usize>,
    overlap: Option<usize>,
}

/// Windowed decode of the latest completion. The body is little-endian i16
/// mono; the header travels as JSON in `x-pcm-header`.
async fn pcm_latest(State(app): State<AppState>, Query(q): Query<PcmQuery>) -> Result<Response, ServiceError> {
    let (codec, rf, latest) = {
        let slot = app.inner.session.lock().await;
        let s = slot.as_ref().ok_or(ServiceError::NotRunning)?;
        (Arc::clone(&s.codec), s.receptive_field, s.shared.latest())
    };
    let (tick, latent) = latest.ok_or(ServiceError::NoCompletion)?;
    let start = q.start.unwrap_or(0);
    let frames = q.frames.unwrap_or(latent.frames().saturating_sub(start));
    let end = start.checked_add(frames).ok_or_else(|| ServiceError::Rejected("window overflows".into()))?;
    let chunk = codec.windowed_decode(&latent, start..end, q.overlap.unwrap_or(rf))?;
    let header = serde_json::to_string(&chunk.header()).map_err(|e| ServiceError::Internal(e.to_string()))?;
    let header = HeaderValue::from_str(&header).map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok((
        [
            (CONTENT_TYPE, HeaderValue::from_static("application/octet-stream")),
            (HeaderName::from_static(PCM_HEADER), header),
            (HeaderName::from_static(PCM_TICK), HeaderValue::from(tick)),
        ],
        chunk.to_le_bytes(),
    )
        .into_response())
}
