//! The coordinator process: one event loop task per project, a WebSocket
//! endpoint for workers and an HTTP control API.
//!
//! Routes:
//!
//! | method | path | body / answer |
//! |---|---|---|
//! | GET | `/ws` | WebSocket; first frame must be a `join` envelope |
//! | GET | `/projects` | list of project summaries |
//! | POST | `/projects` | `ProjectConfig` JSON, or a model archive with `?project_id=&T_seconds=` |
//! | GET | `/projects/{id}` | summary |
//! | GET | `/projects/{id}/telemetry` | server-sent events, one `iteration` event per record |
//! | GET | `/projects/{id}/telemetry/ws` | WebSocket of `telemetry` envelopes |
//! | GET | `/projects/{id}/history?after=N` | JSON list of records with `iteration > N` |
//! | POST | `/projects/{id}/hyper` | `Hyperparams`; applied at the next reduce |
//! | POST | `/projects/{id}/period` | `{"T_seconds": x}` |
//! | POST | `/projects/{id}/snapshot` | model archive JSON |
//! | POST | `/projects/{id}/predict` | PNG or MLB1 body; `{label, probability}` |
//! | POST | `/projects/{id}/datasets` | a manifest, or `{"dataset_id", "datastore_url"?}` |
//! | GET | `/projects/{id}/workers` | per-worker telemetry |
//! | GET | `/projects/{id}/allocation` | allocation sizes |
//! | POST | `/projects/{id}/workers/{wid}/pause` and `/resume` | |

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use futures::{SinkExt, Stream, StreamExt};
use gradloom_core::coordinator::{Outgoing, Project, ProjectConfig, ProjectSummary, ReportOutcome};
use gradloom_core::datastore::{decode_item, DatasetManifest, ItemFormat, MLB1_MAGIC};
use gradloom_core::nn::{Hyperparams, ModelArchive};
use gradloom_core::protocol::{
    decode, Envelope, IterationRecord, Message, SeqGuard, Sender, WorkerMode, PROTOCOL_VERSION,
};
use serde::Deserialize;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio_stream::wrappers::BroadcastStream;

use crate::client::{AllocationView, Client, Prediction};
use crate::config::CoordinatorConfig;
use crate::server::{ApiError, RunningServer};

type Job = Box<dyn FnOnce(&mut Project) + Send>;

enum Event {
    Join {
        worker_id: String,
        mode: WorkerMode,
        capacity: u64,
        conn: u64,
        outbox: mpsc::UnboundedSender<Message>,
        reply: oneshot::Sender<Result<(), String>>,
    },
    Inbound {
        worker_id: String,
        conn: u64,
        message: Message,
    },
    Closed {
        worker_id: String,
        conn: u64,
    },
    Control(Job),
}

#[derive(Clone)]
struct ProjectHandle {
    events: mpsc::UnboundedSender<Event>,
    telemetry: broadcast::Sender<IterationRecord>,
    history: Arc<Mutex<VecDeque<IterationRecord>>>,
}

impl ProjectHandle {
    /// Runs `f` on the project inside its event loop, between events.
    async fn with<R: Send + 'static>(&self, f: impl FnOnce(&mut Project) -> R + Send + 'static) -> Result<R, ApiError> {
        let (tx, rx) = oneshot::channel();
        let job: Job = Box::new(move |p| {
            let _ = tx.send(f(p));
        });
        self.events
            .send(Event::Control(job))
            .map_err(|_| ApiError(StatusCode::GONE, "project loop stopped".into()))?;
        rx.await
            .map_err(|_| ApiError(StatusCode::GONE, "project loop stopped".into()))
    }
}

#[derive(Debug, Clone)]
struct Settings {
    max_frame: usize,
    ping_interval: Duration,
    missed_pings: u32,
    history: usize,
    datastore_url: Option<String>,
}

/// Shared state of a coordinator process.
pub struct Hub {
    settings: Settings,
    projects: RwLock<BTreeMap<String, ProjectHandle>>,
    next_conn: AtomicU64,
}

impl Hub {
    fn project(&self, id: &str) -> Result<ProjectHandle, ApiError> {
        self.projects
            .read()
            .expect("project map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown project {id:?}")))
    }

    /// Starts the event loop of a new project.
    pub fn add_project(&self, config: ProjectConfig) -> Result<ProjectSummary, ApiError> {
        let mut projects = self.projects.write().expect("project map lock");
        if projects.contains_key(&config.project_id) {
            return Err(ApiError(
                StatusCode::CONFLICT,
                format!("project {:?} already exists", config.project_id),
            ));
        }
        let project = Project::new(config).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
        let summary = project.summary();
        let (events, rx) = mpsc::unbounded_channel();
        let (telemetry, _) = broadcast::channel(256);
        let handle = ProjectHandle {
            events,
            telemetry: telemetry.clone(),
            history: Arc::new(Mutex::new(VecDeque::new())),
        };
        tokio::spawn(project_loop(project, rx, handle.clone(), self.settings.clone()));
        projects.insert(summary.project_id.clone(), handle);
        tracing::info!(project = %summary.project_id, "project started");
        Ok(summary)
    }

    fn stop_all(&self) {
        self.projects.write().expect("project map lock").clear();
    }
}

struct Conn {
    id: u64,
    outbox: mpsc::UnboundedSender<Message>,
    last_seen_ms: f64,
}

fn dispatch(conns: &BTreeMap<String, Conn>, out: Vec<Outgoing>) {
    for o in out {
        if let Some(c) = conns.get(&o.to) {
            let _ = c.outbox.send(o.message);
        }
    }
}

fn lose(project: &mut Project, conns: &mut BTreeMap<String, Conn>, worker_id: &str, why: &str) {
    if conns.remove(worker_id).is_some() {
        tracing::warn!(project = %project.id(), worker = %worker_id, "worker lost: {why}");
    }
    let out = project.worker_lost(worker_id);
    dispatch(conns, out);
}

async fn project_loop(
    mut project: Project,
    mut rx: mpsc::UnboundedReceiver<Event>,
    handle: ProjectHandle,
    settings: Settings,
) {
    let epoch = Instant::now();
    let now_ms = || epoch.elapsed().as_secs_f64() * 1000.0;
    let mut conns: BTreeMap<String, Conn> = BTreeMap::new();
    let mut ping = tokio::time::interval(settings.ping_interval);
    ping.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let ping_timeout_ms = settings.ping_interval.as_secs_f64() * 1000.0 * settings.missed_pings as f64;

    loop {
        let wait = match project.next_deadline_ms() {
            Some(d) => Duration::from_secs_f64(((d - now_ms()) / 1000.0).clamp(0.0, 1.0)),
            None => Duration::from_secs(1),
        };
        tokio::select! {
            event = rx.recv() => {
                let Some(event) = event else { break };
                match event {
                    Event::Join { worker_id, mode, capacity, conn, outbox, reply } => {
                        match project.join(&worker_id, mode, capacity) {
                            Ok(()) => {
                                tracing::info!(project = %project.id(), worker = %worker_id, %mode, capacity, "join");
                                conns.insert(worker_id, Conn { id: conn, outbox, last_seen_ms: now_ms() });
                                let _ = reply.send(Ok(()));
                            }
                            Err(e) => {
                                let _ = reply.send(Err(e.to_string()));
                            }
                        }
                    }
                    Event::Inbound { worker_id, conn, message } => {
                        match conns.get_mut(&worker_id) {
                            Some(c) if c.id == conn => c.last_seen_ms = now_ms(),
                            _ => continue,
                        }
                        handle_inbound(&mut project, &mut conns, &worker_id, message, now_ms());
                    }
                    Event::Closed { worker_id, conn } => {
                        if conns.get(&worker_id).is_some_and(|c| c.id == conn) {
                            lose(&mut project, &mut conns, &worker_id, "connection closed");
                        }
                    }
                    Event::Control(job) => job(&mut project),
                }
            }
            _ = tokio::time::sleep(wait) => {}
            _ = ping.tick() => {
                let now = now_ms();
                let stale: Vec<String> = conns
                    .iter()
                    .filter(|(_, c)| now - c.last_seen_ms > ping_timeout_ms)
                    .map(|(id, _)| id.clone())
                    .collect();
                for id in stale {
                    lose(&mut project, &mut conns, &id, "missed pings");
                }
                for c in conns.values() {
                    let _ = c.outbox.send(Message::Ping { sent_at_ms: now as u64 });
                }
            }
        }

        let now = now_ms();
        if project.due(now) {
            let boundary = project.run_boundary(now);
            dispatch(&conns, boundary.outgoing);
            if let Some(record) = boundary.record {
                tracing::info!(
                    project = %project.id(),
                    iteration = record.iteration,
                    reports = record.reports_received,
                    examples = record.total_examples,
                    power = format!("{:.1}", record.power),
                    stalled = record.stalled,
                    "iteration"
                );
                {
                    let mut history = handle.history.lock().expect("history lock");
                    history.push_back(record.clone());
                    while history.len() > settings.history {
                        history.pop_front();
                    }
                }
                let _ = handle.telemetry.send(record);
            }
        }
    }
    for (_, c) in conns {
        let _ = c.outbox.send(Message::Bye {
            reason: "coordinator shutting down".into(),
        });
    }
    tracing::info!(project = %project.id(), "project stopped");
}

fn handle_inbound(
    project: &mut Project,
    conns: &mut BTreeMap<String, Conn>,
    worker_id: &str,
    message: Message,
    now: f64,
) {
    match message {
        Message::CacheStatus {
            cached,
            complete,
            missing_ids,
        } => {
            tracing::debug!(worker = %worker_id, cached, complete, missing = missing_ids.len(), "cache status");
            let out = project.cache_status(worker_id, complete, &missing_ids);
            dispatch(conns, out);
        }
        Message::GradientReport { bundle } => {
            let version = bundle.params_version;
            match project.gradient_report(worker_id, bundle.into(), now) {
                ReportOutcome::Accepted => {}
                ReportOutcome::Stale => {
                    tracing::info!(worker = %worker_id, version, current = project.params().version, "stale report discarded")
                }
                ReportOutcome::Rejected => tracing::warn!(worker = %worker_id, "report with wrong layout rejected"),
            }
        }
        Message::StatsReport {
            iteration,
            metric_name,
            value,
        } => project.record_metric(worker_id, iteration, &metric_name, value),
        Message::Pong { sent_at_ms } => project.pong(worker_id, now - sent_at_ms as f64),
        Message::Ping { sent_at_ms } => {
            if let Some(c) = conns.get(worker_id) {
                let _ = c.outbox.send(Message::Pong { sent_at_ms });
            }
        }
        Message::SaveRequest => {
            if let Some(c) = conns.get(worker_id) {
                let _ = c.outbox.send(Message::ModelSnapshot {
                    archive: Box::new(project.snapshot()),
                });
            }
        }
        Message::PredictRequest { request_id, input } => {
            let result = match input {
                gradloom_core::protocol::PredictInput::Tensor(t) => Ok(t),
                gradloom_core::protocol::PredictInput::Png(b64) => {
                    base64::engine::general_purpose::STANDARD
                        .decode(&b64)
                        .map_err(|e| e.to_string())
                        .and_then(|bytes| decode_item(&bytes, ItemFormat::Png).map_err(|e| e.to_string()))
                }
            }
            .and_then(|x| {
                gradloom_core::worker::predict(project.network(), project.params(), &x).map_err(|e| e.to_string())
            });
            let reply = match result {
                Ok((label, probability)) => Message::PredictResponse {
                    request_id,
                    label,
                    probability,
                },
                Err(e) => Message::Bye {
                    reason: format!("predict request {request_id} failed: {e}"),
                },
            };
            if let Some(c) = conns.get(worker_id) {
                let _ = c.outbox.send(reply);
            }
        }
        Message::Bye { reason } => lose(project, conns, worker_id, &format!("said bye: {reason}")),
        other => tracing::warn!(worker = %worker_id, kind = other.kind(), "unexpected message"),
    }
}

// ---------------------------------------------------------------- websocket

async fn ws_upgrade(ws: WebSocketUpgrade, State(hub): State<Arc<Hub>>) -> Response {
    let max = hub.settings.max_frame;
    ws.max_message_size(max)
        .max_frame_size(max)
        .on_upgrade(move |socket| serve_worker(hub, socket))
}

fn frame_bytes(frame: &WsMessage) -> Option<&[u8]> {
    match frame {
        WsMessage::Text(t) => Some(t.as_bytes()),
        WsMessage::Binary(b) => Some(b),
        _ => None,
    }
}

async fn send_bye(socket: &mut WebSocket, project_id: &str, reason: String) {
    tracing::warn!("rejecting connection: {reason}");
    let env = Sender::new(project_id, "coordinator").wrap(Message::Bye { reason });
    let text = serde_json::to_string(&env).expect("envelope serialises");
    let _ = socket.send(WsMessage::Text(text.into())).await;
    let _ = socket.close().await;
}

async fn serve_worker(hub: Arc<Hub>, mut socket: WebSocket) {
    let first = loop {
        match tokio::time::timeout(Duration::from_secs(30), socket.recv()).await {
            Ok(Some(Ok(frame))) => {
                if let Some(bytes) = frame_bytes(&frame) {
                    break decode(bytes, hub.settings.max_frame);
                }
                if matches!(frame, WsMessage::Close(_)) {
                    return;
                }
            }
            _ => return,
        }
    };
    let env = match first {
        Ok(env) => env,
        Err(e) => return send_bye(&mut socket, "", format!("bad first frame: {e}")).await,
    };
    let Message::Join {
        worker_id,
        mode,
        capacity,
        protocol_version,
    } = env.message.clone()
    else {
        return send_bye(&mut socket, &env.project_id, "first message must be join".into()).await;
    };
    if protocol_version != PROTOCOL_VERSION {
        return send_bye(
            &mut socket,
            &env.project_id,
            format!("protocol version {protocol_version} is not supported (expected {PROTOCOL_VERSION})"),
        )
        .await;
    }
    if env.sender_id != worker_id {
        return send_bye(&mut socket, &env.project_id, "sender_id must equal worker_id".into()).await;
    }
    let project = match hub.project(&env.project_id) {
        Ok(p) => p,
        Err(e) => return send_bye(&mut socket, &env.project_id, e.1).await,
    };
    let conn = hub.next_conn.fetch_add(1, Ordering::Relaxed);
    let (outbox, mut outbox_rx) = mpsc::unbounded_channel();
    let (reply, accepted) = oneshot::channel();
    let _ = project.events.send(Event::Join {
        worker_id: worker_id.clone(),
        mode,
        capacity,
        conn,
        outbox,
        reply,
    });
    match accepted.await {
        Ok(Ok(())) => {}
        Ok(Err(reason)) => return send_bye(&mut socket, &env.project_id, reason).await,
        Err(_) => return send_bye(&mut socket, &env.project_id, "project stopped".into()).await,
    }

    let (mut sink, mut stream) = socket.split();
    let project_id = env.project_id.clone();
    let writer = tokio::spawn(async move {
        let mut sender = Sender::new(project_id, "coordinator");
        while let Some(message) = outbox_rx.recv().await {
            let bye = matches!(message, Message::Bye { .. });
            let text = serde_json::to_string(&sender.wrap(message)).expect("envelope serialises");
            if sink.send(WsMessage::Text(text.into())).await.is_err() {
                break;
            }
            if bye {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let mut guard = SeqGuard::default();
    let _ = guard.accept(&env);
    while let Some(Ok(frame)) = stream.next().await {
        if matches!(frame, WsMessage::Close(_)) {
            break;
        }
        let Some(bytes) = frame_bytes(&frame) else {
            continue;
        };
        let env: Envelope = match decode(bytes, hub.settings.max_frame) {
            Ok(env) => env,
            Err(e) => {
                tracing::warn!(worker = %worker_id, "dropping malformed frame: {e}");
                continue;
            }
        };
        if env.sender_id != worker_id {
            tracing::warn!(worker = %worker_id, claimed = %env.sender_id, "dropping frame with foreign sender id");
            continue;
        }
        if let Err(e) = guard.accept(&env) {
            tracing::warn!(worker = %worker_id, "dropping frame: {e}");
            continue;
        }
        if project
            .events
            .send(Event::Inbound {
                worker_id: worker_id.clone(),
                conn,
                message: env.message,
            })
            .is_err()
        {
            break;
        }
    }
    let _ = project.events.send(Event::Closed { worker_id, conn });
    writer.abort();
}

// ---------------------------------------------------------------- http

fn bad_request(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, e.to_string())
}

async fn list_projects(State(hub): State<Arc<Hub>>) -> Result<Json<Vec<ProjectSummary>>, ApiError> {
    let handles: Vec<ProjectHandle> = hub.projects.read().expect("project map lock").values().cloned().collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.with(|p| p.summary()).await?);
    }
    Ok(Json(out))
}

async fn create_project(
    State(hub): State<Arc<Hub>>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let value: serde_json::Value = serde_json::from_slice(&body).map_err(bad_request)?;
    let config = if value.get("format_version").is_some() {
        let text = std::str::from_utf8(&body).map_err(bad_request)?;
        let (archive, _) = ModelArchive::from_json(text).map_err(bad_request)?;
        let id = q
            .get("project_id")
            .cloned()
            .ok_or_else(|| bad_request("resuming from an archive needs ?project_id="))?;
        let period: f64 = q
            .get("T_seconds")
            .map(|t| t.parse().map_err(bad_request))
            .transpose()?
            .unwrap_or(2.0);
        let mut config = ProjectConfig::new(id, archive.spec.clone(), period);
        config.spec = None;
        config.resume_from = Some(Box::new(archive));
        config
    } else {
        serde_json::from_value(value).map_err(|e| bad_request(format!("invalid project config: {e}")))?
    };
    let summary = hub.add_project(config)?;
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn get_project(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> Result<Json<ProjectSummary>, ApiError> {
    Ok(Json(hub.project(&id)?.with(|p| p.summary()).await?))
}

#[derive(Deserialize)]
struct HistoryQuery {
    #[serde(default)]
    after: u64,
}

async fn history(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    Query(q): Query<HistoryQuery>,
) -> Result<Json<Vec<IterationRecord>>, ApiError> {
    let h = hub.project(&id)?;
    let history = h.history.lock().expect("history lock");
    Ok(Json(history.iter().filter(|r| r.iteration > q.after).cloned().collect()))
}

async fn telemetry_sse(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ApiError> {
    let h = hub.project(&id)?;
    let live = BroadcastStream::new(h.telemetry.subscribe());
    let past: Vec<IterationRecord> = h.history.lock().expect("history lock").iter().cloned().collect();
    let last_past = past.last().map(|r| r.iteration).unwrap_or(0);
    let to_event = |r: &IterationRecord| {
        Ok(SseEvent::default()
            .event("iteration")
            .id(r.iteration.to_string())
            .data(serde_json::to_string(r).expect("record serialises")))
    };
    let stream = futures::stream::iter(past.iter().map(to_event).collect::<Vec<_>>()).chain(live.filter_map(move |r| {
        let item = match r {
            Ok(r) if r.iteration > last_past => Some(to_event(&r)),
            _ => None,
        };
        futures::future::ready(item)
    }));
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn telemetry_ws(
    ws: WebSocketUpgrade,
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let h = hub.project(&id)?;
    let mut rx = h.telemetry.subscribe();
    Ok(ws.on_upgrade(move |mut socket| async move {
        let mut sender = Sender::new(id, "coordinator");
        loop {
            tokio::select! {
                record = rx.recv() => match record {
                    Ok(record) => {
                        let env = sender.wrap(Message::Telemetry { record: Box::new(record) });
                        let text = serde_json::to_string(&env).expect("envelope serialises");
                        if socket.send(WsMessage::Text(text.into())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(_) => break,
                },
                incoming = socket.recv() => match incoming {
                    Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => break,
                    _ => {}
                },
            }
        }
    }))
}

async fn set_hyper(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    Json(hyper): Json<Hyperparams>,
) -> Result<Json<serde_json::Value>, ApiError> {
    hub.project(&id)?
        .with(move |p| p.set_hyper(hyper))
        .await?
        .map_err(bad_request)?;
    Ok(Json(serde_json::json!({ "status": "staged for the next reduce" })))
}

#[derive(Deserialize)]
struct PeriodBody {
    #[serde(rename = "T_seconds")]
    period_s: f64,
}

async fn set_period(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    Json(body): Json<PeriodBody>,
) -> Result<Json<serde_json::Value>, ApiError> {
    hub.project(&id)?
        .with(move |p| p.set_period(body.period_s))
        .await?
        .map_err(bad_request)?;
    Ok(Json(serde_json::json!({ "T_seconds": body.period_s })))
}

async fn snapshot(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let archive = hub.project(&id)?.with(|p| p.snapshot()).await?;
    Ok((
        [(axum::http::header::CONTENT_TYPE, "application/json")],
        archive.to_json(),
    )
        .into_response())
}

async fn predict(State(hub): State<Arc<Hub>>, Path(id): Path<String>, body: Bytes) -> Result<Json<Prediction>, ApiError> {
    let format = if body.starts_with(MLB1_MAGIC) {
        ItemFormat::Mlb1
    } else {
        ItemFormat::Png
    };
    let x = decode_item(&body, format).map_err(bad_request)?;
    let (label, probability) = hub
        .project(&id)?
        .with(move |p| gradloom_core::worker::predict(p.network(), p.params(), &x))
        .await?
        .map_err(bad_request)?;
    Ok(Json(Prediction { label, probability }))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RegisterBody {
    Manifest(DatasetManifest),
    Remote {
        dataset_id: String,
        #[serde(default)]
        datastore_url: Option<String>,
    },
}

async fn register_dataset(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
    Json(body): Json<RegisterBody>,
) -> Result<Response, ApiError> {
    let project = hub.project(&id)?;
    let manifest = match body {
        RegisterBody::Manifest(m) => m,
        RegisterBody::Remote {
            dataset_id,
            datastore_url,
        } => {
            let url = datastore_url
                .or_else(|| hub.settings.datastore_url.clone())
                .ok_or_else(|| bad_request("no datastore_url given or configured"))?;
            fetch_manifest(url, dataset_id).await?
        }
    };
    let dataset_id = manifest.dataset_id.clone();
    let n = project
        .with(move |p| p.register_dataset(&manifest))
        .await?
        .map_err(|e| ApiError(StatusCode::CONFLICT, e.to_string()))?;
    Ok((
        StatusCode::CREATED,
        Json(serde_json::json!({ "dataset_id": dataset_id, "registered": n })),
    )
        .into_response())
}

async fn fetch_manifest(url: String, dataset_id: String) -> Result<DatasetManifest, ApiError> {
    tokio::task::spawn_blocking(move || Client::new(&url).manifest(&dataset_id))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError(StatusCode::BAD_GATEWAY, e.to_string()))
}

async fn workers(
    State(hub): State<Arc<Hub>>,
    Path(id): Path<String>,
) -> Result<Json<Vec<gradloom_core::protocol::WorkerTelemetry>>, ApiError> {
    Ok(Json(hub.project(&id)?.with(|p| p.worker_telemetry()).await?))
}

async fn allocation(State(hub): State<Arc<Hub>>, Path(id): Path<String>) -> Result<Json<AllocationView>, ApiError> {
    let view = hub
        .project(&id)?
        .with(|p| {
            let t = p.table();
            AllocationView {
                workers: t.sizes().into_iter().map(|(w, n)| (w, n as u64)).collect(),
                allocated: t.allocated_len() as u64,
                unallocated: t.unallocated_len() as u64,
            }
        })
        .await?;
    Ok(Json(view))
}

async fn pause(
    State(hub): State<Arc<Hub>>,
    Path((id, worker, action)): Path<(String, String, String)>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let paused = match action.as_str() {
        "pause" => true,
        "resume" => false,
        other => return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown action {other:?}"))),
    };
    hub.project(&id)?
        .with(move |p| p.set_paused(&worker, paused))
        .await?
        .map_err(|e| ApiError(StatusCode::NOT_FOUND, e.to_string()))?;
    Ok(Json(serde_json::json!({ "paused": paused })))
}

pub fn coordinator_router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/ws", get(ws_upgrade))
        .route("/projects", get(list_projects).post(create_project))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/telemetry", get(telemetry_sse))
        .route("/projects/{id}/telemetry/ws", get(telemetry_ws))
        .route("/projects/{id}/history", get(history))
        .route("/projects/{id}/hyper", post(set_hyper))
        .route("/projects/{id}/period", post(set_period))
        .route("/projects/{id}/snapshot", post(snapshot))
        .route("/projects/{id}/predict", post(predict))
        .route("/projects/{id}/datasets", post(register_dataset))
        .route("/projects/{id}/workers", get(workers))
        .route("/projects/{id}/allocation", get(allocation))
        .route("/projects/{id}/workers/{worker}/{action}", post(pause))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(hub)
}

/// A running coordinator.
pub struct Coordinator {
    hub: Arc<Hub>,
    server: RunningServer,
}

impl Coordinator {
    /// Binds the listener, starts configured projects and registers their
    /// datasets from the configured datastore.
    pub async fn start(config: CoordinatorConfig) -> Result<Self, crate::NodeError> {
        let hub = Arc::new(Hub {
            settings: Settings {
                max_frame: config.max_frame_bytes,
                ping_interval: Duration::from_millis(config.ping_interval_ms),
                missed_pings: config.missed_pings,
                history: config.telemetry_history,
                datastore_url: config.datastore_url.clone(),
            },
            projects: RwLock::new(BTreeMap::new()),
            next_conn: AtomicU64::new(1),
        });
        for entry in config.projects {
            let id = entry.config.project_id.clone();
            hub.add_project(entry.config).map_err(|e| crate::NodeError::Startup(e.1))?;
            for dataset in entry.datasets {
                let url = config
                    .datastore_url
                    .clone()
                    .ok_or_else(|| crate::NodeError::Startup("datasets listed but no datastore_url".into()))?;
                let manifest = fetch_manifest(url, dataset).await.map_err(|e| crate::NodeError::Startup(e.1))?;
                hub.project(&id)
                    .map_err(|e| crate::NodeError::Startup(e.1))?
                    .with(move |p| p.register_dataset(&manifest))
                    .await
                    .map_err(|e| crate::NodeError::Startup(e.1))?
                    .map_err(|e| crate::NodeError::Startup(e.to_string()))?;
            }
        }
        let server = RunningServer::bind(&config.host, config.port, coordinator_router(hub.clone())).await?;
        tracing::info!(addr = %server.addr(), "coordinator listening");
        Ok(Self { hub, server })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.server.addr()
    }

    pub fn http_url(&self) -> String {
        self.server.http_url()
    }

    pub fn ws_url(&self) -> String {
        format!("ws://{}/ws", self.server.addr())
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub async fn wait(self) -> std::io::Result<()> {
        self.server.wait().await
    }

    /// Stops every project loop (workers receive `bye`) and the listener.
    pub async fn shutdown(self) {
        self.hub.stop_all();
        tokio::time::sleep(Duration::from_millis(50)).await;
        self.server.shutdown().await;
    }
}
