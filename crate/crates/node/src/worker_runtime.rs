//! Worker process runtime.
//!
//! A control task owns the WebSocket: it answers pings at once and forwards
//! everything else to a compute thread through one ordered queue. The
//! compute thread owns the data cache and the model copy, fetches shards
//! from the datastore and runs budgeted gradient computations.

use std::collections::VecDeque;
use std::sync::mpsc as std_mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use gradloom_core::datastore::{read_shard, DatumId};
use gradloom_core::nn::{Hyperparams, Network, Params, Tensor};
use gradloom_core::protocol::{
    decode, Envelope, Message, PredictInput, Sender, WireParams, WorkerMode, DEFAULT_MAX_FRAME, PROTOCOL_VERSION,
};
use gradloom_core::worker::{evaluate, predict, train_budget, WorkerCache};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::protocol::WebSocketConfig;
use tokio_tungstenite::tungstenite::Message as WsMessage;

use crate::client::Client;
use crate::NodeError;

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    /// WebSocket URL of the coordinator, e.g. `ws://127.0.0.1:8600/ws`.
    pub coordinator_url: String,
    pub datastore_url: Option<String>,
    pub project_id: String,
    pub worker_id: String,
    pub mode: WorkerMode,
    pub capacity: u64,
    /// Ids per shard request.
    pub fetch_batch: usize,
    /// Held-out set evaluated by trackers after every parameter broadcast.
    pub test_set: Vec<(String, Tensor<f64>)>,
    /// Inputs classified by predictors after every parameter broadcast.
    pub inputs: Vec<(String, Tensor<f64>)>,
    pub seed: u64,
    pub max_frame: usize,
    pub connect_attempts: u32,
}

impl WorkerOptions {
    pub fn new(coordinator_url: impl Into<String>, project_id: impl Into<String>, worker_id: impl Into<String>) -> Self {
        Self {
            coordinator_url: coordinator_url.into(),
            datastore_url: None,
            project_id: project_id.into(),
            worker_id: worker_id.into(),
            mode: WorkerMode::Train,
            capacity: 3000,
            fetch_batch: 256,
            test_set: Vec::new(),
            inputs: Vec::new(),
            seed: 0,
            max_frame: DEFAULT_MAX_FRAME,
            connect_attempts: 5,
        }
    }
}

/// Things a running worker has observed, readable from outside.
#[derive(Debug, Clone, Default)]
pub struct WorkerStatus {
    pub params_version: u64,
    pub iteration: u64,
    pub cached: usize,
    pub reports_sent: u64,
    pub shard_requests: u64,
    /// `(iteration, error_rate)` per evaluation, trackers only.
    pub test_errors: Vec<(u64, f64)>,
    /// `(name, label, probability)` from the latest pass, predictors only.
    pub predictions: Vec<(String, String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkerExit {
    /// The coordinator said goodbye.
    Bye(String),
    /// The connection dropped without a goodbye.
    Disconnected,
}

enum Outbound {
    Send(Message),
    Fatal(String),
}

/// Connects, joins and serves until the coordinator disconnects.
pub async fn run_worker(options: WorkerOptions, status: Arc<Mutex<WorkerStatus>>) -> Result<WorkerExit, NodeError> {
    let config = WebSocketConfig::default()
        .max_message_size(Some(options.max_frame))
        .max_frame_size(Some(options.max_frame));
    let mut delay = Duration::from_millis(200);
    let mut attempt = 0;
    let (ws, _) = loop {
        attempt += 1;
        match tokio_tungstenite::connect_async_with_config(options.coordinator_url.as_str(), Some(config), false).await {
            Ok(ok) => break ok,
            Err(e) if attempt < options.connect_attempts.max(1) => {
                tracing::warn!(attempt, "connect to {} failed: {e}; retrying", options.coordinator_url);
                tokio::time::sleep(delay).await;
                delay = (delay * 2).min(Duration::from_secs(5));
            }
            Err(e) => return Err(NodeError::Connect(format!("{}: {e}", options.coordinator_url))),
        }
    };
    let (mut sink, mut stream) = ws.split();
    let mut sender = Sender::new(options.project_id.clone(), options.worker_id.clone());
    let join = sender.wrap(Message::Join {
        worker_id: options.worker_id.clone(),
        mode: options.mode,
        capacity: options.capacity,
        protocol_version: PROTOCOL_VERSION,
    });
    send(&mut sink, &join).await?;

    let (to_compute, from_control) = std_mpsc::channel::<Message>();
    let (to_control, mut from_compute) = mpsc::unbounded_channel::<Outbound>();
    let compute = {
        let options = options.clone();
        let status = status.clone();
        std::thread::Builder::new()
            .name(format!("compute-{}", options.worker_id))
            .spawn(move || Compute::new(options, status, to_control).run(from_control))
            .map_err(|e| NodeError::Startup(e.to_string()))?
    };

    let exit = loop {
        tokio::select! {
            frame = stream.next() => {
                let frame = match frame {
                    Some(Ok(f)) => f,
                    Some(Err(e)) => {
                        tracing::warn!("connection error: {e}");
                        break WorkerExit::Disconnected;
                    }
                    None => break WorkerExit::Disconnected,
                };
                let bytes: &[u8] = match &frame {
                    WsMessage::Text(t) => t.as_bytes(),
                    WsMessage::Binary(b) => b,
                    WsMessage::Close(_) => break WorkerExit::Disconnected,
                    _ => continue,
                };
                let env: Envelope = match decode(bytes, options.max_frame) {
                    Ok(env) => env,
                    Err(e) => {
                        tracing::warn!("dropping malformed frame: {e}");
                        continue;
                    }
                };
                match env.message {
                    Message::Ping { sent_at_ms } => {
                        send(&mut sink, &sender.wrap(Message::Pong { sent_at_ms })).await?;
                    }
                    Message::Bye { reason } => {
                        tracing::info!("coordinator said bye: {reason}");
                        break WorkerExit::Bye(reason);
                    }
                    other => {
                        if to_compute.send(other).is_err() {
                            break WorkerExit::Disconnected;
                        }
                    }
                }
            }
            out = from_compute.recv() => match out {
                Some(Outbound::Send(message)) => send(&mut sink, &sender.wrap(message)).await?,
                Some(Outbound::Fatal(reason)) => {
                    let _ = send(&mut sink, &sender.wrap(Message::Bye { reason: reason.clone() })).await;
                    break WorkerExit::Bye(reason);
                }
                None => break WorkerExit::Disconnected,
            },
        }
    };
    drop(to_compute);
    let _ = sink.close().await;
    let _ = tokio::task::spawn_blocking(move || compute.join()).await;
    Ok(exit)
}

async fn send<S>(sink: &mut S, env: &Envelope) -> Result<(), NodeError>
where
    S: futures::Sink<WsMessage> + Unpin,
    S::Error: std::fmt::Display,
{
    let text = serde_json::to_string(env).expect("envelope serialises");
    sink.send(WsMessage::Text(text.into()))
        .await
        .map_err(|e| NodeError::Connect(e.to_string()))
}

struct Model {
    network: Network,
    params: Params<f64>,
}

struct Compute {
    options: WorkerOptions,
    status: Arc<Mutex<WorkerStatus>>,
    out: mpsc::UnboundedSender<Outbound>,
    datastore: Option<Client>,
    cache: WorkerCache,
    model: Option<Model>,
    hyper: Hyperparams,
    rng: ChaCha8Rng,
    pending: VecDeque<Message>,
}

impl Compute {
    fn new(options: WorkerOptions, status: Arc<Mutex<WorkerStatus>>, out: mpsc::UnboundedSender<Outbound>) -> Self {
        let datastore = options.datastore_url.as_deref().map(Client::new);
        let rng = ChaCha8Rng::seed_from_u64(options.seed);
        Self {
            options,
            status,
            out,
            datastore,
            cache: WorkerCache::new(),
            model: None,
            hyper: Hyperparams::default(),
            rng,
            pending: VecDeque::new(),
        }
    }

    fn send(&self, message: Message) {
        let _ = self.out.send(Outbound::Send(message));
    }

    fn status(&self) -> std::sync::MutexGuard<'_, WorkerStatus> {
        self.status.lock().expect("status lock")
    }

    fn run(mut self, rx: std_mpsc::Receiver<Message>) {
        loop {
            let message = match self.pending.pop_front() {
                Some(m) => m,
                None => match rx.recv() {
                    Ok(m) => m,
                    Err(_) => return,
                },
            };
            self.pending.extend(rx.try_iter());
            if let Err(reason) = self.handle(message) {
                tracing::error!("{reason}");
                let _ = self.out.send(Outbound::Fatal(reason));
                return;
            }
        }
    }

    fn superseded(&self, kind: &str) -> bool {
        self.pending.iter().any(|m| m.kind() == kind)
    }

    fn set_params(&mut self, params: WireParams, spec: Option<gradloom_core::nn::NetworkSpec>) -> Result<(), String> {
        if let Some(spec) = spec {
            let network = Network::new(spec).map_err(|e| format!("bad network spec: {e}"))?;
            self.model = Some(Model {
                network,
                params: Params::from(params),
            });
        } else {
            let model = self.model.as_mut().ok_or("parameters arrived before welcome")?;
            model.params = Params::from(params);
        }
        let model = self.model.as_ref().expect("set above");
        model
            .network
            .check_params(&model.params.layers)
            .map_err(|e| format!("parameters do not fit the network: {e}"))?;
        self.status().params_version = model.params.version;
        Ok(())
    }

    fn handle(&mut self, message: Message) -> Result<(), String> {
        match message {
            Message::Welcome {
                project_id,
                protocol_version,
                spec,
                hyper,
                params,
                iteration,
            } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(format!("coordinator speaks protocol {protocol_version}"));
                }
                tracing::info!(project = %project_id, iteration, "welcome");
                self.hyper = hyper;
                self.set_params(params, Some(spec))?;
                self.status().iteration = iteration;
                if self.options.mode != WorkerMode::Train {
                    self.observe(iteration);
                }
            }
            Message::AllocationUpdate { add_ids, remove_ids } => {
                let mut add = add_ids;
                let mut remove = remove_ids;
                while let Some(Message::AllocationUpdate { .. }) = self.pending.front() {
                    if let Some(Message::AllocationUpdate { add_ids, remove_ids }) = self.pending.pop_front() {
                        remove.retain(|id| !add_ids.contains(id));
                        add.retain(|id| !remove_ids.contains(id));
                        add.extend(add_ids);
                        remove.extend(remove_ids);
                    }
                }
                self.cache.apply_update(&add, &remove);
                self.sync_cache();
            }
            Message::WorkOrder {
                params,
                budget,
                deadline_hint_ms: _,
                spec,
            } => {
                self.set_params(params, spec)?;
                if self.superseded("work_order") {
                    return Ok(());
                }
                let model = self.model.as_ref().expect("set_params succeeded");
                let bundle = train_budget(
                    &model.network,
                    &model.params,
                    &mut self.cache,
                    budget,
                    self.hyper.dropout_p,
                    &mut self.rng,
                )
                .map_err(|e| format!("gradient computation failed: {e}"))?;
                tracing::debug!(version = bundle.params_version, examples = bundle.example_count, "report");
                self.send(Message::GradientReport {
                    bundle: (&bundle).into(),
                });
                self.status().reports_sent += 1;
            }
            Message::ParamBroadcast {
                params,
                iteration,
                spec,
            } => {
                self.set_params(params, spec)?;
                self.status().iteration = iteration;
                if !self.superseded("param_broadcast") {
                    self.observe(iteration);
                }
            }
            Message::HyperUpdate { hyper } => self.hyper = hyper,
            Message::PredictRequest { request_id, input } => {
                let Some(model) = self.model.as_ref() else {
                    return Ok(());
                };
                let x = match input {
                    PredictInput::Tensor(t) => Ok(t),
                    PredictInput::Png(b64) => {
                        use base64::Engine;
                        base64::engine::general_purpose::STANDARD
                            .decode(b64)
                            .map_err(|e| e.to_string())
                            .and_then(|b| {
                                gradloom_core::datastore::decode_item(&b, gradloom_core::datastore::ItemFormat::Png)
                                    .map_err(|e| e.to_string())
                            })
                    }
                };
                match x.and_then(|x| predict(&model.network, &model.params, &x).map_err(|e| e.to_string())) {
                    Ok((label, probability)) => self.send(Message::PredictResponse {
                        request_id,
                        label,
                        probability,
                    }),
                    Err(e) => tracing::warn!(request_id, "prediction failed: {e}"),
                }
            }
            Message::ModelSnapshot { archive } => {
                tracing::info!(iteration = archive.iteration, "received model snapshot");
            }
            other => tracing::debug!(kind = other.kind(), "ignored"),
        }
        Ok(())
    }

    /// Tracker evaluation or predictor pass over the latest model.
    fn observe(&mut self, iteration: u64) {
        let Some(model) = self.model.as_ref() else {
            return;
        };
        match self.options.mode {
            WorkerMode::Track if !self.options.test_set.is_empty() => {
                let examples = self.options.test_set.iter().map(|(l, x)| (l.as_str(), x));
                match evaluate(&model.network, &model.params, examples) {
                    Ok(eval) => {
                        let rate = eval.error_rate();
                        tracing::info!(iteration, test_error = rate, "evaluated");
                        self.status().test_errors.push((iteration, rate));
                        self.send(Message::StatsReport {
                            iteration,
                            metric_name: "test_error".into(),
                            value: rate,
                        });
                    }
                    Err(e) => tracing::warn!("evaluation failed: {e}"),
                }
            }
            WorkerMode::Predict if !self.options.inputs.is_empty() => {
                let mut out = Vec::new();
                for (name, x) in &self.options.inputs {
                    match predict(&model.network, &model.params, x) {
                        Ok((label, p)) => out.push((name.clone(), label, p)),
                        Err(e) => tracing::warn!(input = %name, "prediction failed: {e}"),
                    }
                }
                self.status().predictions = out;
            }
            _ => {}
        }
    }

    /// Fetches missing allocated ids in batches and reports the result.
    fn sync_cache(&mut self) {
        let missing = self.cache.missing();
        let mut failed: Vec<DatumId> = Vec::new();
        if !missing.is_empty() {
            match &self.datastore {
                None => {
                    tracing::warn!(count = missing.len(), "no datastore configured; cannot fetch data");
                    failed = missing;
                }
                Some(client) => {
                    let batch = self.options.fetch_batch.max(1);
                    let mut by_dataset: std::collections::BTreeMap<&str, Vec<u32>> = Default::default();
                    for id in &missing {
                        by_dataset.entry(id.dataset()).or_default().push(id.index());
                    }
                    for (dataset, ids) in by_dataset {
                        for chunk in ids.chunks(batch) {
                            self.status.lock().expect("status lock").shard_requests += 1;
                            let items = client
                                .shard(dataset, chunk)
                                .map_err(|e| e.to_string())
                                .and_then(|zip| read_shard(&zip).map_err(|e| e.to_string()));
                            match items {
                                Ok(items) => {
                                    let returned: std::collections::BTreeSet<u32> = items.iter().map(|i| i.id).collect();
                                    failed.extend(self.cache.insert_shard(dataset, items));
                                    failed.extend(
                                        chunk
                                            .iter()
                                            .filter(|i| !returned.contains(i))
                                            .map(|&i| DatumId::new(dataset, i)),
                                    );
                                }
                                Err(e) => {
                                    tracing::warn!(dataset, count = chunk.len(), "shard fetch failed: {e}");
                                    failed.extend(chunk.iter().map(|&i| DatumId::new(dataset, i)));
                                }
                            }
                        }
                    }
                }
            }
        }
        self.cache.apply_update(&[], &failed);
        self.status().cached = self.cache.len();
        tracing::info!(cached = self.cache.len(), missing = failed.len(), "cache synchronised");
        self.send(Message::CacheStatus {
            cached: self.cache.len() as u64,
            complete: self.cache.is_complete(),
            missing_ids: failed,
        });
    }
}

/// A worker running on the current tokio runtime.
pub struct WorkerHandle {
    status: Arc<Mutex<WorkerStatus>>,
    task: tokio::task::JoinHandle<Result<WorkerExit, NodeError>>,
}

impl WorkerHandle {
    pub fn spawn(options: WorkerOptions) -> Self {
        let status = Arc::new(Mutex::new(WorkerStatus::default()));
        let task = tokio::spawn(run_worker(options, status.clone()));
        Self { status, task }
    }

    pub fn status(&self) -> WorkerStatus {
        self.status.lock().expect("status lock").clone()
    }

    /// Drops the connection without a goodbye, as a crash would.
    pub fn kill(&self) {
        self.task.abort();
    }

    pub fn is_finished(&self) -> bool {
        self.task.is_finished()
    }

    pub async fn wait(self) -> Result<WorkerExit, NodeError> {
        match self.task.await {
            Ok(r) => r,
            Err(e) if e.is_cancelled() => Ok(WorkerExit::Disconnected),
            Err(e) => Err(NodeError::Startup(e.to_string())),
        }
    }
}
