//! Messages exchanged between the coordinator, workers and monitoring
//! clients.
//!
//! Every message travels inside an [`Envelope`] carrying the project id, the
//! sender id and a per-sender sequence number. On a WebSocket each envelope
//! is one JSON text frame; on a raw byte stream frames are length-prefixed
//! (see [`codec`]). Parameter and gradient arrays use base64 blobs of
//! little-endian `f64`s so they survive the trip bit for bit.

pub mod codec;
mod wire;

use serde::{Deserialize, Serialize};

use crate::datastore::DatumId;
use crate::nn::{Hyperparams, ModelArchive, NetworkSpec, Tensor};

pub use codec::{decode, encode, encode_frame, FrameDecoder, ProtocolError, DEFAULT_MAX_FRAME};
pub use wire::{F64Blob, WireBundle, WireLayer, WireParams, WireSet};

pub const PROTOCOL_VERSION: u32 = 1;

/// Role a worker plays after joining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerMode {
    /// Computes gradients on its allocated data.
    Train,
    /// Evaluates every broadcast model on a held-out set.
    Track,
    /// Keeps the latest model to serve predictions.
    Predict,
}

impl std::str::FromStr for WorkerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(WorkerMode::Train),
            "track" => Ok(WorkerMode::Track),
            "predict" => Ok(WorkerMode::Predict),
            other => Err(format!("unknown mode {other:?} (expected train, track or predict)")),
        }
    }
}

impl std::fmt::Display for WorkerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WorkerMode::Train => "train",
            WorkerMode::Track => "track",
            WorkerMode::Predict => "predict",
        })
    }
}

/// How long a worker computes before reporting: wall-clock or a fixed
/// number of examples. Exactly one is ever set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    BudgetMs(u64),
    Steps(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictInput {
    Tensor(Tensor<f64>),
    /// Base64 PNG bytes.
    Png(String),
}

/// Per-worker slice of an [`IterationRecord`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerTelemetry {
    pub worker_id: String,
    pub mode: WorkerMode,
    pub latency_ewma_ms: f64,
    pub budget: Option<Budget>,
    pub example_count: u64,
    pub allocated: u64,
    pub cache_ready: bool,
    pub paused: bool,
}

/// A statistic reported by a worker (e.g. a tracker's test error).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub worker_id: String,
    pub iteration: u64,
    pub metric_name: String,
    pub value: f64,
}

/// Summary of one pass of the master event loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub params_version: u64,
    pub reports_received: u64,
    pub total_examples: u64,
    pub wall_ms: f64,
    /// Examples per second over this iteration.
    pub power: f64,
    /// Reports dropped because they targeted an old parameter version.
    pub stale_discarded: u64,
    /// True when trainers were expected to report but none did.
    pub stalled: bool,
    pub hyper: Hyperparams,
    pub period_s: f64,
    pub allocated: u64,
    pub unallocated: u64,
    pub workers: Vec<WorkerTelemetry>,
    pub metrics: Vec<MetricSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Join {
        worker_id: String,
        mode: WorkerMode,
        /// Maximum number of data vectors the worker will cache.
        capacity: u64,
        protocol_version: u32,
    },
    Welcome {
        project_id: String,
        protocol_version: u32,
        spec: NetworkSpec,
        hyper: Hyperparams,
        params: WireParams,
        iteration: u64,
    },
    AllocationUpdate {
        add_ids: Vec<DatumId>,
        remove_ids: Vec<DatumId>,
    },
    /// Worker cache progress; `complete` once every allocated id is cached.
    CacheStatus {
        cached: u64,
        complete: bool,
        missing_ids: Vec<DatumId>,
    },
    WorkOrder {
        params: WireParams,
        budget: Budget,
        deadline_hint_ms: u64,
        /// Present when the network grew an output class since the
        /// recipient last saw the spec.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec: Option<NetworkSpec>,
    },
    /// Latest parameters for trackers and predictors.
    ParamBroadcast {
        params: WireParams,
        iteration: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec: Option<NetworkSpec>,
    },
    GradientReport {
        bundle: WireBundle,
    },
    StatsReport {
        iteration: u64,
        metric_name: String,
        value: f64,
    },
    HyperUpdate {
        hyper: Hyperparams,
    },
    PredictRequest {
        request_id: u64,
        input: PredictInput,
    },
    PredictResponse {
        request_id: u64,
        label: String,
        probability: f64,
    },
    SaveRequest,
    ModelSnapshot {
        archive: Box<ModelArchive>,
    },
    Telemetry {
        record: Box<IterationRecord>,
    },
    Bye {
        reason: String,
    },
    Ping {
        sent_at_ms: u64,
    },
    Pong {
        sent_at_ms: u64,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Join { .. } => "join",
            Message::Welcome { .. } => "welcome",
            Message::AllocationUpdate { .. } => "allocation_update",
            Message::CacheStatus { .. } => "cache_status",
            Message::WorkOrder { .. } => "work_order",
            Message::ParamBroadcast { .. } => "param_broadcast",
            Message::GradientReport { .. } => "gradient_report",
            Message::StatsReport { .. } => "stats_report",
            Message::HyperUpdate { .. } => "hyper_update",
            Message::PredictRequest { .. } => "predict_request",
            Message::PredictResponse { .. } => "predict_response",
            Message::SaveRequest => "save_request",
            Message::ModelSnapshot { .. } => "model_snapshot",
            Message::Telemetry { .. } => "telemetry",
            Message::Bye { .. } => "bye",
            Message::Ping { .. } => "ping",
            Message::Pong { .. } => "pong",
        }
    }
}

/// Routing header common to all messages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub project_id: String,
    pub sender_id: String,
    pub msg_seq: u64,
    pub message: Message,
}

/// Stamps outgoing messages with a strictly increasing sequence number.
#[derive(Debug, Clone)]
pub struct Sender {
    project_id: String,
    sender_id: String,
    next_seq: u64,
}

impl Sender {
    pub fn new(project_id: impl Into<String>, sender_id: impl Into<String>) -> Self {
        Self {
            project_id: project_id.into(),
            sender_id: sender_id.into(),
            next_seq: 1,
        }
    }

    pub fn set_project(&mut self, project_id: impl Into<String>) {
        self.project_id = project_id.into();
    }

    pub fn wrap(&mut self, message: Message) -> Envelope {
        let seq = self.next_seq;
        self.next_seq += 1;
        Envelope {
            project_id: self.project_id.clone(),
            sender_id: self.sender_id.clone(),
            msg_seq: seq,
            message,
        }
    }
}

/// Receive-side check that a peer's sequence numbers strictly increase.
#[derive(Debug, Default, Clone)]
pub struct SeqGuard {
    last: Option<u64>,
}

impl SeqGuard {
    pub fn accept(&mut self, env: &Envelope) -> Result<(), ProtocolError> {
        if let Some(last) = self.last {
            if env.msg_seq <= last {
                return Err(ProtocolError::OutOfOrder {
                    sender: env.sender_id.clone(),
                    last,
                    got: env.msg_seq,
                });
            }
        }
        self.last = Some(env.msg_seq);
        Ok(())
    }
}
