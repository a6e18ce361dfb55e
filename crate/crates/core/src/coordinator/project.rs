use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::allocation::{AllocationChanges, DataIndexTable, DuplicateIds, WorkerId};
use crate::coordinator::latency::{budget_for, BudgetMode, LatencyEstimator};
use crate::coordinator::reduce::reduce;
use crate::datastore::{DatasetManifest, DatumId};
use crate::nn::{
    adagrad_update, add_output_class, AdaGradState, GradientBundle, Hyperparams, ModelArchive,
    Network, NetworkSpec, NnError, Params,
};
use crate::protocol::{
    Budget, IterationRecord, Message, MetricSample, WireParams, WorkerMode, WorkerTelemetry,
    PROTOCOL_VERSION,
};

fn default_cap() -> u64 {
    3000
}

fn default_margin() -> u64 {
    100
}

fn default_mode() -> BudgetMode {
    BudgetMode::TimeBudget
}

fn default_min_trainers() -> usize {
    1
}

/// Settings of one training project.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub project_id: String,
    /// Required unless `resume_from` is given.
    #[serde(default)]
    pub spec: Option<NetworkSpec>,
    #[serde(default)]
    pub hyper: Option<Hyperparams>,
    /// Iteration period in seconds, within `[1, 30]`.
    #[serde(rename = "T_seconds")]
    pub period_s: f64,
    #[serde(default = "default_cap")]
    pub per_worker_cap: u64,
    #[serde(default = "default_mode")]
    pub mode: BudgetMode,
    #[serde(default)]
    pub step_budget_steps: Option<u64>,
    #[serde(default = "default_margin")]
    pub reduce_margin_ms: u64,
    #[serde(default = "default_margin")]
    pub min_budget_ms: u64,
    /// Parameter initialisation seed.
    #[serde(default)]
    pub seed: u64,
    /// Work orders go out only once this many trainers are cache-ready.
    #[serde(default = "default_min_trainers")]
    pub min_trainers: usize,
    /// Periodic rotation of worker allocations. Not supported; must be false.
    #[serde(default)]
    pub data_refresh: bool,
    /// Archive to continue from; its spec, hyperparameters, parameters,
    /// accumulators, iteration and seed replace the fields above.
    #[serde(default)]
    pub resume_from: Option<Box<ModelArchive>>,
}

impl ProjectConfig {
    pub fn new(project_id: impl Into<String>, spec: NetworkSpec, period_s: f64) -> Self {
        Self {
            project_id: project_id.into(),
            spec: Some(spec),
            hyper: None,
            period_s,
            per_worker_cap: default_cap(),
            mode: BudgetMode::TimeBudget,
            step_budget_steps: None,
            reduce_margin_ms: default_margin(),
            min_budget_ms: default_margin(),
            seed: 0,
            min_trainers: 1,
            data_refresh: false,
            resume_from: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProjectError> {
        let bad = |field: &'static str, reason: String| Err(ProjectError::Config { field, reason });
        if self.project_id.is_empty()
            || !self
                .project_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return bad("project_id", format!("{:?} must be non-empty [A-Za-z0-9_-]", self.project_id));
        }
        if !(self.period_s.is_finite() && (1.0..=30.0).contains(&self.period_s)) {
            return bad("T_seconds", format!("{} is outside [1, 30]", self.period_s));
        }
        if self.per_worker_cap == 0 {
            return bad("per_worker_cap", "must be positive".into());
        }
        if self.mode == BudgetMode::StepBudget && self.step_budget_steps.unwrap_or(0) == 0 {
            return bad("step_budget_steps", "step mode needs a positive step count".into());
        }
        if self.data_refresh {
            return bad("data_refresh", "allocation rotation is not implemented".into());
        }
        if self.spec.is_none() && self.resume_from.is_none() {
            return bad("spec", "either spec or resume_from is required".into());
        }
        if let Some(h) = &self.hyper {
            h.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("invalid config field {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("worker {0:?} is already connected")]
    DuplicateWorker(String),
    #[error("unknown worker {0:?}")]
    UnknownWorker(String),
    #[error("dataset {0:?} is already registered")]
    DuplicateDataset(String),
    #[error(transparent)]
    DuplicateIds(#[from] DuplicateIds),
    #[error("bad manifest: {0}")]
    Manifest(String),
}

/// Coordinator-side view of one connected worker.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerRecord {
    pub worker_id: WorkerId,
    pub mode: WorkerMode,
    pub capacity: u64,
    pub latency: LatencyEstimator,
    pub last_budget: Option<Budget>,
    pub cache_ready: bool,
    pub paused: bool,
    pub last_report_iteration: Option<u64>,
    pub last_example_count: u64,
    spec_revision: u64,
}

/// A message for one worker.
#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing {
    pub to: WorkerId,
    pub message: Message,
}

/// What became of a gradient report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportOutcome {
    Accepted,
    /// Wrong parameter version or no order outstanding; counted in telemetry.
    Stale,
    /// Layout does not match the network.
    Rejected,
}

/// Output of one iteration boundary.
#[derive(Clone, Debug, Default)]
pub struct Boundary {
    /// Present when a window of outstanding work orders was closed.
    pub record: Option<IterationRecord>,
    pub outgoing: Vec<Outgoing>,
}

/// Short description for listings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub project_id: String,
    pub iteration: u64,
    pub params_version: u64,
    pub period_s: f64,
    pub mode: BudgetMode,
    pub labels: Vec<String>,
    pub datasets: Vec<String>,
    pub data_vectors: u64,
    pub workers: u64,
    pub trainers: u64,
}

#[derive(Clone, Debug)]
struct Window {
    started_ms: f64,
    version: u64,
    awaiting: BTreeSet<WorkerId>,
    reports: BTreeMap<WorkerId, GradientBundle<f64>>,
    round_trips: BTreeMap<WorkerId, (f64, f64)>,
}

#[derive(Clone, Debug)]
struct PendingJoin {
    worker_id: WorkerId,
    mode: WorkerMode,
    capacity: u64,
}

/// State of one project, advanced by explicit events and
/// [`Project::run_boundary`] calls.
///
/// The caller owns the clock: every time-dependent method takes a
/// monotonic `now_ms`.
#[derive(Debug)]
pub struct Project {
    config: ProjectConfig,
    hyper: Hyperparams,
    network: Network,
    params: Params<f64>,
    adagrad: AdaGradState<f64>,
    seed: u64,
    iteration: u64,
    spec_revision: u64,
    table: DataIndexTable,
    datasets: BTreeSet<String>,
    workers: BTreeMap<WorkerId, WorkerRecord>,
    pending_joins: Vec<PendingJoin>,
    pending_hyper: Option<Hyperparams>,
    pending_labels: BTreeSet<String>,
    window: Option<Window>,
    stale_discarded: u64,
    metrics: Vec<MetricSample>,
    last_boundary_ms: Option<f64>,
}

impl Project {
    pub fn new(mut config: ProjectConfig) -> Result<Self, ProjectError> {
        config.validate()?;
        let (network, params, adagrad, hyper, iteration, seed) = match config.resume_from.take() {
            Some(archive) => {
                let network = archive.validate()?;
                let archive = *archive;
                (
                    network,
                    archive.params,
                    archive.adagrad,
                    archive.hyper,
                    archive.iteration,
                    archive.seed,
                )
            }
            None => {
                let spec = config.spec.clone().expect("validated");
                let (network, params, adagrad) = crate::nn::build_network(spec, config.seed)?;
                let hyper = config.hyper.clone().unwrap_or_default();
                (network, params, adagrad, hyper, 0, config.seed)
            }
        };
        hyper.validate()?;
        config.spec = Some(network.spec().clone());
        config.hyper = Some(hyper.clone());
        config.seed = seed;
        Ok(Self {
            config,
            hyper,
            network,
            params,
            adagrad,
            seed,
            iteration,
            spec_revision: 0,
            table: DataIndexTable::new(),
            datasets: BTreeSet::new(),
            workers: BTreeMap::new(),
            pending_joins: Vec::new(),
            pending_hyper: None,
            pending_labels: BTreeSet::new(),
            window: None,
            stale_discarded: 0,
            metrics: Vec::new(),
            last_boundary_ms: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.config.project_id
    }

    pub fn config(&self) -> &ProjectConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn params(&self) -> &Params<f64> {
        &self.params
    }

    pub fn adagrad(&self) -> &AdaGradState<f64> {
        &self.adagrad
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn period_s(&self) -> f64 {
        self.config.period_s
    }

    pub fn table(&self) -> &DataIndexTable {
        &self.table
    }

    pub fn workers(&self) -> &BTreeMap<WorkerId, WorkerRecord> {
        &self.workers
    }

    pub fn is_known_worker(&self, worker: &str) -> bool {
        self.workers.contains_key(worker) || self.pending_joins.iter().any(|j| j.worker_id == worker)
    }

    /// Archive of the latest reduced parameters.
    pub fn snapshot(&self) -> ModelArchive {
        ModelArchive::new(
            &self.network,
            self.params.clone(),
            self.adagrad.clone(),
            self.hyper.clone(),
            self.iteration,
            self.seed,
        )
    }

    pub fn summary(&self) -> ProjectSummary {
        ProjectSummary {
            project_id: self.config.project_id.clone(),
            iteration: self.iteration,
            params_version: self.params.version,
            period_s: self.config.period_s,
            mode: self.config.mode,
            labels: self.network.labels().to_vec(),
            datasets: self.datasets.iter().cloned().collect(),
            data_vectors: self.table.len() as u64,
            workers: self.workers.len() as u64,
            trainers: self.trainer_count() as u64,
        }
    }

    fn trainer_count(&self) -> usize {
        self.workers
            .values()
            .filter(|w| w.mode == WorkerMode::Train)
            .count()
    }

    /// Queues a worker; it is welcomed and provisioned at the next boundary.
    pub fn join(&mut self, worker_id: &str, mode: WorkerMode, capacity: u64) -> Result<(), ProjectError> {
        if self.is_known_worker(worker_id) {
            return Err(ProjectError::DuplicateWorker(worker_id.to_string()));
        }
        self.pending_joins.push(PendingJoin {
            worker_id: worker_id.to_string(),
            mode,
            capacity,
        });
        Ok(())
    }

    /// Drops a worker: pending report discarded, allocation redistributed.
    pub fn worker_lost(&mut self, worker_id: &str) -> Vec<Outgoing> {
        self.pending_joins.retain(|j| j.worker_id != worker_id);
        if self.workers.remove(worker_id).is_none() {
            return Vec::new();
        }
        if let Some(w) = self.window.as_mut() {
            w.awaiting.remove(worker_id);
            w.reports.remove(worker_id);
            w.round_trips.remove(worker_id);
        }
        let changes = self.table.remove_worker(worker_id);
        let mut out = Vec::new();
        self.push_changes(changes, &mut out);
        out
    }

    /// Adds a dataset's ids to the unallocated pool. New labels grow the
    /// output layer at the next boundary.
    pub fn register_dataset(&mut self, manifest: &DatasetManifest) -> Result<usize, ProjectError> {
        manifest
            .validate()
            .map_err(|e| ProjectError::Manifest(e.to_string()))?;
        if self.datasets.contains(&manifest.dataset_id) {
            return Err(ProjectError::DuplicateDataset(manifest.dataset_id.clone()));
        }
        let n = self.table.register(manifest)?;
        self.datasets.insert(manifest.dataset_id.clone());
        for label in &manifest.label_set {
            if !self.network.labels().contains(label) {
                self.pending_labels.insert(label.clone());
            }
        }
        Ok(n)
    }

    /// Stages new hyperparameters; they take effect at the next reduce.
    pub fn set_hyper(&mut self, hyper: Hyperparams) -> Result<(), ProjectError> {
        hyper.validate()?;
        self.pending_hyper = Some(hyper);
        Ok(())
    }

    pub fn set_period(&mut self, period_s: f64) -> Result<(), ProjectError> {
        if !(period_s.is_finite() && (1.0..=30.0).contains(&period_s)) {
            return Err(ProjectError::Config {
                field: "T_seconds",
                reason: format!("{period_s} is outside [1, 30]"),
            });
        }
        self.config.period_s = period_s;
        Ok(())
    }

    pub fn set_paused(&mut self, worker_id: &str, paused: bool) -> Result<(), ProjectError> {
        let rec = self
            .workers
            .get_mut(worker_id)
            .ok_or_else(|| ProjectError::UnknownWorker(worker_id.to_string()))?;
        rec.paused = paused;
        Ok(())
    }

    /// Handles a cache progress message. Ids the worker could not fetch go
    /// back to the pool. Returns allocation updates caused by the release.
    pub fn cache_status(&mut self, worker_id: &str, complete: bool, missing: &[DatumId]) -> Vec<Outgoing> {
        let mut out = Vec::new();
        if !self.workers.contains_key(worker_id) {
            return out;
        }
        if !missing.is_empty() {
            let changes = self.table.release(worker_id, missing);
            self.push_changes(changes, &mut out);
        }
        if complete {
            let ids: Vec<DatumId> = self
                .table
                .allocation(worker_id)
                .map(|s| s.iter().cloned().collect())
                .unwrap_or_default();
            self.table.mark_cached(worker_id, &ids);
            self.workers.get_mut(worker_id).expect("checked").cache_ready = true;
        }
        out
    }

    /// Accepts a gradient report if it answers an outstanding order for the
    /// current parameter version.
    pub fn gradient_report(
        &mut self,
        worker_id: &str,
        bundle: GradientBundle<f64>,
        now_ms: f64,
    ) -> ReportOutcome {
        let current = self.params.version;
        let Some(w) = self.window.as_mut() else {
            self.stale_discarded += 1;
            return ReportOutcome::Stale;
        };
        if bundle.params_version != current
            || bundle.params_version != w.version
            || !w.awaiting.contains(worker_id)
        {
            self.stale_discarded += 1;
            return ReportOutcome::Stale;
        }
        if self.network.check_params(&bundle.grads).is_err() {
            return ReportOutcome::Rejected;
        }
        w.awaiting.remove(worker_id);
        w.round_trips
            .insert(worker_id.to_string(), (now_ms - w.started_ms, bundle.compute_ms));
        if let Some(rec) = self.workers.get_mut(worker_id) {
            rec.last_report_iteration = Some(self.iteration + 1);
            rec.last_example_count = bundle.example_count;
        }
        w.reports.insert(worker_id.to_string(), bundle);
        ReportOutcome::Accepted
    }

    /// Latency sample from a ping while the worker has no order outstanding.
    pub fn pong(&mut self, worker_id: &str, rtt_ms: f64) {
        let busy = self
            .window
            .as_ref()
            .is_some_and(|w| w.awaiting.contains(worker_id));
        if let (false, Some(rec)) = (busy, self.workers.get_mut(worker_id)) {
            rec.latency.observe(rtt_ms, 0.0);
        }
    }

    pub fn record_metric(&mut self, worker_id: &str, iteration: u64, name: &str, value: f64) {
        self.metrics.push(MetricSample {
            worker_id: worker_id.to_string(),
            iteration,
            metric_name: name.to_string(),
            value,
        });
    }

    /// Nothing to do until a trainer or a joiner shows up.
    pub fn is_idle(&self) -> bool {
        self.pending_joins.is_empty() && self.window.is_none() && self.trainer_count() == 0
    }

    fn straggler_deadline_ms(&self, w: &Window) -> f64 {
        let max_latency = w
            .awaiting
            .iter()
            .filter_map(|id| self.workers.get(id))
            .map(|r| r.latency.ewma_ms())
            .fold(0.0, f64::max);
        w.started_ms + self.config.period_s * 1000.0 + 2.0 * max_latency + 1000.0
    }

    /// Earliest time at which [`Project::due`] can become true without a
    /// new event, or `None` when idle.
    pub fn next_deadline_ms(&self) -> Option<f64> {
        if self.is_idle() {
            return None;
        }
        let Some(last) = self.last_boundary_ms else {
            return Some(f64::NEG_INFINITY);
        };
        let period_end = last + self.config.period_s * 1000.0;
        Some(match &self.window {
            Some(w) if !w.awaiting.is_empty() => self.straggler_deadline_ms(w),
            _ => period_end,
        })
    }

    /// Whether a boundary should run now: the period has elapsed and every
    /// outstanding order was answered, or the straggler timeout passed.
    pub fn due(&self, now_ms: f64) -> bool {
        if self.is_idle() {
            return false;
        }
        let Some(last) = self.last_boundary_ms else {
            return true;
        };
        if now_ms < last + self.config.period_s * 1000.0 {
            return false;
        }
        match &self.window {
            Some(w) if !w.awaiting.is_empty() => now_ms >= self.straggler_deadline_ms(w),
            _ => true,
        }
    }

    fn push_changes(&self, changes: AllocationChanges, out: &mut Vec<Outgoing>) {
        for (worker, delta) in changes {
            if delta.is_empty() || !self.workers.contains_key(&worker) {
                continue;
            }
            out.push(Outgoing {
                to: worker,
                message: Message::AllocationUpdate {
                    add_ids: delta.add,
                    remove_ids: delta.remove,
                },
            });
        }
    }

    fn spec_for(&self, worker: &str) -> Option<NetworkSpec> {
        let rec = self.workers.get(worker)?;
        (rec.spec_revision != self.spec_revision).then(|| self.network.spec().clone())
    }

    /// Runs one iteration boundary: (a) allocate newly registered data,
    /// (b) welcome and provision joiners, (c) reduce the closing window and
    /// step the parameters, (d) update latencies and budgets, (e) send work
    /// orders and parameter broadcasts.
    pub fn run_boundary(&mut self, now_ms: f64) -> Boundary {
        let mut out = Vec::new();

        // (a)
        let changes = self.table.allocate_unallocated();
        self.push_changes(changes, &mut out);

        // (b)
        for join in std::mem::take(&mut self.pending_joins) {
            out.push(Outgoing {
                to: join.worker_id.clone(),
                message: Message::Welcome {
                    project_id: self.config.project_id.clone(),
                    protocol_version: PROTOCOL_VERSION,
                    spec: self.network.spec().clone(),
                    hyper: self.hyper.clone(),
                    params: WireParams::from(&self.params),
                    iteration: self.iteration,
                },
            });
            self.workers.insert(
                join.worker_id.clone(),
                WorkerRecord {
                    worker_id: join.worker_id.clone(),
                    mode: join.mode,
                    capacity: join.capacity,
                    latency: LatencyEstimator::default(),
                    last_budget: None,
                    cache_ready: false,
                    paused: false,
                    last_report_iteration: None,
                    last_example_count: 0,
                    spec_revision: self.spec_revision,
                },
            );
            if join.mode == WorkerMode::Train {
                let limit = join.capacity.min(self.config.per_worker_cap) as usize;
                let changes = self.table.join(&join.worker_id, limit);
                self.push_changes(changes, &mut out);
            }
        }

        // (c)
        let mut hyper_changed = false;
        let mut record = None;
        if let Some(window) = self.window.take() {
            if let Some(h) = self.pending_hyper.take() {
                hyper_changed = h != self.hyper;
                self.hyper = h;
                self.config.hyper = Some(self.hyper.clone());
            }
            let reports_received = window.reports.len() as u64;
            let mut total_examples = 0;
            let mut stalled = reports_received == 0;
            match reduce(&window.reports) {
                Ok(Some((avg, n))) => {
                    total_examples = n;
                    if let Err(e) = adagrad_update(&mut self.params, &mut self.adagrad, &avg, &self.hyper) {
                        tracing::error!(project = %self.config.project_id, "update rejected: {e}");
                        self.params.version += 1;
                        stalled = true;
                    }
                }
                Ok(None) => self.params.version += 1,
                Err(e) => {
                    tracing::error!(project = %self.config.project_id, "reduce failed: {e}");
                    self.params.version += 1;
                    stalled = true;
                }
            }
            if stalled {
                tracing::warn!(project = %self.config.project_id, version = self.params.version, "stalled iteration");
            }
            self.iteration += 1;

            // (d)
            for (worker, (rtt, compute)) in &window.round_trips {
                if let Some(rec) = self.workers.get_mut(worker) {
                    rec.latency.observe(*rtt, *compute);
                }
            }

            let wall_ms = now_ms - window.started_ms;
            record = Some(IterationRecord {
                iteration: self.iteration,
                params_version: self.params.version,
                reports_received,
                total_examples,
                wall_ms,
                power: if wall_ms > 0.0 {
                    total_examples as f64 / (wall_ms / 1000.0)
                } else {
                    0.0
                },
                stale_discarded: std::mem::take(&mut self.stale_discarded),
                stalled,
                hyper: self.hyper.clone(),
                period_s: self.config.period_s,
                allocated: 0,
                unallocated: 0,
                workers: Vec::new(),
                metrics: std::mem::take(&mut self.metrics),
            });
        }

        for label in std::mem::take(&mut self.pending_labels) {
            match add_output_class(&mut self.network, &mut self.params, &mut self.adagrad, &label) {
                Ok(true) => self.spec_revision += 1,
                Ok(false) => {}
                Err(e) => tracing::error!(project = %self.config.project_id, "adding class {label:?}: {e}"),
            }
        }
        self.config.spec = Some(self.network.spec().clone());

        // (e)
        let eligible: Vec<WorkerId> = self
            .workers
            .values()
            .filter(|w| w.mode == WorkerMode::Train && w.cache_ready && !w.paused)
            .map(|w| w.worker_id.clone())
            .collect();
        let wire = WireParams::from(&self.params);
        if !eligible.is_empty() && eligible.len() >= self.config.min_trainers {
            for id in &eligible {
                let ewma = self.workers[id].latency.ewma_ms();
                let budget = budget_for(
                    self.config.mode,
                    self.config.period_s,
                    ewma,
                    self.config.reduce_margin_ms,
                    self.config.min_budget_ms,
                    self.config.step_budget_steps.unwrap_or(0),
                );
                if hyper_changed {
                    out.push(Outgoing {
                        to: id.clone(),
                        message: Message::HyperUpdate {
                            hyper: self.hyper.clone(),
                        },
                    });
                }
                let spec = self.spec_for(id);
                let rec = self.workers.get_mut(id).expect("eligible");
                rec.last_budget = Some(budget);
                rec.spec_revision = self.spec_revision;
                out.push(Outgoing {
                    to: id.clone(),
                    message: Message::WorkOrder {
                        params: wire.clone(),
                        budget,
                        deadline_hint_ms: (self.config.period_s * 1000.0) as u64,
                        spec,
                    },
                });
            }
            self.window = Some(Window {
                started_ms: now_ms,
                version: self.params.version,
                awaiting: eligible.into_iter().collect(),
                reports: BTreeMap::new(),
                round_trips: BTreeMap::new(),
            });
        }
        if record.is_some() {
            let observers: Vec<WorkerId> = self
                .workers
                .values()
                .filter(|w| w.mode != WorkerMode::Train)
                .map(|w| w.worker_id.clone())
                .collect();
            for id in observers {
                let spec = self.spec_for(&id);
                self.workers.get_mut(&id).expect("observer").spec_revision = self.spec_revision;
                out.push(Outgoing {
                    to: id,
                    message: Message::ParamBroadcast {
                        params: wire.clone(),
                        iteration: self.iteration,
                        spec,
                    },
                });
            }
        }

        if let Some(r) = record.as_mut() {
            r.allocated = self.table.allocated_len() as u64;
            r.unallocated = self.table.unallocated_len() as u64;
            r.workers = self.worker_telemetry();
        }
        self.last_boundary_ms = Some(now_ms);
        Boundary {
            record,
            outgoing: out,
        }
    }

    pub fn worker_telemetry(&self) -> Vec<WorkerTelemetry> {
        self.workers
            .values()
            .map(|w| WorkerTelemetry {
                worker_id: w.worker_id.clone(),
                mode: w.mode,
                latency_ewma_ms: w.latency.ewma_ms(),
                budget: w.last_budget,
                example_count: w.last_example_count,
                allocated: self.table.allocation_len(&w.worker_id) as u64,
                cache_ready: w.cache_ready,
                paused: w.paused,
            })
            .collect()
    }
}
