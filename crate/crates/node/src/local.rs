//! An in-process datastore, coordinator and set of workers on a private
//! runtime, driven through blocking calls. Used by tests and benchmarks.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use gradloom_core::coordinator::{ProjectConfig, ProjectSummary};
use gradloom_core::datastore::{DataStore, DatasetManifest};
use gradloom_core::protocol::IterationRecord;
use tokio::runtime::Runtime;

use crate::client::{Client, ClientError};
use crate::config::CoordinatorConfig;
use crate::coordinator_server::Coordinator;
use crate::datastore_server::datastore_router;
use crate::server::RunningServer;
use crate::worker_runtime::{WorkerHandle, WorkerOptions, WorkerStatus};
use crate::NodeError;

pub struct LocalCluster {
    runtime: Runtime,
    datastore: Option<RunningServer>,
    coordinator: Option<Coordinator>,
    workers: BTreeMap<String, WorkerHandle>,
    client: Client,
    datastore_client: Client,
}

impl LocalCluster {
    /// Starts a datastore rooted at `data_dir` and a coordinator with the
    /// given ping interval, both on ephemeral ports.
    pub fn start(data_dir: &Path, ping_interval_ms: u64) -> Result<Self, NodeError> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let store = Arc::new(DataStore::open(data_dir).map_err(|e| NodeError::Startup(e.to_string()))?);
        let datastore = runtime.block_on(RunningServer::bind("127.0.0.1", 0, datastore_router(store)))?;
        let config = CoordinatorConfig {
            port: 0,
            ping_interval_ms,
            datastore_url: Some(datastore.http_url()),
            ..CoordinatorConfig::default()
        };
        let coordinator = runtime.block_on(Coordinator::start(config))?;
        let client = Client::new(&coordinator.http_url());
        let datastore_client = Client::new(&datastore.http_url());
        Ok(Self {
            runtime,
            datastore: Some(datastore),
            coordinator: Some(coordinator),
            workers: BTreeMap::new(),
            client,
            datastore_client,
        })
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn datastore_client(&self) -> &Client {
        &self.datastore_client
    }

    pub fn datastore_url(&self) -> String {
        self.datastore.as_ref().expect("running").http_url()
    }

    pub fn ws_url(&self) -> String {
        self.coordinator.as_ref().expect("running").ws_url()
    }

    pub fn ingest(&self, dataset_id: &str, zip: &[u8]) -> Result<DatasetManifest, ClientError> {
        self.datastore_client.upload_dataset(dataset_id, zip)
    }

    /// Creates a project and registers datasets already in the datastore.
    pub fn create_project(&self, config: &ProjectConfig, datasets: &[&str]) -> Result<ProjectSummary, ClientError> {
        let summary = self.client.create_project(config)?;
        for d in datasets {
            self.client.register_dataset(&config.project_id, d, None)?;
        }
        Ok(summary)
    }

    /// Options for a worker of `project` pointed at this cluster.
    pub fn worker_options(&self, project: &str, worker_id: &str) -> WorkerOptions {
        let mut o = WorkerOptions::new(self.ws_url(), project, worker_id);
        o.datastore_url = Some(self.datastore_url());
        o
    }

    pub fn spawn_worker(&mut self, options: WorkerOptions) {
        let id = options.worker_id.clone();
        let handle = {
            let _guard = self.runtime.enter();
            WorkerHandle::spawn(options)
        };
        self.workers.insert(id, handle);
    }

    pub fn worker_status(&self, worker_id: &str) -> Option<WorkerStatus> {
        self.workers.get(worker_id).map(|w| w.status())
    }

    /// Drops a worker's connection abruptly.
    pub fn kill_worker(&mut self, worker_id: &str) -> bool {
        match self.workers.remove(worker_id) {
            Some(w) => {
                w.kill();
                true
            }
            None => false,
        }
    }

    /// Polls until `pred` holds or `timeout` passes.
    pub fn wait_until(&self, timeout: Duration, mut pred: impl FnMut(&Self) -> bool) -> bool {
        let end = Instant::now() + timeout;
        while Instant::now() < end {
            if pred(self) {
                return true;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        pred(self)
    }

    /// Waits until the project has recorded `iteration`; returns all
    /// records so far.
    pub fn wait_for_iteration(
        &self,
        project: &str,
        iteration: u64,
        timeout: Duration,
    ) -> Result<Vec<IterationRecord>, ClientError> {
        let end = Instant::now() + timeout;
        loop {
            let history = self.client.history(project, 0)?;
            if history.last().is_some_and(|r| r.iteration >= iteration) || Instant::now() >= end {
                return Ok(history);
            }
            std::thread::sleep(Duration::from_millis(25));
        }
    }

    pub fn shutdown(mut self) {
        for (_, w) in std::mem::take(&mut self.workers) {
            w.kill();
        }
        if let Some(c) = self.coordinator.take() {
            self.runtime.block_on(c.shutdown());
        }
        if let Some(d) = self.datastore.take() {
            self.runtime.block_on(d.shutdown());
        }
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        for (_, w) in std::mem::take(&mut self.workers) {
            w.kill();
        }
        let _guard = self.runtime.enter();
        self.coordinator.take();
        self.datastore.take();
    }
}
