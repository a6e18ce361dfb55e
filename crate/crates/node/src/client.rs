//! Blocking HTTP client for the coordinator and datastore APIs.

use std::time::Duration;

use gradloom_core::coordinator::{ProjectConfig, ProjectSummary};
use gradloom_core::datastore::DatasetManifest;
use gradloom_core::nn::{Hyperparams, ModelArchive};
use gradloom_core::protocol::{IterationRecord, WorkerTelemetry};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport { url: String, source: ureq::Error },
    #[error("{url} answered {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("bad response from {url}: {message}")]
    Body { url: String, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationView {
    pub workers: std::collections::BTreeMap<String, u64>,
    pub allocated: u64,
    pub unallocated: u64,
}

/// Thin wrapper over an HTTP agent that maps non-2xx answers to errors
/// carrying the response body.
#[derive(Clone)]
pub struct Client {
    agent: ureq::Agent,
    base: String,
}

const BODY_LIMIT: u64 = 1 << 31;

impl Client {
    pub fn new(base_url: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .into();
        Self {
            agent,
            base: base_url.trim_end_matches('/').to_string(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn finish(&self, url: &str, result: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<Vec<u8>, ClientError> {
        let mut resp = result.map_err(|source| ClientError::Transport {
            url: url.to_string(),
            source,
        })?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(BODY_LIMIT)
            .read_to_vec()
            .map_err(|source| ClientError::Transport {
                url: url.to_string(),
                source,
            })?;
        if !(200..300).contains(&status) {
            return Err(ClientError::Status {
                url: url.to_string(),
                status,
                body: String::from_utf8_lossy(&body).into_owned(),
            });
        }
        Ok(body)
    }

    fn json<T: DeserializeOwned>(url: &str, bytes: &[u8]) -> Result<T, ClientError> {
        serde_json::from_slice(bytes).map_err(|e| ClientError::Body {
            url: url.to_string(),
            message: e.to_string(),
        })
    }

    pub fn get_bytes(&self, path: &str) -> Result<Vec<u8>, ClientError> {
        let url = format!("{}{path}", self.base);
        let r = self.agent.get(&url).call();
        self.finish(&url, r)
    }

    pub fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let url = format!("{}{path}", self.base);
        let bytes = self.get_bytes(path)?;
        Self::json(&url, &bytes)
    }

    pub fn post_bytes(&self, path: &str, content_type: &str, body: &[u8]) -> Result<Vec<u8>, ClientError> {
        let url = format!("{}{path}", self.base);
        let r = self.agent.post(&url).header("content-type", content_type).send(body);
        self.finish(&url, r)
    }

    pub fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let url = format!("{}{path}", self.base);
        let payload = serde_json::to_vec(body).expect("request bodies serialise");
        let bytes = self.post_bytes(path, "application/json", &payload)?;
        Self::json(&url, &bytes)
    }

    // datastore

    pub fn upload_dataset(&self, dataset_id: &str, zip: &[u8]) -> Result<DatasetManifest, ClientError> {
        let path = format!("/datasets?id={dataset_id}");
        let url = format!("{}{path}", self.base);
        let bytes = self.post_bytes(&path, "application/zip", zip)?;
        Self::json(&url, &bytes)
    }

    pub fn manifest(&self, dataset_id: &str) -> Result<DatasetManifest, ClientError> {
        self.get_json(&format!("/datasets/{dataset_id}/manifest"))
    }

    pub fn shard(&self, dataset_id: &str, ids: &[u32]) -> Result<Vec<u8>, ClientError> {
        let body = serde_json::to_vec(&serde_json::json!({ "ids": ids })).expect("ids serialise");
        self.post_bytes(&format!("/datasets/{dataset_id}/shard"), "application/json", &body)
    }

    // coordinator

    pub fn projects(&self) -> Result<Vec<ProjectSummary>, ClientError> {
        self.get_json("/projects")
    }

    pub fn create_project(&self, config: &ProjectConfig) -> Result<ProjectSummary, ClientError> {
        self.post_json("/projects", config)
    }

    pub fn register_manifest(&self, project: &str, manifest: &DatasetManifest) -> Result<serde_json::Value, ClientError> {
        self.post_json(&format!("/projects/{project}/datasets"), manifest)
    }

    /// Asks the coordinator to fetch a manifest from its configured datastore.
    pub fn register_dataset(&self, project: &str, dataset_id: &str, datastore_url: Option<&str>) -> Result<serde_json::Value, ClientError> {
        self.post_json(
            &format!("/projects/{project}/datasets"),
            &serde_json::json!({ "dataset_id": dataset_id, "datastore_url": datastore_url }),
        )
    }

    pub fn snapshot(&self, project: &str) -> Result<(ModelArchive, String), ClientError> {
        let path = format!("/projects/{project}/snapshot");
        let url = format!("{}{path}", self.base);
        let bytes = self.post_bytes(&path, "application/json", b"")?;
        let text = String::from_utf8(bytes).map_err(|e| ClientError::Body {
            url: url.clone(),
            message: e.to_string(),
        })?;
        let (archive, _) = ModelArchive::from_json(&text).map_err(|e| ClientError::Body {
            url,
            message: e.to_string(),
        })?;
        Ok((archive, text))
    }

    pub fn set_hyper(&self, project: &str, hyper: &Hyperparams) -> Result<serde_json::Value, ClientError> {
        self.post_json(&format!("/projects/{project}/hyper"), hyper)
    }

    pub fn set_period(&self, project: &str, period_s: f64) -> Result<serde_json::Value, ClientError> {
        self.post_json(
            &format!("/projects/{project}/period"),
            &serde_json::json!({ "T_seconds": period_s }),
        )
    }

    pub fn set_paused(&self, project: &str, worker: &str, paused: bool) -> Result<serde_json::Value, ClientError> {
        let action = if paused { "pause" } else { "resume" };
        self.post_json(&format!("/projects/{project}/workers/{worker}/{action}"), &serde_json::json!({}))
    }

    /// Iteration records since `after` (exclusive).
    pub fn history(&self, project: &str, after: u64) -> Result<Vec<IterationRecord>, ClientError> {
        self.get_json(&format!("/projects/{project}/history?after={after}"))
    }

    pub fn workers(&self, project: &str) -> Result<Vec<WorkerTelemetry>, ClientError> {
        self.get_json(&format!("/projects/{project}/workers"))
    }

    pub fn allocation(&self, project: &str) -> Result<AllocationView, ClientError> {
        self.get_json(&format!("/projects/{project}/allocation"))
    }

    /// Classifies a PNG or MLB1 item with the project's current model.
    pub fn predict(&self, project: &str, item: &[u8]) -> Result<Prediction, ClientError> {
        let path = format!("/projects/{project}/predict");
        let url = format!("{}{path}", self.base);
        let bytes = self.post_bytes(&path, "application/octet-stream", item)?;
        Self::json(&url, &bytes)
    }
}
