//! Coordinator configuration file.
//!
//! ```toml
//! host = "127.0.0.1"
//! port = 8600
//! max_frame_bytes = 67108864
//! ping_interval_ms = 1000
//! missed_pings = 3
//! datastore_url = "http://127.0.0.1:8601"
//!
//! [[projects]]
//! project_id = "mnist"
//! spec_file = "mnist-spec.json"   # or an inline `spec` table
//! T_seconds = 2.0
//! per_worker_cap = 3000
//! mode = "time_budget"
//! datasets = ["mnist-train"]      # registered from the datastore at start
//! ```
//!
//! Relative paths are resolved against the config file's directory.
//! `GRADLOOM_COORDINATOR_PORT` and `GRADLOOM_COORDINATOR_HOST` override the
//! listen address.

use std::path::{Path, PathBuf};

use gradloom_core::coordinator::ProjectConfig;
use gradloom_core::nn::ModelArchive;
use gradloom_core::protocol::DEFAULT_MAX_FRAME;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8600
}

fn default_frame() -> usize {
    DEFAULT_MAX_FRAME
}

fn default_ping() -> u64 {
    1000
}

fn default_missed() -> u32 {
    3
}

fn default_history() -> usize {
    10_000
}

/// A project declared in the config file, with the datasets to register.
#[derive(Debug, Clone)]
pub struct ProjectEntry {
    pub config: ProjectConfig,
    pub datasets: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_host")]
    host: String,
    #[serde(default = "default_port")]
    port: u16,
    #[serde(default = "default_frame")]
    max_frame_bytes: usize,
    #[serde(default = "default_ping")]
    ping_interval_ms: u64,
    #[serde(default = "default_missed")]
    missed_pings: u32,
    #[serde(default = "default_history")]
    telemetry_history: usize,
    #[serde(default)]
    datastore_url: Option<String>,
    #[serde(default)]
    projects: Vec<toml::Value>,
}

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub host: String,
    pub port: u16,
    pub max_frame_bytes: usize,
    pub ping_interval_ms: u64,
    /// Consecutive unanswered pings after which a worker counts as lost.
    pub missed_pings: u32,
    /// Iteration records kept per project for late subscribers.
    pub telemetry_history: usize,
    pub datastore_url: Option<String>,
    pub projects: Vec<ProjectEntry>,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            host: default_host(),
            port: default_port(),
            max_frame_bytes: default_frame(),
            ping_interval_ms: default_ping(),
            missed_pings: default_missed(),
            telemetry_history: default_history(),
            datastore_url: None,
            projects: Vec::new(),
        }
    }
}

impl CoordinatorConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut config = Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        config.apply_env();
        Ok(config)
    }

    /// Parses config text; `base` resolves relative file references.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message,
        };
        let raw: RawConfig = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        if raw.ping_interval_ms == 0 || raw.missed_pings == 0 {
            return Err(ConfigError::Invalid(
                "ping_interval_ms and missed_pings must be positive".into(),
            ));
        }
        let mut projects = Vec::new();
        for value in raw.projects {
            projects.push(project_entry(value, base)?);
        }
        Ok(Self {
            host: raw.host,
            port: raw.port,
            max_frame_bytes: raw.max_frame_bytes,
            ping_interval_ms: raw.ping_interval_ms,
            missed_pings: raw.missed_pings,
            telemetry_history: raw.telemetry_history,
            datastore_url: raw.datastore_url,
            projects,
        })
    }

    pub fn apply_env(&mut self) {
        if let Ok(host) = std::env::var("GRADLOOM_COORDINATOR_HOST") {
            self.host = host;
        }
        if let Some(port) = std::env::var("GRADLOOM_COORDINATOR_PORT")
            .ok()
            .and_then(|p| p.parse().ok())
        {
            self.port = port;
        }
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn project_entry(value: toml::Value, base: &Path) -> Result<ProjectEntry, ConfigError> {
    let mut json = serde_json::to_value(value).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let obj = json
        .as_object_mut()
        .ok_or_else(|| ConfigError::Invalid("each [[projects]] entry must be a table".into()))?;
    let mut datasets = Vec::new();
    if let Some(list) = obj.remove("datasets") {
        datasets = serde_json::from_value(list)
            .map_err(|e| ConfigError::Invalid(format!("datasets: {e}")))?;
    }
    if let Some(file) = obj.remove("spec_file") {
        let file = file
            .as_str()
            .ok_or_else(|| ConfigError::Invalid("spec_file must be a string".into()))?;
        obj.insert("spec".into(), read_json(&base.join(file))?);
    }
    if let Some(file) = obj.remove("resume_file") {
        let file = file
            .as_str()
            .ok_or_else(|| ConfigError::Invalid("resume_file must be a string".into()))?;
        let path = base.join(file);
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        let (archive, _) = ModelArchive::from_json(&text).map_err(|e| ConfigError::Parse {
            path,
            message: e.to_string(),
        })?;
        obj.insert(
            "resume_from".into(),
            serde_json::to_value(archive).expect("archive serialises"),
        );
    }
    let config: ProjectConfig = serde_json::from_value(json)
        .map_err(|e| ConfigError::Invalid(format!("project: {e}")))?;
    config
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(ProjectEntry { config, datasets })
}
