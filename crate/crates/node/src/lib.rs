//! Networked processes: the coordinator and datastore HTTP/WebSocket
//! servers, the worker runtime and a blocking client for both APIs.

pub mod client;
pub mod config;
pub mod coordinator_server;
pub mod datastore_server;
pub mod local;
pub mod server;
pub mod synthetic;
pub mod worker_runtime;

pub use client::{AllocationView, Client, ClientError, Prediction};
pub use config::{ConfigError, CoordinatorConfig, ProjectEntry};
pub use coordinator_server::{coordinator_router, Coordinator, Hub};
pub use datastore_server::datastore_router;
pub use server::{ApiError, RunningServer};
pub use worker_runtime::{run_worker, WorkerExit, WorkerHandle, WorkerOptions, WorkerStatus};

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("startup: {0}")]
    Startup(String),
    #[error("connection: {0}")]
    Connect(String),
}
