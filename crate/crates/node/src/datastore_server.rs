//! HTTP front end of a [`DataStore`].
//!
//! - `POST /datasets?id={dataset_id}` with a zip body ingests a dataset and
//!   answers with its manifest.
//! - `GET /datasets` lists dataset ids.
//! - `GET /datasets/{id}/manifest` returns the manifest.
//! - `POST /datasets/{id}/shard` with `{"ids": [..]}` answers with a zip of
//!   `{label}/{id}.{ext}` entries.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gradloom_core::datastore::{DataStore, DatastoreError};
use serde::Deserialize;

use crate::server::ApiError;

impl From<DatastoreError> for ApiError {
    fn from(e: DatastoreError) -> Self {
        let status = match &e {
            DatastoreError::DuplicateDataset(_) => StatusCode::CONFLICT,
            DatastoreError::UnknownDataset(_) | DatastoreError::MissingIds(_) => StatusCode::NOT_FOUND,
            DatastoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, DatastoreError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn upload(
    State(store): State<Arc<DataStore>>,
    Query(q): Query<HashMap<String, String>>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let id = q
        .get("id")
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "missing ?id= query parameter".into()))?;
    let manifest = blocking(move || store.ingest_bytes(&id, &body)).await?;
    tracing::info!(dataset = %manifest.dataset_id, items = manifest.entries.len(), skipped = manifest.skipped, "ingested");
    Ok((StatusCode::CREATED, Json(manifest.as_ref().clone())).into_response())
}

async fn list(State(store): State<Arc<DataStore>>) -> Json<Vec<String>> {
    Json(store.datasets())
}

async fn manifest(State(store): State<Arc<DataStore>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let m = store.manifest(&id)?;
    Ok(Json(m.as_ref().clone()).into_response())
}

#[derive(Deserialize)]
struct ShardRequest {
    ids: Vec<u32>,
}

async fn shard(
    State(store): State<Arc<DataStore>>,
    Path(id): Path<String>,
    Json(req): Json<ShardRequest>,
) -> Result<Response, ApiError> {
    let zip = blocking(move || store.get_shard(&id, &req.ids)).await?;
    Ok(([(header::CONTENT_TYPE, "application/zip")], zip).into_response())
}

pub fn datastore_router(store: Arc<DataStore>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/datasets", post(upload).get(list))
        .route("/datasets/{id}/manifest", get(manifest))
        .route("/datasets/{id}/shard", post(shard))
        .layer(DefaultBodyLimit::max(4 << 30))
        .with_state(store)
}
