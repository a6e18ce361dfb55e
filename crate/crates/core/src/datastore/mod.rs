//! Labelled dataset storage: zip ingestion, manifests, shard packing and
//! item decoding.
//!
//! Datasets live under a root directory as `{dataset_id}/manifest.json` and
//! `{dataset_id}/blobs/{id}.{png|mlb1}`; items are stored undecoded.

mod decode;
mod store;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use decode::{decode_item, encode_mlb1, encode_png, ItemFormat, MLB1_MAGIC};
pub use store::{
    pack_zip, read_labelled_dir, read_labelled_zip, read_shard, scan_zip, DataStore, ShardItem,
};

/// Identity of one datum within a project: dataset id and per-dataset index.
///
/// Orders by dataset, then index; serialises as `["dataset", index]`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DatumId(pub String, pub u32);

impl DatumId {
    pub fn new(dataset: impl Into<String>, index: u32) -> Self {
        DatumId(dataset.into(), index)
    }

    pub fn dataset(&self) -> &str {
        &self.0
    }

    pub fn index(&self) -> u32 {
        self.1
    }
}

impl std::fmt::Display for DatumId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.0, self.1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    pub label: String,
    pub byte_size: u64,
    pub format: ItemFormat,
}

/// Index of an ingested dataset. Ids are dense `0..N` in lexicographic path
/// order of the source archive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub entries: Vec<ManifestEntry>,
    /// Distinct labels in sorted order.
    pub label_set: Vec<String>,
    /// Files ignored during ingestion (unsupported type or layout).
    #[serde(default)]
    pub skipped: u64,
}

impl DatasetManifest {
    pub fn datum_ids(&self) -> impl Iterator<Item = DatumId> + '_ {
        self.entries
            .iter()
            .map(|e| DatumId::new(self.dataset_id.clone(), e.id))
    }

    pub fn validate(&self) -> Result<(), DatastoreError> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(DatastoreError::BadManifest(format!(
                    "entry {i} has id {}; ids must be dense from 0",
                    e.id
                )));
            }
            if self.label_set.binary_search(&e.label).is_err() {
                return Err(DatastoreError::BadManifest(format!(
                    "entry {i} label {:?} is not in the label set",
                    e.label
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("zip: {0}")]
    Zip(String),
    #[error("archive contains no usable items")]
    EmptyArchive,
    #[error("dataset {0:?} already exists")]
    DuplicateDataset(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("invalid dataset id {0:?}")]
    InvalidDatasetId(String),
    #[error("unknown ids: {0:?}")]
    MissingIds(Vec<u32>),
    #[error("decode failed{}: {reason}", id.as_ref().map(|i| format!(" for {i}")).unwrap_or_default())]
    Decode { id: Option<DatumId>, reason: String },
    #[error("manifest: {0}")]
    BadManifest(String),
}

impl DatastoreError {
    /// Attaches a datum id to a decode error.
    pub fn with_id(self, datum: DatumId) -> Self {
        match self {
            DatastoreError::Decode { reason, .. } => DatastoreError::Decode {
                id: Some(datum),
                reason,
            },
            other => other,
        }
    }
}
