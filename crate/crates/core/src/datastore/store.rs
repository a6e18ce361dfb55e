use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::datastore::{DatasetManifest, DatastoreError, ItemFormat, ManifestEntry};

/// A file accepted from an uploaded archive.
#[derive(Debug, Clone)]
struct Accepted {
    path: String,
    label: String,
    format: ItemFormat,
    bytes: Vec<u8>,
}

fn zip_err(e: zip::result::ZipError) -> DatastoreError {
    DatastoreError::Zip(e.to_string())
}

/// Lists the usable items of a labelled zip in lexicographic path order.
///
/// The first directory component of each path is its label. Files outside a
/// label directory, hidden files, `__MACOSX` metadata and unsupported
/// extensions are skipped and counted.
fn scan(bytes: &[u8]) -> Result<(Vec<Accepted>, u64), DatastoreError> {
    let mut archive = ZipArchive::new(Cursor::new(bytes)).map_err(zip_err)?;
    let mut accepted = Vec::new();
    let mut skipped = 0u64;
    for i in 0..archive.len() {
        let mut file = archive.by_index(i).map_err(zip_err)?;
        if file.is_dir() {
            continue;
        }
        let path = file.name().replace('\\', "/");
        let parts: Vec<&str> = path.split('/').filter(|p| !p.is_empty()).collect();
        let hidden = parts
            .iter()
            .any(|p| p.starts_with('.') || *p == "__MACOSX");
        let format = ItemFormat::from_path(&path);
        match (parts.len() >= 2 && !hidden, format) {
            (true, Some(format)) => {
                let mut data = Vec::with_capacity(file.size() as usize);
                file.read_to_end(&mut data)?;
                accepted.push(Accepted {
                    label: parts[0].to_string(),
                    path,
                    format,
                    bytes: data,
                });
            }
            _ => {
                if !hidden {
                    tracing::warn!(path = %path, "skipping unsupported archive entry");
                }
                skipped += 1;
            }
        }
    }
    accepted.sort_by(|a, b| a.path.cmp(&b.path));
    Ok((accepted, skipped))
}

/// Builds a manifest for a labelled zip without storing anything.
pub fn scan_zip(dataset_id: &str, bytes: &[u8]) -> Result<DatasetManifest, DatastoreError> {
    let (accepted, skipped) = scan(bytes)?;
    Ok(manifest_for(dataset_id, &accepted, skipped))
}

fn manifest_for(dataset_id: &str, accepted: &[Accepted], skipped: u64) -> DatasetManifest {
    let label_set: BTreeSet<String> = accepted.iter().map(|a| a.label.clone()).collect();
    DatasetManifest {
        dataset_id: dataset_id.to_string(),
        entries: accepted
            .iter()
            .enumerate()
            .map(|(i, a)| ManifestEntry {
                id: i as u32,
                label: a.label.clone(),
                byte_size: a.bytes.len() as u64,
                format: a.format,
            })
            .collect(),
        label_set: label_set.into_iter().collect(),
        skipped,
    }
}

/// Reads every usable item of a labelled zip; ids are positions in
/// lexicographic path order, matching [`scan_zip`].
pub fn read_labelled_zip(bytes: &[u8]) -> Result<Vec<ShardItem>, DatastoreError> {
    let (accepted, _) = scan(bytes)?;
    Ok(accepted
        .into_iter()
        .enumerate()
        .map(|(i, a)| ShardItem {
            id: i as u32,
            label: a.label,
            format: a.format,
            bytes: a.bytes,
        })
        .collect())
}

/// Reads a `{label}/{file}` directory tree the same way as a labelled zip.
pub fn read_labelled_dir(dir: &Path) -> Result<Vec<ShardItem>, DatastoreError> {
    let mut found = Vec::new();
    for label_entry in fs::read_dir(dir)? {
        let label_entry = label_entry?;
        let label = label_entry.file_name().to_string_lossy().into_owned();
        if !label_entry.file_type()?.is_dir() || label.starts_with('.') {
            continue;
        }
        for file in fs::read_dir(label_entry.path())? {
            let file = file?;
            let name = file.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') || !file.file_type()?.is_file() {
                continue;
            }
            if let Some(format) = ItemFormat::from_path(&name) {
                found.push((format!("{label}/{name}"), label.clone(), format, file.path()));
            }
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    found
        .into_iter()
        .enumerate()
        .map(|(i, (_, label, format, path))| {
            Ok(ShardItem {
                id: i as u32,
                label,
                format,
                bytes: fs::read(path)?,
            })
        })
        .collect()
}

/// Writes a zip with stored (uncompressed) entries and fixed timestamps, so
/// identical inputs give identical bytes.
pub fn pack_zip<'a>(
    entries: impl IntoIterator<Item = (String, &'a [u8])>,
) -> Result<Vec<u8>, DatastoreError> {
    let mut writer = ZipWriter::new(Cursor::new(Vec::new()));
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default())
        .unix_permissions(0o644);
    for (name, bytes) in entries {
        writer.start_file(name, options).map_err(zip_err)?;
        writer.write_all(bytes)?;
    }
    Ok(writer.finish().map_err(zip_err)?.into_inner())
}

/// One item unpacked from a shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardItem {
    pub id: u32,
    pub label: String,
    pub format: ItemFormat,
    pub bytes: Vec<u8>,
}

/// Unpacks a shard produced by [`DataStore::get_shard`].
pub fn read_shard(bytes: &[u8]) -> Result<Vec<ShardItem>, DatastoreError> {
    let mut archive = ZipArchive::new(Cursor::new(bytes)).map_err(zip_err)?;
    let mut items = Vec::with_capacity(archive.len());
    for i in 0..archive.len() {
        let mut file = archive.by_index(i).map_err(zip_err)?;
        let name = file.name().to_string();
        let bad = || DatastoreError::Zip(format!("unexpected shard entry {name:?}"));
        let (label, file_name) = name.split_once('/').ok_or_else(bad)?;
        let (stem, _) = file_name.rsplit_once('.').ok_or_else(bad)?;
        let id: u32 = stem.parse().map_err(|_| bad())?;
        let format = ItemFormat::from_path(file_name).ok_or_else(bad)?;
        let mut data = Vec::with_capacity(file.size() as usize);
        file.read_to_end(&mut data)?;
        items.push(ShardItem {
            id,
            label: label.to_string(),
            format,
            bytes: data,
        });
    }
    Ok(items)
}

fn valid_dataset_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// File-backed dataset store.
#[derive(Debug)]
pub struct DataStore {
    root: PathBuf,
    manifests: RwLock<HashMap<String, Arc<DatasetManifest>>>,
}

impl DataStore {
    /// Opens (creating if needed) a store rooted at `root` and loads every
    /// manifest found there.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatastoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut manifests = HashMap::new();
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            let manifest_path = entry.path().join("manifest.json");
            if !valid_dataset_id(&name) || !manifest_path.is_file() {
                continue;
            }
            let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)
                .map_err(|e| DatastoreError::BadManifest(e.to_string()))?;
            manifests.insert(name, Arc::new(manifest));
        }
        Ok(Self {
            root,
            manifests: RwLock::new(manifests),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.manifests.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn manifest(&self, dataset_id: &str) -> Result<Arc<DatasetManifest>, DatastoreError> {
        self.manifests
            .read()
            .unwrap()
            .get(dataset_id)
            .cloned()
            .ok_or_else(|| DatastoreError::UnknownDataset(dataset_id.to_string()))
    }

    /// Ingests a labelled zip file; the dataset id is the file stem.
    pub fn ingest_zip(&self, zip_path: &Path) -> Result<Arc<DatasetManifest>, DatastoreError> {
        let id = zip_path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        let bytes = fs::read(zip_path)?;
        self.ingest_bytes(&id, &bytes)
    }

    /// Ingests a labelled zip held in memory.
    ///
    /// Items are written to a staging directory that is renamed into place,
    /// so a dataset id can only be claimed once.
    pub fn ingest_bytes(
        &self,
        dataset_id: &str,
        bytes: &[u8],
    ) -> Result<Arc<DatasetManifest>, DatastoreError> {
        if !valid_dataset_id(dataset_id) {
            return Err(DatastoreError::InvalidDatasetId(dataset_id.to_string()));
        }
        let target = self.root.join(dataset_id);
        if target.exists() || self.manifests.read().unwrap().contains_key(dataset_id) {
            return Err(DatastoreError::DuplicateDataset(dataset_id.to_string()));
        }
        let (accepted, skipped) = scan(bytes)?;
        if accepted.is_empty() {
            return Err(DatastoreError::EmptyArchive);
        }
        let manifest = manifest_for(dataset_id, &accepted, skipped);

        let staging = self.root.join(format!(
            ".staging-{dataset_id}-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        let _ = fs::remove_dir_all(&staging);
        fs::create_dir_all(staging.join("blobs"))?;
        for (entry, item) in manifest.entries.iter().zip(&accepted) {
            fs::write(
                staging
                    .join("blobs")
                    .join(format!("{}.{}", entry.id, entry.format.extension())),
                &item.bytes,
            )?;
        }
        fs::write(
            staging.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest).expect("manifest serialises"),
        )?;

        let mut manifests = self.manifests.write().unwrap();
        if manifests.contains_key(dataset_id) || target.exists() {
            let _ = fs::remove_dir_all(&staging);
            return Err(DatastoreError::DuplicateDataset(dataset_id.to_string()));
        }
        fs::rename(&staging, &target)?;
        let manifest = Arc::new(manifest);
        manifests.insert(dataset_id.to_string(), manifest.clone());
        tracing::info!(
            dataset = dataset_id,
            items = manifest.entries.len(),
            labels = manifest.label_set.len(),
            skipped,
            "ingested dataset"
        );
        Ok(manifest)
    }

    /// Raw bytes of one item.
    pub fn item_bytes(&self, dataset_id: &str, id: u32) -> Result<Vec<u8>, DatastoreError> {
        let manifest = self.manifest(dataset_id)?;
        let entry = manifest
            .entries
            .get(id as usize)
            .ok_or_else(|| DatastoreError::MissingIds(vec![id]))?;
        Ok(fs::read(self.root.join(dataset_id).join("blobs").join(format!(
            "{}.{}",
            id,
            entry.format.extension()
        )))?)
    }

    /// Packs the requested items into a zip laid out like an ingestion
    /// archive (`{label}/{id}.{ext}`), in ascending id order. Duplicate ids
    /// are collapsed; unknown ids fail the whole request.
    pub fn get_shard(&self, dataset_id: &str, ids: &[u32]) -> Result<Vec<u8>, DatastoreError> {
        let manifest = self.manifest(dataset_id)?;
        let wanted: BTreeSet<u32> = ids.iter().copied().collect();
        let missing: Vec<u32> = wanted
            .iter()
            .copied()
            .filter(|id| *id as usize >= manifest.entries.len())
            .collect();
        if !missing.is_empty() {
            return Err(DatastoreError::MissingIds(missing));
        }
        let mut blobs = BTreeMap::new();
        for id in &wanted {
            blobs.insert(*id, self.item_bytes(dataset_id, *id)?);
        }
        pack_zip(blobs.iter().map(|(id, bytes)| {
            let entry = &manifest.entries[*id as usize];
            (
                format!("{}/{}.{}", entry.label, id, entry.format.extension()),
                bytes.as_slice(),
            )
        }))
    }
}
