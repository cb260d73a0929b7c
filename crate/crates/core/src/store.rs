//! Content-addressed, versioned artifact store.
//!
//! Firmware, container and model artifacts share one index and are
//! partitioned by [`ArtifactKind`]. On disk the store is a directory holding
//! `index.json` (canonical JSON, rewritten atomically) and `blobs/<hex>`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{compute_digest, ContentDigest};
use crate::image;
use crate::model::{ArtifactDescriptor, ArtifactKind, ArtifactRef, DescriptorError};
use crate::resolver::RollbackPins;
use crate::version::SemanticVersion;

const INDEX_FILE: &str = "index.json";
const BLOB_DIR: &str = "blobs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Permission {
    Publish,
    Fetch,
    Admin,
}

/// Static bearer tokens and what each may do. Permissions do not imply one
/// another.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenTable {
    tokens: BTreeMap<String, BTreeSet<Permission>>,
}

impl TokenTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt(format!("token file: {e}")))
    }

    pub fn with(mut self, token: &str, permissions: &[Permission]) -> Self {
        self.tokens
            .entry(token.to_string())
            .or_default()
            .extend(permissions.iter().copied());
        self
    }

    pub fn permissions(&self, token: &str) -> Option<&BTreeSet<Permission>> {
        self.tokens.get(token)
    }

    pub fn authorize(&self, token: &str, needed: Permission) -> Result<(), StoreError> {
        match self.tokens.get(token) {
            Some(perms) if perms.contains(&needed) => Ok(()),
            Some(_) => Err(StoreError::PermissionDenied { needed }),
            None => Err(StoreError::Unauthenticated),
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown token")]
    Unauthenticated,
    #[error("permission denied: {needed:?} required")]
    PermissionDenied { needed: Permission },
    #[error("integrity error: descriptor digest {expected} but payload hashes to {actual}")]
    DigestMismatch {
        expected: ContentDigest,
        actual: ContentDigest,
    },
    #[error("descriptor size_bytes {declared} but payload is {actual} bytes")]
    SizeMismatch { declared: u64, actual: u64 },
    #[error("artifact {0} already published")]
    Duplicate(ArtifactRef),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(#[from] DescriptorError),
    #[error("no published artifact for slot {slot:?} at version {version}")]
    UnknownPinTarget {
        slot: String,
        version: SemanticVersion,
    },
    #[error("kind mismatch: {artifact} is {actual}, expected {expected}")]
    KindMismatch {
        artifact: ArtifactRef,
        expected: ArtifactKind,
        actual: ArtifactKind,
    },
    #[error("cannot combine requirements: {0}")]
    RequirementConflict(#[from] crate::model::RequirementConflict),
    #[error("store corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StoreError {
    pub fn http_status(&self) -> u16 {
        match self {
            StoreError::Unauthenticated => 401,
            StoreError::PermissionDenied { .. } => 403,
            StoreError::NotFound(_) => 404,
            StoreError::Duplicate(_) => 409,
            StoreError::DigestMismatch { .. }
            | StoreError::SizeMismatch { .. }
            | StoreError::UnknownPinTarget { .. }
            | StoreError::KindMismatch { .. }
            | StoreError::RequirementConflict(_) => 422,
            StoreError::InvalidDescriptor(_) => 400,
            StoreError::Corrupt(_) | StoreError::Io(_) => 500,
        }
    }
}

/// Conjunctive catalog filter; empty fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CatalogFilter {
    pub kind: Option<ArtifactKind>,
    pub slot: Option<String>,
    pub tags: BTreeMap<String, String>,
}

impl CatalogFilter {
    pub fn kind(kind: ArtifactKind) -> Self {
        Self {
            kind: Some(kind),
            ..Self::default()
        }
    }

    pub fn matches(&self, d: &ArtifactDescriptor) -> bool {
        self.kind.is_none_or(|k| k == d.kind)
            && self.slot.as_ref().is_none_or(|s| *s == d.slot_name)
            && self.tags.iter().all(|(k, v)| d.tags.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub artifacts: Vec<ArtifactDescriptor>,
    pub revision: u64,
}

#[derive(Debug, Clone)]
enum Blob {
    Memory(Arc<[u8]>),
    File(PathBuf),
}

#[derive(Debug, Default)]
struct StoreState {
    records: BTreeMap<ArtifactRef, ArtifactDescriptor>,
    blobs: BTreeMap<ContentDigest, Blob>,
    pins: RollbackPins,
    revision: u64,
}

/// Persisted index layout.
#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    records: BTreeMap<String, ArtifactDescriptor>,
    rollback_pins: RollbackPins,
    revision: u64,
}

#[derive(Debug)]
pub struct ArtifactStore {
    root: Option<PathBuf>,
    tokens: TokenTable,
    state: RwLock<StoreState>,
}

impl ArtifactStore {
    pub fn in_memory(tokens: TokenTable) -> Self {
        Self {
            root: None,
            tokens,
            state: RwLock::new(StoreState::default()),
        }
    }

    /// Opens (or initialises) a directory-backed store.
    pub fn open(root: impl Into<PathBuf>, tokens: TokenTable) -> Result<Self, StoreError> {
        let root = root.into();
        let blob_dir = root.join(BLOB_DIR);
        fs::create_dir_all(&blob_dir)?;
        for entry in fs::read_dir(&blob_dir)?.chain(fs::read_dir(&root)?) {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "tmp") {
                fs::remove_file(&path)?;
            }
        }

        let mut state = StoreState::default();
        let index_path = root.join(INDEX_FILE);
        if index_path.exists() {
            let bytes = fs::read(&index_path)?;
            let index: IndexFile = serde_json::from_slice(&bytes)
                .map_err(|e| StoreError::Corrupt(format!("index: {e}")))?;
            for (key, descriptor) in index.records {
                let reference = descriptor.reference();
                if key != reference.to_string() {
                    return Err(StoreError::Corrupt(format!("record key {key} ≠ {reference}")));
                }
                let path = blob_dir.join(descriptor.digest.hex());
                if !path.is_file() {
                    return Err(StoreError::Corrupt(format!("missing blob for {reference}")));
                }
                state.blobs.insert(descriptor.digest.clone(), Blob::File(path));
                state.records.insert(reference, descriptor);
            }
            state.pins = index.rollback_pins;
            state.revision = index.revision;
        }
        Ok(Self {
            root: Some(root),
            tokens,
            state: RwLock::new(state),
        })
    }

    pub fn tokens(&self) -> &TokenTable {
        &self.tokens
    }

    pub fn authorize(&self, token: &str, needed: Permission) -> Result<(), StoreError> {
        self.tokens.authorize(token, needed)
    }

    pub fn publish(
        &self,
        descriptor: ArtifactDescriptor,
        payload: &[u8],
        token: &str,
    ) -> Result<ArtifactDescriptor, StoreError> {
        self.authorize(token, Permission::Publish)?;
        let mut state = self.state.write().expect("store lock poisoned");
        self.publish_locked(&mut state, descriptor, payload)
    }

    fn publish_locked(
        &self,
        state: &mut StoreState,
        descriptor: ArtifactDescriptor,
        payload: &[u8],
    ) -> Result<ArtifactDescriptor, StoreError> {
        descriptor.validate()?;
        let actual = compute_digest(payload);
        if actual != descriptor.digest {
            return Err(StoreError::DigestMismatch {
                expected: descriptor.digest,
                actual,
            });
        }
        if descriptor.size_bytes != payload.len() as u64 {
            return Err(StoreError::SizeMismatch {
                declared: descriptor.size_bytes,
                actual: payload.len() as u64,
            });
        }
        let reference = descriptor.reference();
        if state.records.contains_key(&reference) {
            return Err(StoreError::Duplicate(reference));
        }
        if let Some(model) = &descriptor.embedded_model {
            let target = state
                .records
                .get(model)
                .ok_or_else(|| StoreError::NotFound(format!("embedded model {model}")))?;
            if target.kind != ArtifactKind::AiModel {
                return Err(StoreError::KindMismatch {
                    artifact: model.clone(),
                    expected: ArtifactKind::AiModel,
                    actual: target.kind,
                });
            }
        }

        let blob = match &self.root {
            None => Blob::Memory(payload.into()),
            Some(root) => {
                let path = root.join(BLOB_DIR).join(descriptor.digest.hex());
                if !path.is_file() {
                    write_atomic(&path, payload)?;
                }
                Blob::File(path)
            }
        };

        let mut records = state.records.clone();
        records.insert(reference.clone(), descriptor.clone());
        let revision = state.revision + 1;
        self.persist(&records, &state.pins, revision)?;

        state.records = records;
        state.revision = revision;
        state.blobs.insert(descriptor.digest.clone(), blob);
        Ok(descriptor)
    }

    fn persist(
        &self,
        records: &BTreeMap<ArtifactRef, ArtifactDescriptor>,
        pins: &RollbackPins,
        revision: u64,
    ) -> Result<(), StoreError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let bytes = canonical_index(records, pins, revision);
        write_atomic(&root.join(INDEX_FILE), &bytes)?;
        Ok(())
    }

    pub fn fetch_descriptor(
        &self,
        artifact_id: &str,
        version: SemanticVersion,
        token: &str,
    ) -> Result<ArtifactDescriptor, StoreError> {
        self.authorize(token, Permission::Fetch)?;
        let reference = ArtifactRef::new(artifact_id, version);
        self.state
            .read()
            .expect("store lock poisoned")
            .records
            .get(&reference)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(reference.to_string()))
    }

    pub fn fetch_payload(&self, digest: &ContentDigest, token: &str) -> Result<Vec<u8>, StoreError> {
        self.authorize(token, Permission::Fetch)?;
        self.payload(digest)
    }

    fn payload(&self, digest: &ContentDigest) -> Result<Vec<u8>, StoreError> {
        let blob = self
            .state
            .read()
            .expect("store lock poisoned")
            .blobs
            .get(digest)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(digest.to_string()))?;
        let bytes = match blob {
            Blob::Memory(bytes) => bytes.to_vec(),
            Blob::File(path) => fs::read(path)?,
        };
        let actual = compute_digest(&bytes);
        if actual != *digest {
            return Err(StoreError::Corrupt(format!("blob {digest} hashes to {actual}")));
        }
        Ok(bytes)
    }

    pub fn list_catalog(&self, filter: &CatalogFilter, token: &str) -> Result<Catalog, StoreError> {
        self.authorize(token, Permission::Fetch)?;
        let state = self.state.read().expect("store lock poisoned");
        Ok(Catalog {
            artifacts: state.records.values().filter(|d| filter.matches(d)).cloned().collect(),
            revision: state.revision,
        })
    }

    /// Whole catalog, for in-process consumers that already hold authority.
    pub fn catalog(&self) -> Catalog {
        let state = self.state.read().expect("store lock poisoned");
        Catalog {
            artifacts: state.records.values().cloned().collect(),
            revision: state.revision,
        }
    }

    pub fn revision(&self) -> u64 {
        self.state.read().expect("store lock poisoned").revision
    }

    pub fn rollback_pins(&self) -> RollbackPins {
        self.state.read().expect("store lock poisoned").pins.clone()
    }

    pub fn set_rollback_pin(
        &self,
        variant_id: &str,
        slot_name: &str,
        version: SemanticVersion,
        token: &str,
    ) -> Result<(), StoreError> {
        self.authorize(token, Permission::Admin)?;
        let mut state = self.state.write().expect("store lock poisoned");
        let known = state
            .records
            .values()
            .any(|d| d.slot_name == slot_name && d.version == version);
        if !known {
            return Err(StoreError::UnknownPinTarget {
                slot: slot_name.to_string(),
                version,
            });
        }
        let mut pins = state.pins.clone();
        pins.set(variant_id, slot_name, version);
        self.persist(&state.records, &pins, state.revision)?;
        state.pins = pins;
        Ok(())
    }

    /// Publishes a new container version whose payload bundles an existing
    /// container image with an existing model.
    pub fn compose_container_with_model(
        &self,
        container: &ArtifactRef,
        model: &ArtifactRef,
        new_version: SemanticVersion,
        token: &str,
    ) -> Result<ArtifactDescriptor, StoreError> {
        self.authorize(token, Permission::Publish)?;
        let state = self.state.read().expect("store lock poisoned");
        let get = |r: &ArtifactRef, kind: ArtifactKind| {
            let d = state
                .records
                .get(r)
                .ok_or_else(|| StoreError::NotFound(r.to_string()))?;
            if d.kind != kind {
                return Err(StoreError::KindMismatch {
                    artifact: r.clone(),
                    expected: kind,
                    actual: d.kind,
                });
            }
            Ok(d.clone())
        };
        let container_d = get(container, ArtifactKind::ContainerImage)?;
        let model_d = get(model, ArtifactKind::AiModel)?;
        let requirement = container_d.requirement.union(&model_d.requirement)?;

        drop(state);
        let container_bytes = self.payload(&container_d.digest)?;
        let model_bytes = self.payload(&model_d.digest)?;
        // The container part carries the composed version in its own header.
        let container_body = image::decode_image(ArtifactKind::ContainerImage, &container_bytes)
            .map_err(|e| StoreError::Corrupt(format!("{container}: {e}")))?
            .body
            .to_vec();
        let reframed = image::encode_image(ArtifactKind::ContainerImage, new_version, &container_body);
        let payload = image::compose(&reframed, &model_bytes);

        let descriptor = ArtifactDescriptor {
            artifact_id: container_d.artifact_id.clone(),
            kind: ArtifactKind::ContainerImage,
            slot_name: container_d.slot_name.clone(),
            version: new_version,
            digest: compute_digest(&payload),
            size_bytes: payload.len() as u64,
            requirement,
            tags: container_d.tags.clone(),
            model_meta: None,
            embedded_model: Some(model.clone()),
        };
        let mut state = self.state.write().expect("store lock poisoned");
        self.publish_locked(&mut state, descriptor, &payload)
    }

    /// Canonical bytes of the current index, identical to what is on disk.
    pub fn canonical_index(&self) -> Vec<u8> {
        let state = self.state.read().expect("store lock poisoned");
        canonical_index(&state.records, &state.pins, state.revision)
    }
}

fn canonical_index(
    records: &BTreeMap<ArtifactRef, ArtifactDescriptor>,
    pins: &RollbackPins,
    revision: u64,
) -> Vec<u8> {
    let index = IndexFile {
        records: records
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
        rollback_pins: pins.clone(),
        revision,
    };
    // Round-trip through Value so every object's keys come out sorted.
    let value = serde_json::to_value(&index).expect("index serializes");
    let mut bytes = serde_json::to_vec_pretty(&value).expect("index serializes");
    bytes.push(b'\n');
    bytes
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        fs::File::open(dir)?.sync_all()?;
    }
    Ok(())
}
