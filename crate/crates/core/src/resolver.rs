//! Artifact-to-vehicle compatibility and per-vehicle update selection.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::digest::{compute_digest, ContentDigest};
use crate::model::{
    requirement_matches, ArtifactDescriptor, ArtifactKind, ArtifactRef, RequirementMismatch,
    VehicleProfile,
};
use crate::version::SemanticVersion;
use crate::Millis;

/// Inclusive range; a missing bound is unbounded on that side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VersionRange {
    #[serde(default)]
    pub min: Option<SemanticVersion>,
    #[serde(default)]
    pub max: Option<SemanticVersion>,
}

impl VersionRange {
    pub fn contains(&self, version: SemanticVersion) -> bool {
        self.min.is_none_or(|min| min <= version) && self.max.is_none_or(|max| version <= max)
    }

    pub fn at_most(max: SemanticVersion) -> Self {
        Self {
            min: None,
            max: Some(max),
        }
    }
}

/// Union of version ranges. Never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct VersionConstraint {
    ranges: Vec<VersionRange>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("version constraint needs at least one range")]
pub struct EmptyConstraint;

impl VersionConstraint {
    pub fn new(ranges: Vec<VersionRange>) -> Result<Self, EmptyConstraint> {
        if ranges.is_empty() {
            return Err(EmptyConstraint);
        }
        Ok(Self { ranges })
    }

    pub fn at_most(max: SemanticVersion) -> Self {
        Self {
            ranges: vec![VersionRange::at_most(max)],
        }
    }

    pub fn any() -> Self {
        Self {
            ranges: vec![VersionRange::default()],
        }
    }

    pub fn ranges(&self) -> &[VersionRange] {
        &self.ranges
    }

    pub fn satisfied_by(&self, version: SemanticVersion) -> bool {
        self.ranges.iter().any(|r| r.contains(version))
    }
}

impl<'de> Deserialize<'de> for VersionConstraint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let ranges = Vec::<VersionRange>::deserialize(deserializer)?;
        Self::new(ranges).map_err(serde::de::Error::custom)
    }
}

/// variant → slot → allowed versions. A missing entry denies deployment.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DependencyMatrix {
    entries: BTreeMap<String, BTreeMap<String, VersionConstraint>>,
}

impl DependencyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn insert(
        &mut self,
        variant_id: impl Into<String>,
        slot_name: impl Into<String>,
        constraint: VersionConstraint,
    ) {
        self.entries
            .entry(variant_id.into())
            .or_default()
            .insert(slot_name.into(), constraint);
    }

    pub fn constraint(&self, variant_id: &str, slot_name: &str) -> Option<&VersionConstraint> {
        self.entries.get(variant_id)?.get(slot_name)
    }

    pub fn variants(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Upgrade,
    Rollback,
}

/// One slot's install step, in the wire shape used by the update protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateAction {
    #[serde(rename = "slot")]
    pub slot_name: String,
    pub artifact_id: String,
    #[serde(rename = "from")]
    pub from_version: SemanticVersion,
    #[serde(rename = "to")]
    pub to_version: SemanticVersion,
    pub digest: ContentDigest,
    #[serde(rename = "size")]
    pub size_bytes: u64,
    pub direction: Direction,
    pub download_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedded_model: Option<ArtifactRef>,
}

impl UpdateAction {
    fn from_artifact(
        artifact: &ArtifactDescriptor,
        from_version: SemanticVersion,
        direction: Direction,
    ) -> Self {
        Self {
            slot_name: artifact.slot_name.clone(),
            artifact_id: artifact.artifact_id.clone(),
            from_version,
            to_version: artifact.version,
            digest: artifact.digest.clone(),
            size_bytes: artifact.size_bytes,
            direction,
            download_url: blob_path(&artifact.digest),
            embedded_model: artifact.embedded_model.clone(),
        }
    }
}

/// Server-relative download location of a blob.
pub fn blob_path(digest: &ContentDigest) -> String {
    format!("/api/v1/blobs/{}", digest.hex())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateManifest {
    pub manifest_id: String,
    pub vehicle_id: String,
    pub actions: Vec<UpdateAction>,
    pub created_at: Millis,
}

impl UpdateManifest {
    /// The id is derived from `scope`, the vehicle and the actions, so the same
    /// offer always carries the same id.
    pub fn new(
        scope: &str,
        vehicle_id: &str,
        actions: Vec<UpdateAction>,
        created_at: Millis,
    ) -> Self {
        let body = serde_json::to_vec(&(scope, vehicle_id, &actions))
            .expect("actions serialize to json");
        let manifest_id = format!("m-{}", &compute_digest(&body).hex()[..20]);
        Self {
            manifest_id,
            vehicle_id: vehicle_id.to_string(),
            actions,
            created_at,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn action(&self, slot: &str) -> Option<&UpdateAction> {
        self.actions.iter().find(|a| a.slot_name == slot)
    }
}

/// Pre-stored rollback targets: variant → slot → version.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RollbackPins {
    pins: BTreeMap<String, BTreeMap<String, SemanticVersion>>,
}

impl RollbackPins {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, variant_id: &str, slot_name: &str, version: SemanticVersion) {
        self.pins
            .entry(variant_id.to_string())
            .or_default()
            .insert(slot_name.to_string(), version);
    }

    pub fn get(&self, variant_id: &str, slot_name: &str) -> Option<SemanticVersion> {
        self.pins.get(variant_id)?.get(slot_name).copied()
    }

    pub fn for_variant(&self, variant_id: &str) -> impl Iterator<Item = (&str, SemanticVersion)> {
        self.pins
            .get(variant_id)
            .into_iter()
            .flatten()
            .map(|(slot, v)| (slot.as_str(), *v))
    }

    pub fn has_variant(&self, variant_id: &str) -> bool {
        self.pins.get(variant_id).is_some_and(|m| !m.is_empty())
    }

    pub fn is_empty(&self) -> bool {
        self.pins.values().all(BTreeMap::is_empty)
    }
}

/// Why an artifact may not go to a vehicle.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Incompatibility {
    #[error("unknown slot {0:?}")]
    UnknownSlot(String),
    #[error("kind mismatch: slot {slot:?} holds {slot_kind}, artifact is {artifact_kind}")]
    KindMismatch {
        slot: String,
        slot_kind: ArtifactKind,
        artifact_kind: ArtifactKind,
    },
    #[error("matrix constraint: no entry for variant {variant:?} slot {slot:?}")]
    NoMatrixEntry { variant: String, slot: String },
    #[error("matrix constraint: version {version} not allowed for variant {variant:?} slot {slot:?}")]
    MatrixConstraint {
        variant: String,
        slot: String,
        version: SemanticVersion,
    },
    #[error("hardware requirement: {0}")]
    Requirement(#[from] RequirementMismatch),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("rollback pin for slot {slot:?} references version {version} absent from the catalog")]
    PinNotInCatalog {
        slot: String,
        version: SemanticVersion,
    },
}

pub fn check_compatibility(
    artifact: &ArtifactDescriptor,
    profile: &VehicleProfile,
    matrix: &DependencyMatrix,
) -> Result<(), Incompatibility> {
    let slot = artifact.slot_name.as_str();
    let slot_kind = profile
        .slot_kind(slot)
        .ok_or_else(|| Incompatibility::UnknownSlot(slot.to_string()))?;
    if slot_kind != artifact.kind {
        return Err(Incompatibility::KindMismatch {
            slot: slot.to_string(),
            slot_kind,
            artifact_kind: artifact.kind,
        });
    }
    let constraint = matrix.constraint(&profile.variant_id, slot).ok_or_else(|| {
        Incompatibility::NoMatrixEntry {
            variant: profile.variant_id.clone(),
            slot: slot.to_string(),
        }
    })?;
    if !constraint.satisfied_by(artifact.version) {
        return Err(Incompatibility::MatrixConstraint {
            variant: profile.variant_id.clone(),
            slot: slot.to_string(),
            version: artifact.version,
        });
    }
    requirement_matches(&artifact.requirement, profile, slot)?;
    Ok(())
}

/// Highest version wins; ties go to the lexicographically smallest id.
pub fn select_best<'a, I>(candidates: I) -> Result<&'a ArtifactDescriptor, ResolveError>
where
    I: IntoIterator<Item = &'a ArtifactDescriptor>,
{
    candidates
        .into_iter()
        .reduce(|best, c| {
            let better = c.version > best.version
                || (c.version == best.version && c.artifact_id < best.artifact_id);
            if better {
                c
            } else {
                best
            }
        })
        .ok_or(ResolveError::NoCandidates)
}

/// Upgrade actions for every slot whose newest compatible artifact is newer
/// than what is installed. Incompatible catalog entries are skipped.
pub fn resolve_updates(
    profile: &VehicleProfile,
    catalog: &[ArtifactDescriptor],
    matrix: &DependencyMatrix,
) -> UpdateManifest {
    let actions = profile
        .slots()
        .iter()
        .filter_map(|slot| {
            let installed = profile.installed_version(&slot.name)?;
            let best = select_best(catalog.iter().filter(|a| {
                a.slot_name == slot.name && check_compatibility(a, profile, matrix).is_ok()
            }))
            .ok()?;
            (best.version > installed)
                .then(|| UpdateAction::from_artifact(best, installed, Direction::Upgrade))
        })
        .collect();
    UpdateManifest::new("", &profile.vehicle_id, actions, 0)
}

/// Actions moving every pinned slot of the vehicle's variant to its pin.
///
/// A pin below the installed version yields a `ROLLBACK`; a pin above it
/// yields an `UPGRADE`, so direction always agrees with version order.
pub fn resolve_rollback(
    profile: &VehicleProfile,
    pins: &RollbackPins,
    catalog: &[ArtifactDescriptor],
) -> Result<UpdateManifest, ResolveError> {
    let mut actions = Vec::new();
    for slot in profile.slots() {
        let Some(pin) = pins.get(&profile.variant_id, &slot.name) else {
            continue;
        };
        let target = select_best(
            catalog
                .iter()
                .filter(|a| a.slot_name == slot.name && a.version == pin && a.kind == slot.kind),
        )
        .map_err(|_| ResolveError::PinNotInCatalog {
            slot: slot.name.clone(),
            version: pin,
        })?;
        let installed = profile
            .installed_version(&slot.name)
            .expect("slot listed by profile");
        if installed != pin {
            let direction = if pin < installed {
                Direction::Rollback
            } else {
                Direction::Upgrade
            };
            actions.push(UpdateAction::from_artifact(target, installed, direction));
        }
    }
    Ok(UpdateManifest::new("", &profile.vehicle_id, actions, 0))
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Upgrade => "UPGRADE",
            Direction::Rollback => "ROLLBACK",
        })
    }
}
