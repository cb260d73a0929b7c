//! Artifact and vehicle descriptions shared by every other module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::ContentDigest;
use crate::version::SemanticVersion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArtifactKind {
    FirmwareBinary,
    ContainerImage,
    AiModel,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 3] = [
        ArtifactKind::FirmwareBinary,
        ArtifactKind::ContainerImage,
        ArtifactKind::AiModel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::FirmwareBinary => "FIRMWARE_BINARY",
            ArtifactKind::ContainerImage => "CONTAINER_IMAGE",
            ArtifactKind::AiModel => "AI_MODEL",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named updatable location on a vehicle.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentSlot {
    pub name: String,
    pub kind: ArtifactKind,
}

/// `(artifact_id, version)` pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub artifact_id: String,
    pub version: SemanticVersion,
}

impl ArtifactRef {
    pub fn new(artifact_id: impl Into<String>, version: SemanticVersion) -> Self {
        Self {
            artifact_id: artifact_id.into(),
            version,
        }
    }
}

impl fmt::Display for ArtifactRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.artifact_id, self.version)
    }
}

/// Hardware a vehicle must offer before an artifact may be installed.
/// Every absent field is vacuously satisfied.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareRequirement {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hardware_model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_hardware_version: Option<SemanticVersion>,
    pub required_sensors: BTreeSet<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_compute_tier: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RequirementConflict {
    #[error("hardware_model conflict: {0:?} vs {1:?}")]
    HardwareModel(String, String),
}

impl HardwareRequirement {
    pub fn is_empty(&self) -> bool {
        self.hardware_model.is_none()
            && self.min_hardware_version.is_none()
            && self.required_sensors.is_empty()
            && self.min_compute_tier.is_none()
    }

    /// Field-wise union keeping the stricter value of each field.
    pub fn union(&self, other: &Self) -> Result<Self, RequirementConflict> {
        let hardware_model = match (&self.hardware_model, &other.hardware_model) {
            (Some(a), Some(b)) if a != b => {
                return Err(RequirementConflict::HardwareModel(a.clone(), b.clone()))
            }
            (a, b) => a.clone().or_else(|| b.clone()),
        };
        Ok(Self {
            hardware_model,
            min_hardware_version: self.min_hardware_version.max(other.min_hardware_version),
            required_sensors: self
                .required_sensors
                .union(&other.required_sensors)
                .cloned()
                .collect(),
            min_compute_tier: self.min_compute_tier.max(other.min_compute_tier),
        })
    }
}

/// Why a hardware requirement is not met.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RequirementMismatch {
    #[error("hardware_model {required:?} not present on vehicle")]
    HardwareModel { required: String },
    #[error("min_hardware_version {required} not met by slot {slot:?} (has {available:?})")]
    HardwareVersion {
        slot: String,
        required: SemanticVersion,
        available: Option<SemanticVersion>,
    },
    #[error("required_sensors missing {missing:?}")]
    Sensors { missing: BTreeSet<String> },
    #[error("compute_tier {available} below required {required}")]
    ComputeTier { required: u32, available: u32 },
}

/// Performance and capability metadata carried by AI model artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub accuracy: f64,
    pub evaluation_dataset: String,
    pub detectable_classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDescriptor {
    pub artifact_id: String,
    pub kind: ArtifactKind,
    pub slot_name: String,
    pub version: SemanticVersion,
    pub digest: ContentDigest,
    pub size_bytes: u64,
    #[serde(default)]
    pub requirement: HardwareRequirement,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_meta: Option<ModelMetadata>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedded_model: Option<ArtifactRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DescriptorError {
    #[error("artifact_id must not be empty")]
    EmptyId,
    #[error("slot_name must not be empty")]
    EmptySlot,
    #[error("model_meta must be present exactly when kind is AI_MODEL")]
    ModelMetaMismatch,
    #[error("accuracy must lie in [0, 1]")]
    AccuracyRange,
    #[error("embedded_model is only permitted on CONTAINER_IMAGE artifacts")]
    EmbeddedModelKind,
}

impl ArtifactDescriptor {
    pub fn reference(&self) -> ArtifactRef {
        ArtifactRef::new(self.artifact_id.clone(), self.version)
    }

    /// Local well-formedness. Cross-record checks (uniqueness, embedded model
    /// existence) belong to the store.
    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.artifact_id.is_empty() {
            return Err(DescriptorError::EmptyId);
        }
        if self.slot_name.is_empty() {
            return Err(DescriptorError::EmptySlot);
        }
        if self.model_meta.is_some() != (self.kind == ArtifactKind::AiModel) {
            return Err(DescriptorError::ModelMetaMismatch);
        }
        if let Some(meta) = &self.model_meta {
            if !(0.0..=1.0).contains(&meta.accuracy) {
                return Err(DescriptorError::AccuracyRange);
            }
        }
        if self.embedded_model.is_some() && self.kind != ArtifactKind::ContainerImage {
            return Err(DescriptorError::EmbeddedModelKind);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcuDescriptor {
    pub slot_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware_model: Option<String>,
    pub hardware_version: SemanticVersion,
    pub installed_firmware: SemanticVersion,
}

/// A vehicle's variant identity, hardware inventory and installed software.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleProfile {
    pub vehicle_id: String,
    pub variant_id: String,
    #[serde(default)]
    pub ecus: Vec<EcuDescriptor>,
    #[serde(default)]
    pub compute_tier: u32,
    /// Identifier of the central compute unit, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware_model: Option<String>,
    #[serde(default)]
    pub sensors: BTreeSet<String>,
    #[serde(default)]
    pub installed_services: BTreeMap<String, ArtifactRef>,
    #[serde(default)]
    pub installed_models: BTreeMap<String, ArtifactRef>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("vehicle_id must not be empty")]
    EmptyId,
    #[error("slot name {0:?} appears more than once")]
    DuplicateSlot(String),
    #[error("unknown slot {0:?}")]
    UnknownSlot(String),
}

impl VehicleProfile {
    pub fn new(vehicle_id: impl Into<String>, variant_id: impl Into<String>) -> Self {
        Self {
            vehicle_id: vehicle_id.into(),
            variant_id: variant_id.into(),
            ecus: Vec::new(),
            compute_tier: 0,
            hardware_model: None,
            sensors: BTreeSet::new(),
            installed_services: BTreeMap::new(),
            installed_models: BTreeMap::new(),
            tags: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.vehicle_id.is_empty() {
            return Err(ProfileError::EmptyId);
        }
        let mut seen = BTreeSet::new();
        let names = self
            .ecus
            .iter()
            .map(|e| e.slot_name.as_str())
            .chain(self.installed_services.keys().map(String::as_str))
            .chain(self.installed_models.keys().map(String::as_str));
        for name in names {
            if !seen.insert(name) {
                return Err(ProfileError::DuplicateSlot(name.to_string()));
            }
        }
        Ok(())
    }

    /// All slots in a stable order: ECUs as listed, then services, then models.
    pub fn slots(&self) -> Vec<ComponentSlot> {
        let ecus = self.ecus.iter().map(|e| ComponentSlot {
            name: e.slot_name.clone(),
            kind: ArtifactKind::FirmwareBinary,
        });
        let services = self.installed_services.keys().map(|n| ComponentSlot {
            name: n.clone(),
            kind: ArtifactKind::ContainerImage,
        });
        let models = self.installed_models.keys().map(|n| ComponentSlot {
            name: n.clone(),
            kind: ArtifactKind::AiModel,
        });
        ecus.chain(services).chain(models).collect()
    }

    pub fn slot_kind(&self, slot: &str) -> Option<ArtifactKind> {
        if self.ecu(slot).is_some() {
            Some(ArtifactKind::FirmwareBinary)
        } else if self.installed_services.contains_key(slot) {
            Some(ArtifactKind::ContainerImage)
        } else if self.installed_models.contains_key(slot) {
            Some(ArtifactKind::AiModel)
        } else {
            None
        }
    }

    pub fn ecu(&self, slot: &str) -> Option<&EcuDescriptor> {
        self.ecus.iter().find(|e| e.slot_name == slot)
    }

    pub fn installed_version(&self, slot: &str) -> Option<SemanticVersion> {
        if let Some(ecu) = self.ecu(slot) {
            return Some(ecu.installed_firmware);
        }
        self.installed_services
            .get(slot)
            .or_else(|| self.installed_models.get(slot))
            .map(|r| r.version)
    }

    /// Installed version per slot, the shape carried in polls.
    pub fn installed_state(&self) -> BTreeMap<String, SemanticVersion> {
        self.slots()
            .into_iter()
            .filter_map(|s| self.installed_version(&s.name).map(|v| (s.name, v)))
            .collect()
    }

    /// Records a new installed version. ECU hardware versions are never touched.
    pub fn set_installed(
        &mut self,
        slot: &str,
        artifact_id: &str,
        version: SemanticVersion,
    ) -> Result<(), ProfileError> {
        if let Some(ecu) = self.ecus.iter_mut().find(|e| e.slot_name == slot) {
            ecu.installed_firmware = version;
            return Ok(());
        }
        let entry = self
            .installed_services
            .get_mut(slot)
            .or_else(|| self.installed_models.get_mut(slot))
            .ok_or_else(|| ProfileError::UnknownSlot(slot.to_string()))?;
        *entry = ArtifactRef::new(artifact_id, version);
        Ok(())
    }

    /// Applies a reported installed-state map; unknown slots are ignored.
    pub fn with_installed_state(&self, state: &BTreeMap<String, SemanticVersion>) -> Self {
        let mut out = self.clone();
        for (slot, version) in state {
            if let Some(ecu) = out.ecus.iter_mut().find(|e| &e.slot_name == slot) {
                ecu.installed_firmware = *version;
            } else if let Some(r) = out
                .installed_services
                .get_mut(slot)
                .or_else(|| out.installed_models.get_mut(slot))
            {
                r.version = *version;
            }
        }
        out
    }

    pub fn hardware_identifiers(&self) -> BTreeSet<&str> {
        self.hardware_model
            .iter()
            .chain(self.ecus.iter().filter_map(|e| e.hardware_model.as_ref()))
            .map(String::as_str)
            .collect()
    }
}

/// Checks `req` against `profile` for an install into `target_slot`.
///
/// `min_hardware_version` is compared with the hardware version of the target
/// ECU; slots that are not ECUs carry no hardware version and never satisfy it.
pub fn requirement_matches(
    req: &HardwareRequirement,
    profile: &VehicleProfile,
    target_slot: &str,
) -> Result<(), RequirementMismatch> {
    if let Some(model) = &req.hardware_model {
        if !profile.hardware_identifiers().contains(model.as_str()) {
            return Err(RequirementMismatch::HardwareModel {
                required: model.clone(),
            });
        }
    }
    if let Some(min) = req.min_hardware_version {
        let available = profile.ecu(target_slot).map(|e| e.hardware_version);
        if available.is_none_or(|hw| hw < min) {
            return Err(RequirementMismatch::HardwareVersion {
                slot: target_slot.to_string(),
                required: min,
                available,
            });
        }
    }
    let missing: BTreeSet<String> = req
        .required_sensors
        .difference(&profile.sensors)
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(RequirementMismatch::Sensors { missing });
    }
    if let Some(min) = req.min_compute_tier {
        if profile.compute_tier < min {
            return Err(RequirementMismatch::ComputeTier {
                required: min,
                available: profile.compute_tier,
            });
        }
    }
    Ok(())
}
