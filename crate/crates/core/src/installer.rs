//! Simulated deployment targets: ECU flashing, a container runtime for
//! control services, and model mounts.
//!
//! Every installer is atomic per slot: a failure leaves the slot exactly as
//! it was. Each slot keeps one inactive bank so it can revert offline.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::{compute_digest, ContentDigest};
use crate::image::{self, ImageError};
use crate::model::{ArtifactKind, ArtifactRef, ModelMetadata, VehicleProfile};
use crate::version::SemanticVersion;
use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstallStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallerOutcome {
    pub status: InstallStatus,
    pub detail: String,
    pub duration_ms: Millis,
}

impl InstallerOutcome {
    fn success(detail: impl Into<String>, duration_ms: Millis) -> Self {
        Self {
            status: InstallStatus::Success,
            detail: detail.into(),
            duration_ms,
        }
    }

    fn failure(detail: impl Into<String>, duration_ms: Millis) -> Self {
        Self {
            status: InstallStatus::Failure,
            detail: detail.into(),
            duration_ms,
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == InstallStatus::Success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstallFault {
    /// The installer itself errors out before touching the slot.
    Crash,
    /// The new image starts but fails its health probe.
    ProbeFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledFault {
    pub slot: String,
    /// 1-based install attempt on that slot.
    pub attempt: u32,
    pub fault: InstallFault,
}

/// Deterministic fault schedule: explicit `(slot, attempt)` entries plus an
/// optional seeded random failure rate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    pub scheduled: Vec<ScheduledFault>,
    pub random_rate: f64,
    pub seed: u64,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn at(mut self, slot: &str, attempt: u32, fault: InstallFault) -> Self {
        self.scheduled.push(ScheduledFault {
            slot: slot.to_string(),
            attempt,
            fault,
        });
        self
    }
}

/// One image bank of a slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bank {
    pub artifact_id: String,
    pub version: SemanticVersion,
    /// `None` for the factory image, whose bytes are not tracked.
    pub digest: Option<ContentDigest>,
    #[serde(skip)]
    pub image: Vec<u8>,
    pub model: Option<MountedModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MountedModel {
    pub artifact: ArtifactRef,
    pub metadata: ModelMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotState {
    pub kind: ArtifactKind,
    /// Present on ECU slots only; never changed by an install.
    pub hardware_version: Option<SemanticVersion>,
    pub active: Bank,
    pub previous: Option<Bank>,
    pub running: bool,
}

/// What an installer needs to place one artifact.
#[derive(Debug, Clone, Copy)]
pub struct InstallRequest<'a> {
    pub slot_name: &'a str,
    pub artifact_id: &'a str,
    pub to_version: SemanticVersion,
    pub payload: &'a [u8],
    pub embedded_model: Option<&'a ArtifactRef>,
}

/// Installer and local-revert access as seen by the client agent.
pub trait InstallTarget {
    fn install(&mut self, kind: ArtifactKind, request: &InstallRequest<'_>) -> InstallerOutcome;
    fn revert(&mut self, slot: &str) -> InstallerOutcome;
}

/// In-memory vehicle hardware.
#[derive(Debug, Clone)]
pub struct SimulatedDevice {
    vehicle_id: String,
    slots: BTreeMap<String, SlotState>,
    faults: FaultPlan,
    attempts: BTreeMap<String, u32>,
    rng: ChaCha8Rng,
}

impl SimulatedDevice {
    pub fn from_profile(profile: &VehicleProfile, faults: FaultPlan) -> Self {
        let factory = |artifact_id: &str, version| Bank {
            artifact_id: artifact_id.to_string(),
            version,
            digest: None,
            image: Vec::new(),
            model: None,
        };
        let mut slots = BTreeMap::new();
        for ecu in &profile.ecus {
            slots.insert(
                ecu.slot_name.clone(),
                SlotState {
                    kind: ArtifactKind::FirmwareBinary,
                    hardware_version: Some(ecu.hardware_version),
                    active: factory("factory", ecu.installed_firmware),
                    previous: None,
                    running: true,
                },
            );
        }
        for (name, r) in &profile.installed_services {
            slots.insert(
                name.clone(),
                SlotState {
                    kind: ArtifactKind::ContainerImage,
                    hardware_version: None,
                    active: factory(&r.artifact_id, r.version),
                    previous: None,
                    running: true,
                },
            );
        }
        for (name, r) in &profile.installed_models {
            slots.insert(
                name.clone(),
                SlotState {
                    kind: ArtifactKind::AiModel,
                    hardware_version: None,
                    active: factory(&r.artifact_id, r.version),
                    previous: None,
                    running: true,
                },
            );
        }
        let rng = ChaCha8Rng::seed_from_u64(faults.seed);
        Self {
            vehicle_id: profile.vehicle_id.clone(),
            slots,
            faults,
            attempts: BTreeMap::new(),
            rng,
        }
    }

    pub fn vehicle_id(&self) -> &str {
        &self.vehicle_id
    }

    pub fn slots(&self) -> &BTreeMap<String, SlotState> {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&SlotState> {
        self.slots.get(name)
    }

    pub fn installed_version(&self, slot: &str) -> Option<SemanticVersion> {
        self.slots.get(slot).map(|s| s.active.version)
    }

    /// Detectable classes of the model mounted in `slot` (directly or
    /// embedded in a container).
    pub fn model_classes(&self, slot: &str) -> Option<&[String]> {
        self.slots
            .get(slot)?
            .active
            .model
            .as_ref()
            .map(|m| m.metadata.detectable_classes.as_slice())
    }

    pub fn add_faults(&mut self, faults: impl IntoIterator<Item = ScheduledFault>) {
        self.faults.scheduled.extend(faults);
    }

    fn injected_fault(&mut self, slot: &str) -> Option<InstallFault> {
        let attempt = self.attempts.entry(slot.to_string()).or_insert(0);
        *attempt += 1;
        let attempt = *attempt;
        if let Some(f) = self
            .faults
            .scheduled
            .iter()
            .find(|f| f.slot == slot && f.attempt == attempt)
        {
            return Some(f.fault);
        }
        if self.faults.random_rate > 0.0 && self.rng.gen_bool(self.faults.random_rate.min(1.0)) {
            return Some(InstallFault::Crash);
        }
        None
    }

    fn slot_for(&self, name: &str, kind: ArtifactKind) -> Result<&SlotState, String> {
        let slot = self
            .slots
            .get(name)
            .ok_or_else(|| format!("unknown slot {name:?}"))?;
        if slot.kind != kind {
            return Err(format!("slot {name:?} holds {}, not {kind}", slot.kind));
        }
        Ok(slot)
    }

    fn commit(&mut self, name: &str, bank: Bank) {
        let slot = self.slots.get_mut(name).expect("slot checked before commit");
        let old = std::mem::replace(&mut slot.active, bank);
        slot.previous = Some(old);
        slot.running = true;
    }

    pub fn flash_firmware(&mut self, req: &InstallRequest<'_>) -> InstallerOutcome {
        let duration = 50 + req.payload.len() as Millis / 1024;
        if let Err(e) = self.slot_for(req.slot_name, ArtifactKind::FirmwareBinary) {
            return InstallerOutcome::failure(e, 0);
        }
        if self.injected_fault(req.slot_name).is_some() {
            return InstallerOutcome::failure("injected flash fault", duration);
        }
        if let Err(e) = validate(ArtifactKind::FirmwareBinary, req.payload, req.to_version) {
            return InstallerOutcome::failure(e, duration);
        }
        self.commit(req.slot_name, bank_for(req, None));
        InstallerOutcome::success(format!("flashed {}", req.to_version), duration)
    }

    pub fn deploy_container(&mut self, req: &InstallRequest<'_>) -> InstallerOutcome {
        let duration = 200;
        let current = match self.slot_for(req.slot_name, ArtifactKind::ContainerImage) {
            Ok(slot) => slot,
            Err(e) => return InstallerOutcome::failure(e, 0),
        };
        let digest = compute_digest(req.payload);
        if current.active.version == req.to_version
            && current.active.digest.as_ref() == Some(&digest)
            && current.active.model.is_none()
        {
            return InstallerOutcome::success("already running", 0);
        }
        let fault = self.injected_fault(req.slot_name);
        if fault == Some(InstallFault::Crash) {
            return InstallerOutcome::failure("injected runtime fault", duration);
        }
        // The service is restarted on the new image; the probe decides
        // whether it stays or the old image is restored.
        let probe = validate(ArtifactKind::ContainerImage, req.payload, req.to_version);
        match (probe, fault) {
            (Ok(_), None) => {
                self.commit(req.slot_name, bank_for(req, None));
                InstallerOutcome::success(format!("service running {}", req.to_version), duration)
            }
            (Err(e), _) => InstallerOutcome::failure(
                format!("health probe failed ({e}); reverted"),
                duration,
            ),
            (Ok(_), Some(_)) => {
                InstallerOutcome::failure("health probe failed (injected); reverted", duration)
            }
        }
    }

    /// Mounts a standalone model, or a container that embeds one.
    pub fn mount_model(&mut self, kind: ArtifactKind, req: &InstallRequest<'_>) -> InstallerOutcome {
        let duration = 100 + req.payload.len() as Millis / 4096;
        if let Err(e) = self.slot_for(req.slot_name, kind) {
            return InstallerOutcome::failure(e, 0);
        }
        let fault = self.injected_fault(req.slot_name);
        if fault.is_some() {
            return InstallerOutcome::failure("injected mount fault", duration);
        }
        let mounted = match kind {
            ArtifactKind::AiModel => decode_model(req.payload, req.to_version).map(|meta| MountedModel {
                artifact: ArtifactRef::new(req.artifact_id, req.to_version),
                metadata: meta,
            }),
            ArtifactKind::ContainerImage => {
                let Some(reference) = req.embedded_model else {
                    return InstallerOutcome::failure("container carries no embedded model", 0);
                };
                image::split_composed(req.payload)
                    .map_err(|e| format!("split failed: {e}"))
                    .and_then(|(container, model)| {
                        validate(ArtifactKind::ContainerImage, container, req.to_version)
                            .map_err(|e| format!("container part: {e}"))?;
                        decode_model(model, reference.version).map(|meta| MountedModel {
                            artifact: reference.clone(),
                            metadata: meta,
                        })
                    })
            }
            ArtifactKind::FirmwareBinary => Err("firmware cannot be mounted".to_string()),
        };
        match mounted {
            Ok(model) => {
                let classes = model.metadata.detectable_classes.len();
                self.commit(req.slot_name, bank_for(req, Some(model)));
                InstallerOutcome::success(
                    format!("mounted {} ({classes} classes)", req.to_version),
                    duration,
                )
            }
            Err(e) => InstallerOutcome::failure(e, duration),
        }
    }

    /// Writes slot images and a state summary under `dir` for inspection.
    pub fn export(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, slot) in &self.slots {
            let file = name.replace(|c: char| !c.is_ascii_alphanumeric(), "_");
            fs::write(dir.join(format!("{file}.img")), &slot.active.image)?;
        }
        let summary = serde_json::to_vec_pretty(&self.slots).map_err(io::Error::other)?;
        fs::write(dir.join("state.json"), summary)
    }
}

impl InstallTarget for SimulatedDevice {
    fn install(&mut self, kind: ArtifactKind, request: &InstallRequest<'_>) -> InstallerOutcome {
        match kind {
            ArtifactKind::FirmwareBinary => self.flash_firmware(request),
            ArtifactKind::ContainerImage if request.embedded_model.is_some() => {
                self.mount_model(kind, request)
            }
            ArtifactKind::ContainerImage => self.deploy_container(request),
            ArtifactKind::AiModel => self.mount_model(kind, request),
        }
    }

    fn revert(&mut self, name: &str) -> InstallerOutcome {
        let Some(slot) = self.slots.get_mut(name) else {
            return InstallerOutcome::failure(format!("unknown slot {name:?}"), 0);
        };
        match slot.previous.take() {
            Some(bank) => {
                let version = bank.version;
                slot.active = bank;
                slot.running = true;
                InstallerOutcome::success(format!("reverted to {version}"), 20)
            }
            None => InstallerOutcome::failure("no previous image", 0),
        }
    }
}

fn bank_for(req: &InstallRequest<'_>, model: Option<MountedModel>) -> Bank {
    Bank {
        artifact_id: req.artifact_id.to_string(),
        version: req.to_version,
        digest: Some(compute_digest(req.payload)),
        image: req.payload.to_vec(),
        model,
    }
}

fn validate<'a>(
    kind: ArtifactKind,
    payload: &'a [u8],
    expected: SemanticVersion,
) -> Result<image::Image<'a>, String> {
    let img = image::decode_image(kind, payload).map_err(|e| e.to_string())?;
    if img.version != expected {
        return Err(format!("image declares {} but {expected} was requested", img.version));
    }
    Ok(img)
}

fn decode_model(payload: &[u8], expected: SemanticVersion) -> Result<ModelMetadata, String> {
    let img = validate(ArtifactKind::AiModel, payload, expected)?;
    let (meta, _weights) =
        image::decode_model_body(img.body).map_err(|e: ImageError| e.to_string())?;
    Ok(meta)
}
