//! In-vehicle client: a tick-driven state machine that polls the cloud,
//! downloads, verifies, installs and reports.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{
    ActionOutcome, ActionStatus, InstallReport, PollRequest, PollResponse, RegisterAck, ReportAck,
};
use crate::digest::ContentDigest;
use crate::installer::{InstallRequest, InstallStatus, InstallTarget};
use crate::model::VehicleProfile;
use crate::resolver::{UpdateAction, UpdateManifest};
use crate::version::SemanticVersion;
use crate::Millis;

pub const DEFAULT_POLL_INTERVAL_MS: Millis = 5_000;
pub const MAX_REPORT_ATTEMPTS: u32 = 3;

/// Transport failure seen by the agent.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum LinkError {
    #[error("cloud unreachable: {0}")]
    Unreachable(String),
    #[error("cloud refused request ({status}): {message}")]
    Refused { status: u16, message: String },
}

/// Everything the agent needs from the cloud side.
pub trait CloudLink {
    fn register(&mut self, profile: &VehicleProfile) -> Result<RegisterAck, LinkError>;
    fn poll(&mut self, request: &PollRequest) -> Result<PollResponse, LinkError>;
    fn download(&mut self, action: &UpdateAction) -> Result<Vec<u8>, LinkError>;
    fn report(&mut self, report: &InstallReport) -> Result<ReportAck, LinkError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub profile: VehicleProfile,
    pub server_url: String,
    pub token: String,
    #[serde(default = "default_poll_s")]
    pub poll_interval_s: f64,
}

fn default_poll_s() -> f64 {
    DEFAULT_POLL_INTERVAL_MS as f64 / 1000.0
}

impl AgentConfig {
    pub fn poll_interval_ms(&self) -> Millis {
        (self.poll_interval_s * 1000.0).round().max(1.0) as Millis
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Idle,
    Checking,
    Downloading,
    Verifying,
    Installing,
    Reporting,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("phase serializes");
        f.write_str(s.as_str().expect("unit variant"))
    }
}

/// Image a slot runs, as far as the agent knows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotImage {
    pub artifact_id: String,
    pub version: SemanticVersion,
    pub digest: Option<ContentDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum Effect {
    Register { ok: bool },
    Poll { result: PollResult },
    ManifestAccepted { manifest_id: String },
    ManifestRejected { manifest_id: String, reason: String },
    Download { slot: String, ok: bool, bytes: usize },
    Verify { slot: String, ok: bool },
    Install { slot: String, status: InstallStatus, detail: String },
    Report { manifest_id: String, attempt: u32, ok: bool },
    ReportDropped { manifest_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PollResult {
    UpToDate,
    Update,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("no previous image recorded for slot {0:?}")]
    NoHistory(String),
    #[error("revert of slot {slot:?} failed: {detail}")]
    RevertFailed { slot: String, detail: String },
}

/// Accepts a manifest iff it is ours and every action starts from what is
/// installed locally.
pub fn verify_manifest(manifest: &UpdateManifest, local: &VehicleProfile) -> Result<(), String> {
    if manifest.vehicle_id != local.vehicle_id {
        return Err(format!(
            "manifest addressed to {:?}, not {:?}",
            manifest.vehicle_id, local.vehicle_id
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    for a in &manifest.actions {
        if !seen.insert(a.slot_name.as_str()) {
            return Err(format!("malformed manifest: slot {:?} appears twice", a.slot_name));
        }
        match local.installed_version(&a.slot_name) {
            None => return Err(format!("unknown slot {:?}", a.slot_name)),
            Some(installed) if installed != a.from_version => {
                return Err(format!(
                    "state divergence on {:?}: installed {installed}, manifest expects {}",
                    a.slot_name, a.from_version
                ))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

pub fn verify_payload(payload: &[u8], expected: &ContentDigest) -> bool {
    expected.matches(payload)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub phase: Phase,
    pub current_manifest: Option<UpdateManifest>,
    pub local_profile: VehicleProfile,
    pub slot_history: BTreeMap<String, SlotImage>,
    pub images: BTreeMap<String, SlotImage>,
    pub poll_interval_ms: Millis,
    pub next_poll_at: Millis,
    pub registered: bool,
    pub catalog_revision: u64,
    #[serde(skip)]
    work: Work,
}

/// Per-manifest scratch state.
#[derive(Debug, Clone, PartialEq, Default)]
struct Work {
    response: Option<Result<PollResponse, LinkError>>,
    payloads: BTreeMap<String, Vec<u8>>,
    outcomes: BTreeMap<String, ActionOutcome>,
    /// Actions at or beyond this index are not processed further.
    halt: Option<usize>,
    report: Option<InstallReport>,
    report_attempts: u32,
}

impl Agent {
    pub fn new(profile: VehicleProfile, poll_interval_ms: Millis) -> Self {
        let mut images = BTreeMap::new();
        for ecu in &profile.ecus {
            images.insert(
                ecu.slot_name.clone(),
                SlotImage {
                    artifact_id: "factory".into(),
                    version: ecu.installed_firmware,
                    digest: None,
                },
            );
        }
        for (slot, r) in profile.installed_services.iter().chain(&profile.installed_models) {
            images.insert(
                slot.clone(),
                SlotImage {
                    artifact_id: r.artifact_id.clone(),
                    version: r.version,
                    digest: None,
                },
            );
        }
        Self {
            phase: Phase::Idle,
            current_manifest: None,
            local_profile: profile,
            slot_history: BTreeMap::new(),
            images,
            poll_interval_ms,
            next_poll_at: 0,
            registered: false,
            catalog_revision: 0,
            work: Work::default(),
        }
    }

    pub fn from_config(config: &AgentConfig) -> Self {
        Self::new(config.profile.clone(), config.poll_interval_ms())
    }

    pub fn vehicle_id(&self) -> &str {
        &self.local_profile.vehicle_id
    }

    /// When the agent next has something to do.
    pub fn next_wakeup(&self, now: Millis) -> Millis {
        match self.phase {
            Phase::Idle => self.next_poll_at.max(now),
            _ => now,
        }
    }

    /// Executes exactly one phase step.
    pub fn tick(
        &mut self,
        now: Millis,
        link: &mut dyn CloudLink,
        target: &mut dyn InstallTarget,
    ) -> Vec<Effect> {
        let mut effects = Vec::new();
        match self.phase {
            Phase::Idle => self.step_idle(now, link, &mut effects),
            Phase::Checking => self.step_checking(now, link, &mut effects),
            Phase::Downloading => self.step_downloading(link, &mut effects),
            Phase::Verifying => self.step_verifying(&mut effects),
            Phase::Installing => self.step_installing(now, target, &mut effects),
            Phase::Reporting => self.step_reporting(now, link, &mut effects),
        }
        effects
    }

    fn go_idle(&mut self, now: Millis) {
        self.phase = Phase::Idle;
        self.current_manifest = None;
        self.work = Work::default();
        self.next_poll_at = now + self.poll_interval_ms;
    }

    fn step_idle(&mut self, now: Millis, link: &mut dyn CloudLink, effects: &mut Vec<Effect>) {
        if now < self.next_poll_at {
            return;
        }
        if !self.registered {
            let ack = link.register(&self.local_profile);
            effects.push(Effect::Register { ok: ack.is_ok() });
            match ack {
                Ok(ack) => {
                    self.registered = true;
                    self.catalog_revision = ack.catalog_revision;
                }
                Err(_) => {
                    self.next_poll_at = now + self.poll_interval_ms;
                    return;
                }
            }
        }
        let request = PollRequest {
            vehicle_id: self.local_profile.vehicle_id.clone(),
            installed: self.local_profile.installed_state(),
            catalog_revision: self.catalog_revision,
        };
        let response = link.poll(&request);
        effects.push(Effect::Poll {
            result: match &response {
                Ok(PollResponse::UpToDate { .. }) => PollResult::UpToDate,
                Ok(PollResponse::Update { .. }) => PollResult::Update,
                Err(_) => PollResult::Error,
            },
        });
        self.work.response = Some(response);
        self.phase = Phase::Checking;
    }

    fn step_checking(&mut self, now: Millis, link: &mut dyn CloudLink, effects: &mut Vec<Effect>) {
        let manifest = match self.work.response.take() {
            Some(Ok(PollResponse::Update {
                manifest,
                catalog_revision,
            })) => {
                self.catalog_revision = catalog_revision;
                manifest
            }
            Some(Ok(PollResponse::UpToDate { catalog_revision })) => {
                self.catalog_revision = catalog_revision;
                return self.go_idle(now);
            }
            Some(Err(_)) | None => return self.go_idle(now),
        };
        match verify_manifest(&manifest, &self.local_profile) {
            Ok(()) => {
                effects.push(Effect::ManifestAccepted {
                    manifest_id: manifest.manifest_id.clone(),
                });
                self.current_manifest = Some(manifest);
                self.phase = Phase::Downloading;
            }
            Err(reason) => {
                effects.push(Effect::ManifestRejected {
                    manifest_id: manifest.manifest_id.clone(),
                    reason: reason.clone(),
                });
                let report = InstallReport {
                    vehicle_id: self.local_profile.vehicle_id.clone(),
                    manifest_id: manifest.manifest_id.clone(),
                    outcomes: BTreeMap::new(),
                    digest_verified: false,
                    timestamp: now,
                    rejection: Some(reason),
                };
                let ok = link.report(&report).is_ok();
                effects.push(Effect::Report {
                    manifest_id: manifest.manifest_id,
                    attempt: 1,
                    ok,
                });
                self.go_idle(now);
            }
        }
    }

    fn actions(&self) -> &[UpdateAction] {
        &self.current_manifest.as_ref().expect("manifest in flight").actions
    }

    fn live(&self) -> usize {
        self.work.halt.unwrap_or(self.actions().len())
    }

    /// Records a failure at `index`; later actions are abandoned.
    fn fail_at(&mut self, index: usize, status: ActionStatus) {
        let actions = self.actions().to_vec();
        let a = &actions[index];
        for later in &actions[index..] {
            self.work.outcomes.remove(&later.slot_name);
            self.work.payloads.remove(&later.slot_name);
        }
        self.work.outcomes.insert(
            a.slot_name.clone(),
            ActionOutcome {
                status,
                from_version: a.from_version,
                resulting_version: a.from_version,
            },
        );
        self.work.halt = Some(index);
    }

    fn step_downloading(&mut self, link: &mut dyn CloudLink, effects: &mut Vec<Effect>) {
        let actions = self.actions().to_vec();
        for (ix, a) in actions.iter().enumerate() {
            match link.download(a) {
                Ok(bytes) => {
                    effects.push(Effect::Download {
                        slot: a.slot_name.clone(),
                        ok: true,
                        bytes: bytes.len(),
                    });
                    self.work.payloads.insert(a.slot_name.clone(), bytes);
                }
                Err(_) => {
                    effects.push(Effect::Download {
                        slot: a.slot_name.clone(),
                        ok: false,
                        bytes: 0,
                    });
                    self.fail_at(ix, ActionStatus::FailedDownload);
                    break;
                }
            }
        }
        self.phase = Phase::Verifying;
    }

    fn step_verifying(&mut self, effects: &mut Vec<Effect>) {
        let actions = self.actions().to_vec();
        for (ix, a) in actions.iter().enumerate().take(self.live()) {
            let ok = verify_payload(&self.work.payloads[&a.slot_name], &a.digest);
            effects.push(Effect::Verify {
                slot: a.slot_name.clone(),
                ok,
            });
            if !ok {
                self.fail_at(ix, ActionStatus::FailedIntegrity);
                break;
            }
        }
        self.phase = Phase::Installing;
    }

    fn step_installing(&mut self, now: Millis, target: &mut dyn InstallTarget, effects: &mut Vec<Effect>) {
        let actions = self.actions().to_vec();
        for (ix, a) in actions.iter().enumerate().take(self.live()) {
            let payload = self.work.payloads.remove(&a.slot_name).expect("verified payload");
            let outcome = self.apply_action(a, &payload, target, effects);
            if outcome.status == ActionStatus::Succeeded {
                self.work.outcomes.insert(a.slot_name.clone(), outcome);
            } else {
                self.fail_at(ix, outcome.status);
                break;
            }
        }
        let manifest = self.current_manifest.as_ref().expect("manifest in flight");
        let digest_verified = !self
            .work
            .outcomes
            .values()
            .any(|o| o.status == ActionStatus::FailedIntegrity);
        self.work.report = Some(InstallReport {
            vehicle_id: self.local_profile.vehicle_id.clone(),
            manifest_id: manifest.manifest_id.clone(),
            outcomes: self.work.outcomes.clone(),
            digest_verified,
            timestamp: now,
            rejection: None,
        });
        self.phase = Phase::Reporting;
    }

    fn step_reporting(&mut self, now: Millis, link: &mut dyn CloudLink, effects: &mut Vec<Effect>) {
        let report = self.work.report.clone().expect("report prepared");
        self.work.report_attempts += 1;
        let ok = link.report(&report).is_ok();
        effects.push(Effect::Report {
            manifest_id: report.manifest_id.clone(),
            attempt: self.work.report_attempts,
            ok,
        });
        if ok {
            self.go_idle(now);
        } else if self.work.report_attempts >= MAX_REPORT_ATTEMPTS {
            // The cloud reconciles from our reported state on the next poll.
            effects.push(Effect::ReportDropped {
                manifest_id: report.manifest_id,
            });
            self.go_idle(now);
        }
    }

    /// Installs one verified payload; local state moves only on success.
    pub fn apply_action(
        &mut self,
        action: &UpdateAction,
        payload: &[u8],
        target: &mut dyn InstallTarget,
        effects: &mut Vec<Effect>,
    ) -> ActionOutcome {
        let failed = ActionOutcome {
            status: ActionStatus::FailedInstall,
            from_version: action.from_version,
            resulting_version: action.from_version,
        };
        let Some(kind) = self.local_profile.slot_kind(&action.slot_name) else {
            return failed;
        };
        let request = InstallRequest {
            slot_name: &action.slot_name,
            artifact_id: &action.artifact_id,
            to_version: action.to_version,
            payload,
            embedded_model: action.embedded_model.as_ref(),
        };
        let result = target.install(kind, &request);
        effects.push(Effect::Install {
            slot: action.slot_name.clone(),
            status: result.status,
            detail: result.detail.clone(),
        });
        if !result.is_success() {
            return failed;
        }
        if self
            .local_profile
            .set_installed(&action.slot_name, &action.artifact_id, action.to_version)
            .is_err()
        {
            return failed;
        }
        let new = SlotImage {
            artifact_id: action.artifact_id.clone(),
            version: action.to_version,
            digest: Some(action.digest.clone()),
        };
        if let Some(old) = self.images.insert(action.slot_name.clone(), new) {
            // Re-applying the running image keeps the older fallback.
            if old.version != action.to_version || old.digest.as_ref() != Some(&action.digest) {
                self.slot_history.insert(action.slot_name.clone(), old);
            }
        }
        ActionOutcome {
            status: ActionStatus::Succeeded,
            from_version: action.from_version,
            resulting_version: action.to_version,
        }
    }

    /// Restores the previous image of `slot` without network access.
    pub fn local_rollback(
        &mut self,
        slot: &str,
        target: &mut dyn InstallTarget,
    ) -> Result<SlotImage, AgentError> {
        let previous = self
            .slot_history
            .remove(slot)
            .ok_or_else(|| AgentError::NoHistory(slot.to_string()))?;
        let result = target.revert(slot);
        if !result.is_success() {
            self.slot_history.insert(slot.to_string(), previous);
            return Err(AgentError::RevertFailed {
                slot: slot.to_string(),
                detail: result.detail,
            });
        }
        self.local_profile
            .set_installed(slot, &previous.artifact_id, previous.version)
            .map_err(|_| AgentError::NoHistory(slot.to_string()))?;
        self.images.insert(slot.to_string(), previous.clone());
        Ok(previous)
    }
}
