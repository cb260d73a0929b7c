use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::VehicleProfile;
use crate::resolver::UpdateManifest;
use crate::version::SemanticVersion;
use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionStatus {
    Succeeded,
    FailedDownload,
    FailedIntegrity,
    FailedInstall,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub status: ActionStatus,
    pub from_version: SemanticVersion,
    /// `to_version` on success, `from_version` otherwise.
    pub resulting_version: SemanticVersion,
}

/// Telemetry a vehicle sends after working through a manifest.
///
/// Actions aborted after an earlier failure are absent from `outcomes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallReport {
    pub vehicle_id: String,
    pub manifest_id: String,
    pub outcomes: BTreeMap<String, ActionOutcome>,
    pub digest_verified: bool,
    pub timestamp: Millis,
    /// Set when the vehicle refused the manifest outright.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<String>,
}

impl InstallReport {
    /// True iff the manifest was accepted and every action succeeded.
    pub fn fully_succeeded(&self, manifest: &UpdateManifest) -> bool {
        self.rejection.is_none()
            && manifest.actions.iter().all(|a| {
                self.outcomes
                    .get(&a.slot_name)
                    .is_some_and(|o| o.status == ActionStatus::Succeeded)
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FleetLedger {
    pub profiles: BTreeMap<String, VehicleProfile>,
    pub last_seen: BTreeMap<String, Millis>,
    pub report_history: Vec<InstallReport>,
}

/// Row of the fleet table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetEntry {
    pub vehicle_id: String,
    pub variant_id: String,
    pub slots: BTreeMap<String, SemanticVersion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_seen: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FleetSnapshot {
    pub vehicles: Vec<FleetEntry>,
    pub report_count: usize,
}

impl FleetLedger {
    pub fn snapshot(&self) -> FleetSnapshot {
        FleetSnapshot {
            vehicles: self
                .profiles
                .values()
                .map(|p| FleetEntry {
                    vehicle_id: p.vehicle_id.clone(),
                    variant_id: p.variant_id.clone(),
                    slots: p.installed_state(),
                    last_seen: self.last_seen.get(&p.vehicle_id).copied(),
                })
                .collect(),
            report_count: self.report_history.len(),
        }
    }
}
