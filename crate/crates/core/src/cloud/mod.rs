//! Cloud middleware: fleet ledger, rollout campaigns and the poll/report
//! protocol served to vehicles.

mod campaign;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use campaign::{
    assign_waves, AppliedChange, Campaign, CampaignKind, CampaignSpec, CampaignState,
    RolloutMode, RolloutStrategy, TargetFilter, VehicleStatus, DEFAULT_WAVE_TIMEOUT_MS,
};
pub use report::{
    ActionOutcome, ActionStatus, FleetEntry, FleetLedger, FleetSnapshot, InstallReport,
};

use crate::model::{ArtifactDescriptor, ProfileError, VehicleProfile};
use crate::resolver::{
    resolve_rollback, resolve_updates, DependencyMatrix, ResolveError, RollbackPins,
    UpdateManifest,
};
use crate::store::ArtifactStore;
use crate::version::SemanticVersion;
use crate::Millis;

/// The service behind a lock, shared by transports and the simulator.
pub type SharedService = Arc<Mutex<CloudService>>;

/// Time source: wall clock, or a manually driven simulated clock.
#[derive(Debug, Clone)]
pub enum Clock {
    System,
    Manual(Arc<AtomicU64>),
}

impl Clock {
    pub fn manual(start: Millis) -> Self {
        Clock::Manual(Arc::new(AtomicU64::new(start)))
    }

    pub fn now(&self) -> Millis {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as Millis),
            Clock::Manual(t) => t.load(Ordering::SeqCst),
        }
    }

    /// No-op on the system clock.
    pub fn set(&self, now: Millis) {
        if let Clock::Manual(t) = self {
            t.store(now, Ordering::SeqCst);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollRequest {
    pub vehicle_id: String,
    /// Slot → installed version as the vehicle sees it.
    pub installed: BTreeMap<String, SemanticVersion>,
    #[serde(default)]
    pub catalog_revision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PollResponse {
    UpToDate { catalog_revision: u64 },
    Update { manifest: UpdateManifest, catalog_revision: u64 },
}

impl PollResponse {
    pub fn catalog_revision(&self) -> u64 {
        match self {
            PollResponse::UpToDate { catalog_revision }
            | PollResponse::Update { catalog_revision, .. } => *catalog_revision,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterAck {
    pub vehicle_id: String,
    pub already_registered: bool,
    pub catalog_revision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportAck {
    pub manifest_id: String,
    /// The manifest had already been reported; only the ledger was touched.
    pub duplicate: bool,
}

/// Vehicles and/or variants to return to their rollback pins.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RollbackRequest {
    pub variants: BTreeSet<String>,
    pub vehicle_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CloudError {
    #[error("unknown vehicle {0:?}")]
    UnknownVehicle(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(#[from] ProfileError),
    #[error("vehicle {vehicle_id:?} is registered as variant {registered:?}, not {requested:?}")]
    VariantChanged {
        vehicle_id: String,
        registered: String,
        requested: String,
    },
    #[error("manifest {manifest_id:?} was not issued to vehicle {vehicle_id:?}")]
    UnknownManifest {
        manifest_id: String,
        vehicle_id: String,
    },
    #[error("no registered vehicle matches the target")]
    EmptyTarget,
    #[error("invalid rollout strategy: {0}")]
    InvalidStrategy(String),
    #[error("campaign {0:?} already exists")]
    DuplicateCampaign(String),
    #[error("unknown campaign {0:?}")]
    UnknownCampaign(String),
    #[error("slot {slot:?} of vehicle {vehicle_id:?} is already targeted by active campaign {campaign_id:?}")]
    Overlap {
        campaign_id: String,
        vehicle_id: String,
        slot: String,
    },
    #[error("catalog scope references unknown artifact {0}")]
    UnknownScopeArtifact(String),
    #[error("no rollback pins configured for variant {0:?}")]
    MissingPins(String),
    #[error("rollback for vehicle {vehicle_id:?}: {source}")]
    Rollback {
        vehicle_id: String,
        source: ResolveError,
    },
}

impl CloudError {
    pub fn http_status(&self) -> u16 {
        match self {
            CloudError::UnknownVehicle(_)
            | CloudError::UnknownManifest { .. }
            | CloudError::UnknownCampaign(_) => 404,
            CloudError::InvalidProfile(_) | CloudError::InvalidStrategy(_) => 400,
            CloudError::VariantChanged { .. }
            | CloudError::DuplicateCampaign(_)
            | CloudError::Overlap { .. } => 409,
            CloudError::EmptyTarget
            | CloudError::UnknownScopeArtifact(_)
            | CloudError::MissingPins(_)
            | CloudError::Rollback { .. } => 422,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OfferPurpose {
    Rollout,
    /// Undo of a rollout after its health gate failed.
    AbortRollback,
    /// Operator-triggered return to pins.
    PinnedRollback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedManifest {
    pub campaign_id: String,
    pub purpose: OfferPurpose,
    pub manifest: UpdateManifest,
    pub reported: bool,
}

/// Service-side happenings, drained by whoever records the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ServiceEvent {
    VehicleRegistered {
        vehicle_id: String,
        variant_id: String,
    },
    CampaignCreated {
        campaign_id: String,
        kind: CampaignKind,
        waves: Vec<Vec<String>>,
    },
    CampaignState {
        campaign_id: String,
        state: CampaignState,
    },
    ManifestIssued {
        campaign_id: String,
        vehicle_id: String,
        purpose: OfferPurpose,
        wave: Option<usize>,
        manifest: UpdateManifest,
    },
    ReportAccepted {
        campaign_id: String,
        vehicle_id: String,
        manifest_id: String,
        success: bool,
    },
    VehicleStatus {
        campaign_id: String,
        vehicle_id: String,
        status: VehicleStatus,
    },
    /// Rollback target cannot be resolved; the vehicle is left where it is.
    RollbackStranded {
        campaign_id: String,
        vehicle_id: String,
        reason: String,
    },
}

pub struct CloudService {
    store: Arc<ArtifactStore>,
    matrix: DependencyMatrix,
    ledger: FleetLedger,
    campaigns: BTreeMap<String, Campaign>,
    issued: BTreeMap<String, IssuedManifest>,
    /// (campaign, vehicle) → manifest currently outstanding.
    offers: BTreeMap<(String, String), String>,
    journal: Vec<ServiceEvent>,
    next_campaign: u64,
}

impl CloudService {
    pub fn new(store: Arc<ArtifactStore>, matrix: DependencyMatrix) -> Self {
        Self {
            store,
            matrix,
            ledger: FleetLedger::default(),
            campaigns: BTreeMap::new(),
            issued: BTreeMap::new(),
            offers: BTreeMap::new(),
            journal: Vec::new(),
            next_campaign: 1,
        }
    }

    pub fn store(&self) -> &Arc<ArtifactStore> {
        &self.store
    }

    pub fn matrix(&self) -> &DependencyMatrix {
        &self.matrix
    }

    pub fn ledger(&self) -> &FleetLedger {
        &self.ledger
    }

    pub fn campaign(&self, campaign_id: &str) -> Option<&Campaign> {
        self.campaigns.get(campaign_id)
    }

    pub fn campaigns(&self) -> impl Iterator<Item = &Campaign> {
        self.campaigns.values()
    }

    pub fn issued(&self, manifest_id: &str) -> Option<&IssuedManifest> {
        self.issued.get(manifest_id)
    }

    pub fn issued_manifests(&self) -> impl Iterator<Item = &IssuedManifest> {
        self.issued.values()
    }

    pub fn drain_events(&mut self) -> Vec<ServiceEvent> {
        std::mem::take(&mut self.journal)
    }

    pub fn register_vehicle(
        &mut self,
        profile: VehicleProfile,
        now: Millis,
    ) -> Result<RegisterAck, CloudError> {
        profile.validate()?;
        let vehicle_id = profile.vehicle_id.clone();
        let already_registered = match self.ledger.profiles.get(&vehicle_id) {
            Some(existing) if existing.variant_id != profile.variant_id => {
                return Err(CloudError::VariantChanged {
                    vehicle_id,
                    registered: existing.variant_id.clone(),
                    requested: profile.variant_id,
                });
            }
            Some(_) => true,
            None => {
                self.journal.push(ServiceEvent::VehicleRegistered {
                    vehicle_id: vehicle_id.clone(),
                    variant_id: profile.variant_id.clone(),
                });
                self.ledger.profiles.insert(vehicle_id.clone(), profile);
                false
            }
        };
        self.ledger.last_seen.insert(vehicle_id.clone(), now);
        Ok(RegisterAck {
            vehicle_id,
            already_registered,
            catalog_revision: self.store.revision(),
        })
    }

    pub fn handle_poll(
        &mut self,
        request: &PollRequest,
        now: Millis,
    ) -> Result<PollResponse, CloudError> {
        let registered = self
            .ledger
            .profiles
            .get(&request.vehicle_id)
            .ok_or_else(|| CloudError::UnknownVehicle(request.vehicle_id.clone()))?;
        let profile = registered.with_installed_state(&request.installed);
        self.ledger.last_seen.insert(request.vehicle_id.clone(), now);
        self.advance(now);

        let ids: Vec<String> = self.campaigns.keys().cloned().collect();
        for campaign_id in ids {
            if let Some(manifest) = self.offer(&campaign_id, &profile, now) {
                return Ok(PollResponse::Update {
                    manifest,
                    catalog_revision: self.store.revision(),
                });
            }
        }
        Ok(PollResponse::UpToDate {
            catalog_revision: self.store.revision(),
        })
    }

    pub fn handle_report(
        &mut self,
        report: InstallReport,
        now: Millis,
    ) -> Result<ReportAck, CloudError> {
        let unknown = || CloudError::UnknownManifest {
            manifest_id: report.manifest_id.clone(),
            vehicle_id: report.vehicle_id.clone(),
        };
        let issued = self.issued.get(&report.manifest_id).ok_or_else(unknown)?;
        if issued.manifest.vehicle_id != report.vehicle_id {
            return Err(unknown());
        }
        let profile = self
            .ledger
            .profiles
            .get_mut(&report.vehicle_id)
            .ok_or_else(|| CloudError::UnknownVehicle(report.vehicle_id.clone()))?;
        for (slot, outcome) in &report.outcomes {
            let Some(action) = issued.manifest.action(slot) else {
                continue;
            };
            let artifact_id = if outcome.resulting_version == action.to_version {
                action.artifact_id.clone()
            } else {
                profile
                    .installed_services
                    .get(slot)
                    .or_else(|| profile.installed_models.get(slot))
                    .map(|r| r.artifact_id.clone())
                    .unwrap_or_else(|| action.artifact_id.clone())
            };
            // Slots come from a manifest resolved for this profile.
            let _ = profile.set_installed(slot, &artifact_id, outcome.resulting_version);
        }
        self.ledger.last_seen.insert(report.vehicle_id.clone(), now);
        self.ledger.report_history.push(report.clone());

        let manifest_id = report.manifest_id.clone();
        let issued = self.issued.get_mut(&manifest_id).expect("checked above");
        if issued.reported {
            return Ok(ReportAck {
                manifest_id,
                duplicate: true,
            });
        }
        issued.reported = true;
        let issued = issued.clone();
        let success = report.fully_succeeded(&issued.manifest);
        let vehicle_id = report.vehicle_id.clone();
        let campaign_id = issued.campaign_id.clone();
        let key = (campaign_id.clone(), vehicle_id.clone());
        if self.offers.get(&key) == Some(&manifest_id) {
            self.offers.remove(&key);
        }

        let campaign = self.campaigns.get_mut(&campaign_id).expect("issued by a campaign");
        let succeeded_slots = report
            .outcomes
            .iter()
            .filter(|(_, o)| o.status == ActionStatus::Succeeded)
            .map(|(s, _)| s.as_str());
        let mut new_status = None;
        match issued.purpose {
            OfferPurpose::Rollout => {
                let applied = campaign.applied.entry(vehicle_id.clone()).or_default();
                for slot in succeeded_slots {
                    let action = issued.manifest.action(slot).expect("outcome for issued slot");
                    let from = applied
                        .get(slot)
                        .map_or(action.from_version, |c| c.from);
                    applied.insert(
                        slot.to_string(),
                        AppliedChange {
                            from,
                            to: action.to_version,
                        },
                    );
                }
                if campaign.status(&vehicle_id) == Some(VehicleStatus::Offered) {
                    new_status = Some(if success {
                        VehicleStatus::Succeeded
                    } else {
                        VehicleStatus::Failed
                    });
                }
            }
            OfferPurpose::AbortRollback => {
                if let Some(applied) = campaign.applied.get_mut(&vehicle_id) {
                    for slot in succeeded_slots {
                        applied.remove(slot);
                    }
                    if applied.is_empty() {
                        campaign.applied.remove(&vehicle_id);
                        new_status = Some(VehicleStatus::RolledBack);
                    }
                }
                if !success {
                    *campaign.rollback_attempts.entry(vehicle_id.clone()).or_default() += 1;
                }
            }
            OfferPurpose::PinnedRollback => {
                if success {
                    new_status = Some(VehicleStatus::RolledBack);
                } else {
                    *campaign.rollback_attempts.entry(vehicle_id.clone()).or_default() += 1;
                    new_status = Some(VehicleStatus::Pending);
                }
            }
        }
        self.journal.push(ServiceEvent::ReportAccepted {
            campaign_id: campaign_id.clone(),
            vehicle_id: vehicle_id.clone(),
            manifest_id: manifest_id.clone(),
            success,
        });
        if let Some(status) = new_status {
            self.set_status(&campaign_id, &vehicle_id, status);
        }
        self.evaluate_wave(&campaign_id, now);
        Ok(ReportAck {
            manifest_id,
            duplicate: false,
        })
    }

    pub fn create_campaign(
        &mut self,
        spec: CampaignSpec,
        now: Millis,
    ) -> Result<Campaign, CloudError> {
        spec.strategy
            .validate()
            .map_err(CloudError::InvalidStrategy)?;
        let campaign_id = self.campaign_id(spec.campaign_id.clone(), "campaign")?;
        let catalog = self.store.catalog().artifacts;
        if let Some(scope) = &spec.catalog_scope {
            for r in scope {
                if !catalog.iter().any(|a| a.reference() == *r) {
                    return Err(CloudError::UnknownScopeArtifact(r.to_string()));
                }
            }
        }
        let scoped = scoped_catalog(&catalog, spec.catalog_scope.as_deref());
        let matched: Vec<&VehicleProfile> = self
            .ledger
            .profiles
            .values()
            .filter(|p| spec.target.matches(p))
            .collect();
        if matched.is_empty() {
            return Err(CloudError::EmptyTarget);
        }
        let touched: BTreeSet<(String, String)> = matched
            .iter()
            .flat_map(|p| {
                p.slots()
                    .into_iter()
                    .filter(|s| scoped.iter().any(|a| a.slot_name == s.name))
                    .map(|s| (p.vehicle_id.clone(), s.name))
            })
            .collect();
        self.check_overlap(&touched)?;
        let vehicles: Vec<String> = matched.iter().map(|p| p.vehicle_id.clone()).collect();
        let waves = assign_waves(&campaign_id, &vehicles, &spec.strategy.wave_fractions);
        let campaign = self.insert_campaign(
            campaign_id,
            CampaignKind::Rollout,
            spec.target,
            spec.catalog_scope,
            spec.strategy,
            waves,
            touched,
            now,
        );
        self.transition(&campaign, CampaignState::WaveActive { wave: 0 }, now);
        self.evaluate_wave(&campaign, now);
        Ok(self.campaigns[&campaign].clone())
    }

    pub fn trigger_rollback(
        &mut self,
        request: RollbackRequest,
        now: Millis,
    ) -> Result<Campaign, CloudError> {
        let pins = self.store.rollback_pins();
        let catalog = self.store.catalog().artifacts;
        let affected: Vec<&VehicleProfile> = self
            .ledger
            .profiles
            .values()
            .filter(|p| {
                request.variants.contains(&p.variant_id)
                    || request.vehicle_ids.contains(&p.vehicle_id)
            })
            .collect();
        if affected.is_empty() {
            return Err(CloudError::EmptyTarget);
        }
        let mut touched = BTreeSet::new();
        for p in &affected {
            if !pins.has_variant(&p.variant_id) {
                return Err(CloudError::MissingPins(p.variant_id.clone()));
            }
            resolve_rollback(p, &pins, &catalog).map_err(|source| CloudError::Rollback {
                vehicle_id: p.vehicle_id.clone(),
                source,
            })?;
            for (slot, _) in pins.for_variant(&p.variant_id) {
                if p.slot_kind(slot).is_some() {
                    touched.insert((p.vehicle_id.clone(), slot.to_string()));
                }
            }
        }
        self.check_overlap(&touched)?;
        let vehicles: Vec<String> = affected.iter().map(|p| p.vehicle_id.clone()).collect();
        let campaign_id = self.campaign_id(None, "rollback")?;
        let target = TargetFilter {
            variants: request.variants,
            vehicle_ids: request.vehicle_ids,
            ..TargetFilter::default()
        };
        let campaign = self.insert_campaign(
            campaign_id,
            CampaignKind::Rollback,
            target,
            None,
            RolloutStrategy::full(),
            vec![vehicles],
            touched,
            now,
        );
        self.transition(&campaign, CampaignState::AbortedRollingBack, now);
        Ok(self.campaigns[&campaign].clone())
    }

    /// Applies wave timeouts that have elapsed by `now`.
    pub fn advance(&mut self, now: Millis) {
        let active: Vec<String> = self
            .campaigns
            .values()
            .filter(|c| c.is_active())
            .map(|c| c.campaign_id.clone())
            .collect();
        for id in active {
            self.evaluate_wave(&id, now);
        }
    }

    /// Earliest instant at which a wave timeout fires, if any.
    pub fn next_deadline(&self) -> Option<Millis> {
        self.campaigns
            .values()
            .filter(|c| matches!(c.state, CampaignState::WaveActive { .. }))
            .map(|c| c.wave_started_at + c.strategy.wave_timeout_ms)
            .min()
    }

    /// Re-runs the health gate for one campaign; may cascade through
    /// several transitions.
    pub fn evaluate_wave(&mut self, campaign_id: &str, now: Millis) {
        loop {
            let Some(c) = self.campaigns.get(campaign_id) else {
                return;
            };
            match c.state {
                CampaignState::WaveActive { wave } => {
                    let members = c.waves[wave].clone();
                    let silent: Vec<String> = members
                        .iter()
                        .filter(|v| {
                            matches!(
                                c.status(v),
                                Some(VehicleStatus::Pending | VehicleStatus::Offered)
                            )
                        })
                        .cloned()
                        .collect();
                    let timed_out = now >= c.wave_started_at + c.strategy.wave_timeout_ms;
                    if !silent.is_empty() && !timed_out {
                        return;
                    }
                    for v in &silent {
                        self.set_status(campaign_id, v, VehicleStatus::Failed);
                    }
                    let c = &self.campaigns[campaign_id];
                    let ratio = c.success_ratio(wave);
                    let next = if ratio + 1e-12 >= c.strategy.health_threshold {
                        if wave + 1 < c.waves.len() {
                            CampaignState::WaveActive { wave: wave + 1 }
                        } else {
                            CampaignState::Completed
                        }
                    } else {
                        CampaignState::AbortedRollingBack
                    };
                    self.transition(campaign_id, next, now);
                }
                CampaignState::AbortedRollingBack => {
                    let done = match c.kind {
                        CampaignKind::Rollout => c.applied.values().all(BTreeMap::is_empty),
                        CampaignKind::Rollback => c.members().all(|v| {
                            matches!(
                                c.status(v),
                                Some(VehicleStatus::RolledBack | VehicleStatus::Failed)
                            )
                        }),
                    };
                    if done {
                        self.transition(campaign_id, CampaignState::Aborted, now);
                    }
                    return;
                }
                CampaignState::Pending | CampaignState::Completed | CampaignState::Aborted => {
                    return
                }
            }
        }
    }

    pub fn fleet(&self) -> FleetSnapshot {
        self.ledger.snapshot()
    }

    fn campaign_id(&mut self, requested: Option<String>, prefix: &str) -> Result<String, CloudError> {
        match requested {
            Some(id) if self.campaigns.contains_key(&id) => Err(CloudError::DuplicateCampaign(id)),
            Some(id) => Ok(id),
            None => loop {
                let id = format!("{prefix}-{}", self.next_campaign);
                self.next_campaign += 1;
                if !self.campaigns.contains_key(&id) {
                    break Ok(id);
                }
            },
        }
    }

    fn check_overlap(&self, touched: &BTreeSet<(String, String)>) -> Result<(), CloudError> {
        for c in self.campaigns.values().filter(|c| c.is_active()) {
            if let Some((vehicle_id, slot)) = c.touched.intersection(touched).next() {
                return Err(CloudError::Overlap {
                    campaign_id: c.campaign_id.clone(),
                    vehicle_id: vehicle_id.clone(),
                    slot: slot.clone(),
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn insert_campaign(
        &mut self,
        campaign_id: String,
        kind: CampaignKind,
        target: TargetFilter,
        catalog_scope: Option<Vec<crate::model::ArtifactRef>>,
        strategy: RolloutStrategy,
        waves: Vec<Vec<String>>,
        touched: BTreeSet<(String, String)>,
        now: Millis,
    ) -> String {
        let wave_membership = waves
            .iter()
            .enumerate()
            .flat_map(|(ix, w)| w.iter().map(move |v| (v.clone(), ix)))
            .collect();
        let vehicle_status = waves
            .iter()
            .flatten()
            .map(|v| (v.clone(), VehicleStatus::Pending))
            .collect();
        self.journal.push(ServiceEvent::CampaignCreated {
            campaign_id: campaign_id.clone(),
            kind,
            waves: waves.clone(),
        });
        self.journal.push(ServiceEvent::CampaignState {
            campaign_id: campaign_id.clone(),
            state: CampaignState::Pending,
        });
        self.campaigns.insert(
            campaign_id.clone(),
            Campaign {
                campaign_id: campaign_id.clone(),
                kind,
                target,
                catalog_scope,
                strategy,
                state: CampaignState::Pending,
                waves,
                wave_membership,
                vehicle_status,
                created_at: now,
                wave_started_at: now,
                applied: BTreeMap::new(),
                rollback_attempts: BTreeMap::new(),
                touched,
            },
        );
        campaign_id
    }

    fn transition(&mut self, campaign_id: &str, state: CampaignState, now: Millis) {
        let c = self.campaigns.get_mut(campaign_id).expect("known campaign");
        c.state = state;
        if let CampaignState::WaveActive { .. } = state {
            c.wave_started_at = now;
        }
        self.journal.push(ServiceEvent::CampaignState {
            campaign_id: campaign_id.to_string(),
            state,
        });
    }

    fn set_status(&mut self, campaign_id: &str, vehicle_id: &str, status: VehicleStatus) {
        let c = self.campaigns.get_mut(campaign_id).expect("known campaign");
        if c.vehicle_status.get(vehicle_id) == Some(&status) {
            return;
        }
        c.vehicle_status.insert(vehicle_id.to_string(), status);
        self.journal.push(ServiceEvent::VehicleStatus {
            campaign_id: campaign_id.to_string(),
            vehicle_id: vehicle_id.to_string(),
            status,
        });
    }

    /// What the campaign wants this vehicle to do now, if anything.
    fn purpose_for(c: &Campaign, vehicle_id: &str) -> Option<OfferPurpose> {
        let status = c.status(vehicle_id)?;
        let waiting = matches!(status, VehicleStatus::Pending | VehicleStatus::Offered);
        match (c.kind, c.state) {
            (CampaignKind::Rollout, CampaignState::WaveActive { wave }) => {
                (waiting && c.wave_membership[vehicle_id] <= wave).then_some(OfferPurpose::Rollout)
            }
            (CampaignKind::Rollout, CampaignState::AbortedRollingBack) => c
                .applied
                .get(vehicle_id)
                .is_some_and(|a| !a.is_empty())
                .then_some(OfferPurpose::AbortRollback),
            (CampaignKind::Rollback, CampaignState::AbortedRollingBack) => {
                waiting.then_some(OfferPurpose::PinnedRollback)
            }
            _ => None,
        }
    }

    fn offer(
        &mut self,
        campaign_id: &str,
        profile: &VehicleProfile,
        now: Millis,
    ) -> Option<UpdateManifest> {
        let vehicle_id = profile.vehicle_id.as_str();
        let c = &self.campaigns[campaign_id];
        let purpose = Self::purpose_for(c, vehicle_id)?;
        let catalog = self.store.catalog().artifacts;
        let touches = |slot: &str| c.touched.contains(&(vehicle_id.to_string(), slot.to_string()));

        let actions = match purpose {
            OfferPurpose::Rollout => {
                let scoped = scoped_catalog(&catalog, c.catalog_scope.as_deref());
                let mut actions = resolve_updates(profile, &scoped, &self.matrix).actions;
                actions.retain(|a| touches(&a.slot_name));
                Ok(actions)
            }
            OfferPurpose::AbortRollback => {
                let store_pins = self.store.rollback_pins();
                let mut pins = RollbackPins::new();
                for (slot, change) in &c.applied[vehicle_id] {
                    let target = store_pins
                        .get(&profile.variant_id, slot)
                        .unwrap_or(change.from);
                    pins.set(&profile.variant_id, slot, target);
                }
                resolve_rollback(profile, &pins, &catalog).map(|m| m.actions)
            }
            OfferPurpose::PinnedRollback => {
                let store_pins = self.store.rollback_pins();
                let mut pins = RollbackPins::new();
                for (slot, version) in store_pins.for_variant(&profile.variant_id) {
                    if touches(slot) {
                        pins.set(&profile.variant_id, slot, version);
                    }
                }
                resolve_rollback(profile, &pins, &catalog).map(|m| m.actions)
            }
        };
        self.reconcile_outstanding(campaign_id, profile);

        let actions = match actions {
            Ok(actions) => actions,
            Err(e) => {
                self.strand(campaign_id, vehicle_id, e.to_string(), now);
                return None;
            }
        };
        let manifest = UpdateManifest::new(campaign_id, vehicle_id, actions, now);
        if manifest.is_empty() {
            self.settle(campaign_id, vehicle_id, purpose, now);
            return None;
        }
        let key = (campaign_id.to_string(), vehicle_id.to_string());
        if self.offers.get(&key) == Some(&manifest.manifest_id) {
            if let Some(existing) = self.issued.get(&manifest.manifest_id) {
                if !existing.reported {
                    return Some(existing.manifest.clone());
                }
            }
        }
        // A re-offer of identical actions after a report gets a fresh id.
        let manifest = if self.issued.contains_key(&manifest.manifest_id) {
            let attempt = self.issued.len();
            UpdateManifest::new(
                &format!("{campaign_id}#{attempt}"),
                vehicle_id,
                manifest.actions,
                now,
            )
        } else {
            manifest
        };
        let wave = self.campaigns[campaign_id].wave_membership.get(vehicle_id).copied();
        self.issued.insert(
            manifest.manifest_id.clone(),
            IssuedManifest {
                campaign_id: campaign_id.to_string(),
                purpose,
                manifest: manifest.clone(),
                reported: false,
            },
        );
        self.offers.insert(key, manifest.manifest_id.clone());
        if purpose != OfferPurpose::AbortRollback {
            self.set_status(campaign_id, vehicle_id, VehicleStatus::Offered);
        }
        self.journal.push(ServiceEvent::ManifestIssued {
            campaign_id: campaign_id.to_string(),
            vehicle_id: vehicle_id.to_string(),
            purpose,
            wave: (purpose == OfferPurpose::Rollout).then_some(wave).flatten(),
            manifest: manifest.clone(),
        });
        Some(manifest)
    }

    /// Credits an unreported outstanding offer with whatever the vehicle's own
    /// state shows it applied (its report may have been lost).
    fn reconcile_outstanding(&mut self, campaign_id: &str, profile: &VehicleProfile) {
        let key = (campaign_id.to_string(), profile.vehicle_id.clone());
        let Some(outstanding) = self.offers.get(&key).and_then(|id| self.issued.get(id)) else {
            return;
        };
        let purpose = outstanding.purpose;
        let reached: Vec<(String, SemanticVersion, SemanticVersion)> = outstanding
            .manifest
            .actions
            .iter()
            .filter(|a| profile.installed_version(&a.slot_name) == Some(a.to_version))
            .map(|a| (a.slot_name.clone(), a.from_version, a.to_version))
            .collect();
        let c = self.campaigns.get_mut(campaign_id).expect("known campaign");
        match purpose {
            OfferPurpose::Rollout => {
                let applied = c.applied.entry(profile.vehicle_id.clone()).or_default();
                for (slot, from, to) in reached {
                    let from = applied.get(&slot).map_or(from, |ch| ch.from);
                    applied.insert(slot, AppliedChange { from, to });
                }
                if applied.is_empty() {
                    c.applied.remove(&profile.vehicle_id);
                }
            }
            OfferPurpose::AbortRollback => {
                if let Some(applied) = c.applied.get_mut(&profile.vehicle_id) {
                    for (slot, _, _) in reached {
                        applied.remove(&slot);
                    }
                }
            }
            OfferPurpose::PinnedRollback => {}
        }
    }

    /// Nothing left to do for this vehicle: record the terminal status.
    fn settle(&mut self, campaign_id: &str, vehicle_id: &str, purpose: OfferPurpose, now: Millis) {
        self.offers
            .remove(&(campaign_id.to_string(), vehicle_id.to_string()));
        let status = match purpose {
            OfferPurpose::Rollout => VehicleStatus::Succeeded,
            OfferPurpose::AbortRollback => {
                self.campaigns
                    .get_mut(campaign_id)
                    .expect("known campaign")
                    .applied
                    .remove(vehicle_id);
                VehicleStatus::RolledBack
            }
            OfferPurpose::PinnedRollback => VehicleStatus::RolledBack,
        };
        self.set_status(campaign_id, vehicle_id, status);
        self.evaluate_wave(campaign_id, now);
    }

    fn strand(&mut self, campaign_id: &str, vehicle_id: &str, reason: String, now: Millis) {
        self.journal.push(ServiceEvent::RollbackStranded {
            campaign_id: campaign_id.to_string(),
            vehicle_id: vehicle_id.to_string(),
            reason,
        });
        self.campaigns
            .get_mut(campaign_id)
            .expect("known campaign")
            .applied
            .remove(vehicle_id);
        self.set_status(campaign_id, vehicle_id, VehicleStatus::Failed);
        self.evaluate_wave(campaign_id, now);
    }
}

fn scoped_catalog(
    catalog: &[ArtifactDescriptor],
    scope: Option<&[crate::model::ArtifactRef]>,
) -> Vec<ArtifactDescriptor> {
    match scope {
        None => catalog.to_vec(),
        Some(scope) => catalog
            .iter()
            .filter(|a| scope.contains(&a.reference()))
            .cloned()
            .collect(),
    }
}
