use std::collections::{BTreeMap, VecDeque};

use ota_core::agent::{
    verify_manifest, verify_payload, Agent, AgentError, CloudLink, Effect, LinkError, Phase,
    MAX_REPORT_ATTEMPTS,
};
use ota_core::cloud::{ActionStatus, InstallReport, PollRequest, PollResponse, RegisterAck, ReportAck};
use ota_core::image;
use ota_core::installer::{FaultPlan, InstallFault, SimulatedDevice};
use ota_core::model::{ArtifactKind, EcuDescriptor};
use ota_core::resolver::{blob_path, Direction, UpdateAction, UpdateManifest};
use ota_core::{compute_digest, ContentDigest, SemanticVersion, VehicleProfile};
use proptest::prelude::*;

const ABS: &str = "ABS Control Module";
const HVAC: &str = "HVAC Control Module";
const AIRBAG: &str = "Airbag Control Module";

fn v(s: &str) -> SemanticVersion {
    s.parse().unwrap()
}

fn car() -> VehicleProfile {
    let mut p = VehicleProfile::new("car-1", "variant-1");
    for slot in [ABS, HVAC, AIRBAG] {
        p.ecus.push(EcuDescriptor {
            slot_name: slot.into(),
            hardware_model: None,
            hardware_version: v("1.0.0"),
            installed_firmware: v("1.0.0"),
        });
    }
    p
}

#[derive(Default)]
struct MockLink {
    polls: VecDeque<Result<PollResponse, LinkError>>,
    blobs: BTreeMap<String, Vec<u8>>,
    failing_downloads: Vec<String>,
    report_failures: u32,
    reports: Vec<InstallReport>,
    requests: Vec<PollRequest>,
}

impl MockLink {
    fn offering(manifest: &UpdateManifest, blobs: BTreeMap<String, Vec<u8>>) -> Self {
        Self {
            polls: VecDeque::from([Ok(PollResponse::Update {
                manifest: manifest.clone(),
                catalog_revision: 7,
            })]),
            blobs,
            ..Self::default()
        }
    }
}

impl CloudLink for MockLink {
    fn register(&mut self, profile: &VehicleProfile) -> Result<RegisterAck, LinkError> {
        Ok(RegisterAck {
            vehicle_id: profile.vehicle_id.clone(),
            already_registered: false,
            catalog_revision: 1,
        })
    }

    fn poll(&mut self, request: &PollRequest) -> Result<PollResponse, LinkError> {
        self.requests.push(request.clone());
        self.polls
            .pop_front()
            .unwrap_or(Ok(PollResponse::UpToDate { catalog_revision: 7 }))
    }

    fn download(&mut self, action: &UpdateAction) -> Result<Vec<u8>, LinkError> {
        if self.failing_downloads.contains(&action.slot_name) {
            return Err(LinkError::Unreachable("down".into()));
        }
        self.blobs
            .get(action.digest.hex())
            .cloned()
            .ok_or(LinkError::Refused {
                status: 404,
                message: "no blob".into(),
            })
    }

    fn report(&mut self, report: &InstallReport) -> Result<ReportAck, LinkError> {
        if self.report_failures > 0 {
            self.report_failures -= 1;
            return Err(LinkError::Unreachable("lost".into()));
        }
        self.reports.push(report.clone());
        Ok(ReportAck {
            manifest_id: report.manifest_id.clone(),
            duplicate: false,
        })
    }
}

fn firmware_action(slot: &str, from: &str, to: &str) -> (UpdateAction, Vec<u8>) {
    let payload = image::encode_image(ArtifactKind::FirmwareBinary, v(to), slot.as_bytes());
    let digest = compute_digest(&payload);
    let action = UpdateAction {
        slot_name: slot.into(),
        artifact_id: format!("{slot}-fw"),
        from_version: v(from),
        to_version: v(to),
        download_url: blob_path(&digest),
        digest,
        size_bytes: payload.len() as u64,
        direction: Direction::Upgrade,
        embedded_model: None,
    };
    (action, payload)
}

/// The variant-1 lab manifest: ABS and HVAC to 2.0.0, Airbag untouched.
fn variant_one() -> (UpdateManifest, BTreeMap<String, Vec<u8>>) {
    let mut blobs = BTreeMap::new();
    let mut actions = Vec::new();
    for slot in [ABS, HVAC] {
        let (a, p) = firmware_action(slot, "1.0.0", "2.0.0");
        blobs.insert(a.digest.hex().to_string(), p);
        actions.push(a);
    }
    (UpdateManifest::new("c", "car-1", actions, 0), blobs)
}

fn firmware(agent: &Agent) -> Vec<String> {
    agent
        .local_profile
        .ecus
        .iter()
        .map(|e| e.installed_firmware.to_string())
        .collect()
}

#[test]
fn happy_path_takes_five_ticks_to_install() {
    let (manifest, blobs) = variant_one();
    let mut link = MockLink::offering(&manifest, blobs);
    let mut device = SimulatedDevice::from_profile(&car(), FaultPlan::none());
    let mut agent = Agent::new(car(), 5_000);
    let mut phases = Vec::new();
    for t in 0..5 {
        agent.tick(t, &mut link, &mut device);
        phases.push(agent.phase);
    }
    assert_eq!(
        phases,
        [Phase::Checking, Phase::Downloading, Phase::Verifying, Phase::Installing, Phase::Reporting]
    );
    assert_eq!(firmware(&agent), ["2.0.0", "2.0.0", "1.0.0"]);
    for slot in [ABS, HVAC, AIRBAG] {
        let ecu = device.slot(slot).unwrap();
        assert_eq!(ecu.hardware_version, Some(v("1.0.0")));
        assert_eq!(device.installed_version(slot), agent.local_profile.installed_version(slot));
    }

    agent.tick(5, &mut link, &mut device);
    assert_eq!(agent.phase, Phase::Idle);
    assert_eq!(agent.next_poll_at, 5 + 5_000);
    let report = &link.reports[0];
    assert_eq!(report.manifest_id, manifest.manifest_id);
    assert!(report.digest_verified);
    assert!(report.outcomes.values().all(|o| o.status == ActionStatus::Succeeded));
    assert_eq!(report.outcomes.len(), 2);
}

#[test]
fn idle_waits_for_the_poll_timer_and_checking_handles_up_to_date() {
    let mut link = MockLink::default();
    let mut device = SimulatedDevice::from_profile(&car(), FaultPlan::none());
    let mut agent = Agent::new(car(), 5_000);
    agent.next_poll_at = 100;
    assert!(agent.tick(99, &mut link, &mut device).is_empty());
    assert_eq!(agent.phase, Phase::Idle);
    let effects = agent.tick(100, &mut link, &mut device);
    assert_eq!(agent.phase, Phase::Checking);
    assert!(matches!(effects.last(), Some(Effect::Poll { .. })));
    assert_eq!(link.requests[0].installed[ABS], v("1.0.0"));
    let effects = agent.tick(101, &mut link, &mut device);
    assert!(effects.is_empty());
    assert_eq!(agent.phase, Phase::Idle);
    assert_eq!(agent.catalog_revision, 7);
}

#[test]
fn manifest_verification_rules() {
    let (manifest, _) = variant_one();
    let local = car();
    assert!(verify_manifest(&manifest, &local).is_ok());

    let mut stale = manifest.clone();
    stale.actions[0].from_version = v("0.9.0");
    assert!(verify_manifest(&stale, &local).unwrap_err().contains("state divergence"));

    let mut foreign = manifest.clone();
    foreign.vehicle_id = "car-2".into();
    assert!(verify_manifest(&foreign, &local).is_err());

    let mut unknown = manifest.clone();
    unknown.actions[0].slot_name = "Brake Module".into();
    assert!(verify_manifest(&unknown, &local).is_err());

    let mut twice = manifest;
    twice.actions[1] = twice.actions[0].clone();
    assert!(verify_manifest(&twice, &local).is_err());
}

#[test]
fn rejected_manifest_is_reported_and_agent_goes_idle() {
    let (mut manifest, blobs) = variant_one();
    manifest.actions[0].from_version = v("0.9.0");
    let mut link = MockLink::offering(&manifest, blobs);
    let mut device = SimulatedDevice::from_profile(&car(), FaultPlan::none());
    let mut agent = Agent::new(car(), 5_000);
    agent.tick(0, &mut link, &mut device);
    let effects = agent.tick(1, &mut link, &mut device);
    assert_eq!(agent.phase, Phase::Idle);
    assert!(matches!(effects[0], Effect::ManifestRejected { .. }));
    let report = &link.reports[0];
    assert!(report.rejection.as_deref().unwrap().contains("state divergence"));
    assert!(report.outcomes.is_empty());
    assert_eq!(firmware(&agent), ["1.0.0"; 3]);
}

#[test]
fn payload_verification() {
    let payload = b"firmware".to_vec();
    let digest = compute_digest(&payload);
    assert!(verify_payload(&payload, &digest));
    let mut flipped = payload.clone();
    flipped[3] ^= 0x01;
    assert!(!verify_payload(&flipped, &digest));
    let empty: ContentDigest =
        "sha256:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855".parse().unwrap();
    assert!(verify_payload(&[], &empty));
}

fn run_cycle(agent: &mut Agent, link: &mut MockLink, device: &mut SimulatedDevice) -> Vec<Effect> {
    let mut effects = Vec::new();
    let mut t = agent.next_poll_at;
    loop {
        effects.extend(agent.tick(t, link, device));
        t += 1;
        if agent.phase == Phase::Idle {
            return effects;
        }
    }
}

#[test]
fn corruption_yields_integrity_failure_and_truthful_report() {
    let (manifest, mut blobs) = variant_one();
    let hvac = manifest.actions[1].digest.hex().to_string();
    blobs.get_mut(&hvac).unwrap()[5] ^= 0x40;
    let mut link = MockLink::offering(&manifest, blobs);
    let mut device = SimulatedDevice::from_profile(&car(), FaultPlan::none());
    let mut agent = Agent::new(car(), 5_000);
    run_cycle(&mut agent, &mut link, &mut device);
    let report = &link.reports[0];
    assert!(!report.digest_verified);
    assert_eq!(report.outcomes[ABS].status, ActionStatus::Succeeded);
    assert_eq!(report.outcomes[HVAC].status, ActionStatus::FailedIntegrity);
    assert_eq!(report.outcomes[HVAC].resulting_version, v("1.0.0"));
    assert_eq!(firmware(&agent), ["2.0.0", "1.0.0", "1.0.0"]);
    assert_eq!(device.installed_version(HVAC), Some(v("1.0.0")));
}

#[test]
fn first_failure_aborts_the_rest() {
    let (manifest, blobs) = variant_one();
    let mut link = MockLink::offering(&manifest, blobs);
    link.failing_downloads.push(ABS.into());
    let mut device = SimulatedDevice::from_profile(&car(), FaultPlan::none());
    let mut agent = Agent::new(car(), 5_000);
    let effects = run_cycle(&mut agent, &mut link, &mut device);
    let report = &link.reports[0];
    assert_eq!(report.outcomes.len(), 1);
    assert_eq!(report.outcomes[ABS].status, ActionStatus::FailedDownload);
    assert!(!effects.iter().any(|e| matches!(e, Effect::Install { .. })));
    assert_eq!(firmware(&agent), ["1.0.0"; 3]);
}

#[test]
fn installer_fault_is_atomic() {
    let (manifest, blobs) = variant_one();
    let mut link = MockLink::offering(&manifest, blobs);
    let faults = FaultPlan::none().at(HVAC, 1, InstallFault::Crash);
    let mut device = SimulatedDevice::from_profile(&car(), faults);
    let mut agent = Agent::new(car(), 5_000);
    run_cycle(&mut agent, &mut link, &mut device);
    let report = &link.reports[0];
    assert_eq!(report.outcomes[HVAC].status, ActionStatus::FailedInstall);
    assert!(report.digest_verified);
    assert_eq!(firmware(&agent), ["2.0.0", "1.0.0", "1.0.0"]);
    assert_eq!(device.installed_version(HVAC), Some(v("1.0.0")));
}

#[test]
fn reports_are_retried_then_dropped() {
    let (manifest, blobs) = variant_one();
    let mut link = MockLink::offering(&manifest, blobs.clone());
    link.report_failures = MAX_REPORT_ATTEMPTS - 1;
    let mut device = SimulatedDevice::from_profile(&car(), FaultPlan::none());
    let mut agent = Agent::new(car(), 5_000);
    run_cycle(&mut agent, &mut link, &mut device);
    assert_eq!(link.reports.len(), 1);

    let mut link = MockLink::offering(&manifest, blobs);
    link.report_failures = MAX_REPORT_ATTEMPTS;
    let mut device = SimulatedDevice::from_profile(&car(), FaultPlan::none());
    let mut agent = Agent::new(car(), 5_000);
    let effects = run_cycle(&mut agent, &mut link, &mut device);
    assert!(link.reports.is_empty());
    assert!(matches!(effects.last(), Some(Effect::ReportDropped { .. })));
    // The update itself stands; the cloud learns it from the next poll.
    assert_eq!(firmware(&agent), ["2.0.0", "2.0.0", "1.0.0"]);
}

#[test]
fn local_rollback_has_depth_one() {
    let (manifest, blobs) = variant_one();
    let mut link = MockLink::offering(&manifest, blobs);
    let mut device = SimulatedDevice::from_profile(&car(), FaultPlan::none());
    let mut agent = Agent::new(car(), 5_000);
    assert_eq!(
        agent.local_rollback(ABS, &mut device),
        Err(AgentError::NoHistory(ABS.into()))
    );
    run_cycle(&mut agent, &mut link, &mut device);
    assert_eq!(agent.images[ABS].digest.as_ref(), Some(&manifest.actions[0].digest));

    let restored = agent.local_rollback(ABS, &mut device).unwrap();
    assert_eq!(restored.version, v("1.0.0"));
    assert_eq!(restored.digest, None);
    assert_eq!(firmware(&agent), ["1.0.0", "2.0.0", "1.0.0"]);
    assert_eq!(device.installed_version(ABS), Some(v("1.0.0")));
    assert!(agent.local_rollback(ABS, &mut device).is_err());
    assert!(agent.local_rollback(AIRBAG, &mut device).is_err());
}

#[test]
fn container_slot_swap() {
    let mut profile = car();
    profile.installed_services.insert(
        "planner".into(),
        ota_core::ArtifactRef::new("planner", v("1.0.0")),
    );
    let payload = image::encode_image(ArtifactKind::ContainerImage, v("1.1.0"), b"svc");
    let digest = compute_digest(&payload);
    let action = UpdateAction {
        slot_name: "planner".into(),
        artifact_id: "planner".into(),
        from_version: v("1.0.0"),
        to_version: v("1.1.0"),
        download_url: blob_path(&digest),
        digest: digest.clone(),
        size_bytes: payload.len() as u64,
        direction: Direction::Upgrade,
        embedded_model: None,
    };
    let mut device = SimulatedDevice::from_profile(&profile, FaultPlan::none());
    let mut agent = Agent::new(profile, 5_000);
    let mut effects = Vec::new();
    let outcome = agent.apply_action(&action, &payload, &mut device, &mut effects);
    assert_eq!(outcome.status, ActionStatus::Succeeded);
    assert_eq!(agent.local_profile.installed_services["planner"].version, v("1.1.0"));
    assert!(device.slot("planner").unwrap().running);
}

#[derive(Debug, Clone)]
enum Env {
    Offer { corrupt: Option<usize>, fail_download: bool, stale: bool },
    UpToDate,
    PollError,
}

fn env() -> impl Strategy<Value = Env> {
    prop_oneof![
        (proptest::option::of(0usize..64), any::<bool>(), any::<bool>()).prop_map(
            |(corrupt, fail_download, stale)| Env::Offer { corrupt, fail_download, stale }
        ),
        Just(Env::UpToDate),
        Just(Env::PollError),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Random environments: the agent always returns to IDLE, never hands an
    /// unverified payload to an installer, keeps every slot at the from or to
    /// version of its last attempted action, and reports exactly what it did.
    #[test]
    fn agent_survives_arbitrary_environments(
        rounds in proptest::collection::vec((env(), proptest::option::of(0u32..3), 0u32..4), 1..6)
    ) {
        let mut agent = Agent::new(car(), 1_000);
        let mut device = SimulatedDevice::from_profile(&car(), FaultPlan::none());
        let mut counter = 0u32;
        let mut installs: BTreeMap<String, u32> = BTreeMap::new();
        for (env, crash_slot, report_failures) in rounds {
            let installed = agent.local_profile.installed_state();
            let mut blobs = BTreeMap::new();
            let mut actions = Vec::new();
            counter += 1;
            for slot in [ABS, HVAC, AIRBAG] {
                let from = installed[slot];
                let to = SemanticVersion::new(from.major + 1, 0, counter.into());
                let (a, p) = firmware_action(slot, &from.to_string(), &to.to_string());
                blobs.insert(a.digest.hex().to_string(), p);
                actions.push(a);
            }
            let mut link = MockLink { report_failures, ..MockLink::default() };
            match &env {
                Env::Offer { corrupt, fail_download, stale } => {
                    if let Some(ix) = corrupt {
                        let key = actions[*ix % 3].digest.hex().to_string();
                        let blob = blobs.get_mut(&key).unwrap();
                        let n = blob.len();
                        blob[*ix % n] ^= 0x80;
                    }
                    if *fail_download {
                        link.failing_downloads.push(HVAC.into());
                    }
                    if *stale {
                        actions[2].from_version = SemanticVersion::new(99, 0, 0);
                    }
                    let manifest = UpdateManifest::new("p", "car-1", actions.clone(), 0);
                    link.polls.push_back(Ok(PollResponse::Update { manifest, catalog_revision: 1 }));
                }
                Env::UpToDate => {}
                Env::PollError => link.polls.push_back(Err(LinkError::Unreachable("x".into()))),
            }
            link.blobs = blobs;
            if let Some(s) = crash_slot {
                let slot = [ABS, HVAC, AIRBAG][s as usize];
                device.add_faults([ota_core::installer::ScheduledFault {
                    slot: slot.into(),
                    attempt: installs.get(slot).copied().unwrap_or(0) + 1,
                    fault: InstallFault::Crash,
                }]);
            }

            let mut effects = Vec::new();
            let mut t = agent.next_poll_at;
            let mut ticks = 0;
            loop {
                effects.extend(agent.tick(t, &mut link, &mut device));
                t += 1;
                ticks += 1;
                prop_assert!(ticks <= 6 + MAX_REPORT_ATTEMPTS as usize, "agent did not return to IDLE");
                if agent.phase == Phase::Idle {
                    break;
                }
            }

            // No partial trust.
            let mut verified = std::collections::BTreeSet::new();
            for e in &effects {
                match e {
                    Effect::Verify { slot, ok: true } => { verified.insert(slot.clone()); }
                    Effect::Install { slot, .. } => {
                        prop_assert!(verified.contains(slot));
                        *installs.entry(slot.clone()).or_default() += 1;
                    }
                    _ => {}
                }
            }
            // Per-slot atomicity.
            let after = agent.local_profile.installed_state();
            for a in &actions {
                let now = after[&a.slot_name];
                prop_assert!(now == installed[&a.slot_name] || now == a.to_version);
                prop_assert_eq!(device.installed_version(&a.slot_name), Some(now));
            }
            // Report fidelity.
            if let Some(report) = link.reports.last() {
                for (slot, before) in &installed {
                    match report.outcomes.get(slot) {
                        Some(o) => {
                            prop_assert_eq!(o.from_version, *before);
                            prop_assert_eq!(o.resulting_version, after[slot]);
                            prop_assert_eq!(o.status == ActionStatus::Succeeded, after[slot] != *before);
                        }
                        None => prop_assert_eq!(after[slot], *before),
                    }
                }
            }
        }
    }
}
