use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use ota_core::cloud::{
    ActionOutcome, ActionStatus, CampaignSpec, CampaignState, Clock, CloudService, InstallReport,
    PollRequest, PollResponse, RollbackRequest, RolloutStrategy, SharedService, TargetFilter,
};
use ota_core::image;
use ota_core::model::{ArtifactDescriptor, ArtifactKind, ArtifactRef, EcuDescriptor, HardwareRequirement};
use ota_core::resolver::{DependencyMatrix, VersionConstraint};
use ota_core::sim::{run_scenario, run_scenario_with, replay_check, Scenario};
use ota_core::store::{ArtifactStore, Permission, TokenTable};
use ota_core::{compute_digest, SemanticVersion, VehicleProfile};
use ota_http::api::{ArtifactsQuery, PinRequest};
use ota_http::{Client, LoopbackHttp, ServerHandle};

const ADMIN: &str = "admin-token";
const PUBLISHER: &str = "publisher-token";
const VEHICLE: &str = "vehicle-token";
const ABS: &str = "ABS Control Module";
const HVAC: &str = "HVAC Control Module";

fn v(s: &str) -> SemanticVersion {
    s.parse().unwrap()
}

fn firmware(id: &str, slot: &str, version: &str) -> (ArtifactDescriptor, Vec<u8>) {
    let payload = image::encode_image(ArtifactKind::FirmwareBinary, v(version), id.as_bytes());
    let d = ArtifactDescriptor {
        artifact_id: id.into(),
        kind: ArtifactKind::FirmwareBinary,
        slot_name: slot.into(),
        version: v(version),
        digest: compute_digest(&payload),
        size_bytes: payload.len() as u64,
        requirement: HardwareRequirement::default(),
        tags: BTreeMap::new(),
        model_meta: None,
        embedded_model: None,
    };
    (d, payload)
}

fn car(id: &str, variant: &str) -> VehicleProfile {
    let mut p = VehicleProfile::new(id, variant);
    for slot in [ABS, HVAC] {
        p.ecus.push(EcuDescriptor {
            slot_name: slot.into(),
            hardware_model: None,
            hardware_version: v("1.0.0"),
            installed_firmware: v("1.0.0"),
        });
    }
    p
}

struct Fixture {
    server: ServerHandle,
    service: SharedService,
    clock: Clock,
}

impl Fixture {
    fn client(&self, token: &str) -> Client {
        Client::new(&self.server.url(), token)
    }
}

fn fixture() -> Fixture {
    let tokens = TokenTable::new()
        .with(ADMIN, &[Permission::Admin, Permission::Fetch])
        .with(PUBLISHER, &[Permission::Publish])
        .with(VEHICLE, &[Permission::Fetch]);
    let store = Arc::new(ArtifactStore::in_memory(tokens));
    let mut matrix = DependencyMatrix::new();
    matrix.insert("variant-1", ABS, VersionConstraint::at_most(v("2.0.0")));
    matrix.insert("variant-1", HVAC, VersionConstraint::at_most(v("2.0.0")));
    let service = Arc::new(Mutex::new(CloudService::new(store, matrix)));
    let clock = Clock::manual(0);
    let addr = SocketAddr::from((Ipv4Addr::LOCALHOST, 0));
    let server = ServerHandle::spawn(service.clone(), clock.clone(), addr).unwrap();
    Fixture { server, service, clock }
}

fn seed_catalog(f: &Fixture) {
    let publisher = f.client(PUBLISHER);
    for (id, slot) in [("abs-fw", ABS), ("hvac-fw", HVAC)] {
        for ver in ["1.0.0", "2.0.0"] {
            let (d, payload) = firmware(id, slot, ver);
            publisher.publish(&d, &payload).unwrap();
        }
    }
}

fn scenario(name: &str) -> Scenario {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect();
    Scenario::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn loopback_logs_match_in_process() {
    for name in ["s4a-update.json", "s4a-rollback.json", "detector-update.json"] {
        let s = scenario(name);
        let direct = run_scenario(&s).unwrap();
        let mut transport = LoopbackHttp::new();
        let wire = run_scenario_with(&s, &mut transport).unwrap();
        assert!(wire.passed(), "{name}: {:?}", wire.assertions);
        let a = direct.log.without_latency();
        let b = wire.log.without_latency();
        assert_eq!(replay_check(&a, &b), Ok(()), "{name}");
    }
}

#[test]
fn tokens_are_checked_per_route() {
    let f = fixture();
    let (d, payload) = firmware("abs-fw", ABS, "1.0.0");

    let anonymous = f.client("");
    let err = anonymous.fleet().unwrap_err();
    assert_eq!(err.status(), Some(401));

    let err = f.client("nope").publish(&d, &payload).unwrap_err();
    assert_eq!(err.status(), Some(401));

    let err = f.client(VEHICLE).publish(&d, &payload).unwrap_err();
    assert_eq!(err.status(), Some(403));

    let spec = CampaignSpec {
        campaign_id: Some("c".into()),
        target: TargetFilter::default(),
        strategy: RolloutStrategy::full(),
        catalog_scope: None,
    };
    let err = f.client(VEHICLE).create_campaign(&spec).unwrap_err();
    assert_eq!(err.status(), Some(403));

    f.client(PUBLISHER).publish(&d, &payload).unwrap();
    let err = f.client(PUBLISHER).publish(&d, &payload).unwrap_err();
    assert_eq!(err.status(), Some(409));
}

#[test]
fn artifact_routes_round_trip() {
    let f = fixture();
    seed_catalog(&f);
    let reader = f.client(VEHICLE);

    let catalog = reader.catalog(&ArtifactsQuery::default()).unwrap();
    assert_eq!(catalog.artifacts.len(), 4);
    let abs = reader
        .catalog(&ArtifactsQuery {
            slot: Some(ABS.into()),
            ..ArtifactsQuery::default()
        })
        .unwrap();
    assert_eq!(abs.artifacts.len(), 2);

    let d = reader.descriptor("abs-fw", &v("2.0.0")).unwrap();
    let bytes = reader.download(&ota_core::resolver::blob_path(&d.digest)).unwrap();
    assert_eq!(compute_digest(&bytes), d.digest);
    assert_eq!(reader.descriptor("abs-fw", &v("9.0.0")).unwrap_err().status(), Some(404));

    let (mut bad, payload) = firmware("hvac-fw", HVAC, "3.0.0");
    bad.digest = compute_digest(b"something else");
    let err = f.client(PUBLISHER).publish(&bad, &payload).unwrap_err();
    assert_eq!(err.status(), Some(422));

    let pins = f
        .client(ADMIN)
        .pin(&PinRequest {
            variant_id: "variant-1".into(),
            slot_name: ABS.into(),
            version: v("1.0.0"),
        })
        .unwrap();
    assert_eq!(pins, reader.pins().unwrap());
    let err = f
        .client(ADMIN)
        .pin(&PinRequest {
            variant_id: "variant-1".into(),
            slot_name: ABS.into(),
            version: v("7.0.0"),
        })
        .unwrap_err();
    assert_eq!(err.status(), Some(422));
}

#[test]
fn vehicle_protocol_over_http() {
    let f = fixture();
    seed_catalog(&f);
    let vehicle = f.client(VEHICLE);
    let admin = f.client(ADMIN);

    let ack = vehicle.register(&car("car-1", "variant-1")).unwrap();
    assert!(!ack.already_registered);
    assert_eq!(vehicle.register(&car("car-1", "variant-2")).unwrap_err().status(), Some(409));

    let installed: BTreeMap<String, SemanticVersion> =
        [(ABS.to_string(), v("1.0.0")), (HVAC.to_string(), v("1.0.0"))].into();
    let request = PollRequest {
        vehicle_id: "car-1".into(),
        installed: installed.clone(),
        catalog_revision: 0,
    };
    let revision = f.service.lock().unwrap().store().revision();
    assert_eq!(
        vehicle.poll(&request).unwrap(),
        PollResponse::UpToDate { catalog_revision: revision }
    );

    f.clock.set(1_000);
    let campaign = admin
        .create_campaign(&CampaignSpec {
            campaign_id: Some("upgrade".into()),
            target: TargetFilter::variants(["variant-1"]),
            strategy: RolloutStrategy::full(),
            catalog_scope: None,
        })
        .unwrap();
    assert_eq!(campaign.state, CampaignState::WaveActive { wave: 0 });

    let PollResponse::Update { manifest, catalog_revision } = vehicle.poll(&request).unwrap() else {
        panic!("expected an update");
    };
    assert_eq!(catalog_revision, revision);
    assert_eq!(manifest.actions.len(), 2);
    for action in &manifest.actions {
        let bytes = vehicle.download(&action.download_url).unwrap();
        assert_eq!(compute_digest(&bytes), action.digest);
    }

    let outcomes = manifest
        .actions
        .iter()
        .map(|a| {
            let outcome = ActionOutcome {
                status: ActionStatus::Succeeded,
                from_version: a.from_version,
                resulting_version: a.to_version,
            };
            (a.slot_name.clone(), outcome)
        })
        .collect();
    let report = InstallReport {
        vehicle_id: "car-1".into(),
        manifest_id: manifest.manifest_id.clone(),
        outcomes,
        digest_verified: true,
        timestamp: 2_000,
        rejection: None,
    };
    assert!(!vehicle.report(&report).unwrap().duplicate);
    assert!(vehicle.report(&report).unwrap().duplicate);

    let status = admin.campaign("upgrade").unwrap();
    assert_eq!(status.state, CampaignState::Completed);
    assert_eq!(admin.campaigns().unwrap().len(), 1);
    assert_eq!(admin.campaign("missing").unwrap_err().status(), Some(404));

    let fleet = vehicle.fleet().unwrap();
    assert_eq!(fleet.vehicles.len(), 1);
    assert_eq!(fleet.vehicles[0].slots[ABS], v("2.0.0"));

    let err = admin
        .rollback(&RollbackRequest {
            variants: ["variant-1".to_string()].into(),
            ..RollbackRequest::default()
        })
        .unwrap_err();
    assert_eq!(err.status(), Some(422));

    let mut foreign = report.clone();
    foreign.vehicle_id = "car-2".into();
    assert_eq!(vehicle.report(&foreign).unwrap_err().status(), Some(404));
}

#[test]
fn compose_route_publishes_container() {
    let f = fixture();
    let publisher = f.client(PUBLISHER);
    let container = image::encode_image(ArtifactKind::ContainerImage, v("1.0.0"), b"rootfs");
    let mut d = firmware("perception", "perception", "1.0.0").0;
    d.kind = ArtifactKind::ContainerImage;
    d.digest = compute_digest(&container);
    d.size_bytes = container.len() as u64;
    publisher.publish(&d, &container).unwrap();

    let request = ota_http::api::ComposeRequest {
        container: ArtifactRef::new("perception", v("1.0.0")),
        model: ArtifactRef::new("detector", v("1.0.0")),
        version: v("1.1.0"),
    };
    assert_eq!(publisher.compose(&request).unwrap_err().status(), Some(404));
}

#[test]
fn unreachable_server_is_a_connection_error() {
    let f = fixture();
    let url = f.server.url();
    f.server.stop().unwrap();
    let err = Client::new(&url, VEHICLE).fleet().unwrap_err();
    assert!(matches!(err, ota_http::ClientError::Connection { .. }), "{err}");
}
