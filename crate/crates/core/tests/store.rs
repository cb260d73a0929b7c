use std::collections::BTreeMap;

use ota_core::image;
use ota_core::model::{ArtifactDescriptor, ArtifactKind, ArtifactRef, HardwareRequirement, ModelMetadata};
use ota_core::store::{ArtifactStore, CatalogFilter, Permission, StoreError, TokenTable};
use ota_core::{compute_digest, SemanticVersion};

const ADMIN: &str = "admin-token";

fn v(s: &str) -> SemanticVersion {
    s.parse().unwrap()
}

fn tokens() -> TokenTable {
    TokenTable::new()
        .with(ADMIN, &[Permission::Publish, Permission::Fetch, Permission::Admin])
        .with("publish-only", &[Permission::Publish])
        .with("fetch-only", &[Permission::Fetch])
        .with("admin-only", &[Permission::Admin])
}

fn artifact(id: &str, kind: ArtifactKind, slot: &str, version: &str, payload: &[u8]) -> ArtifactDescriptor {
    ArtifactDescriptor {
        artifact_id: id.into(),
        kind,
        slot_name: slot.into(),
        version: v(version),
        digest: compute_digest(payload),
        size_bytes: payload.len() as u64,
        requirement: HardwareRequirement::default(),
        tags: BTreeMap::new(),
        model_meta: (kind == ArtifactKind::AiModel).then(|| ModelMetadata {
            accuracy: 0.8,
            evaluation_dataset: "lab".into(),
            detectable_classes: vec!["robot".into()],
        }),
        embedded_model: None,
    }
}

fn firmware(slot: &str, version: &str) -> (ArtifactDescriptor, Vec<u8>) {
    let payload = image::encode_image(ArtifactKind::FirmwareBinary, v(version), slot.as_bytes());
    let id = format!("{}-fw", slot.split(' ').next().unwrap().to_lowercase());
    (artifact(&id, ArtifactKind::FirmwareBinary, slot, version, &payload), payload)
}

fn lab_firmware() -> Vec<(ArtifactDescriptor, Vec<u8>)> {
    vec![
        firmware("ABS Control Module", "2.0.0"),
        firmware("HVAC Control Module", "2.0.0"),
        firmware("HVAC Control Module", "3.0.0"),
        firmware("Airbag Control Module", "1.0.0"),
        firmware("Airbag Control Module", "2.0.0"),
    ]
}

#[test]
fn publish_bumps_revision_and_rejects_duplicates() {
    let store = ArtifactStore::in_memory(tokens());
    let (d, payload) = firmware("ABS Control Module", "2.0.0");
    assert_eq!(store.revision(), 0);
    store.publish(d.clone(), &payload, ADMIN).unwrap();
    assert_eq!(store.revision(), 1);
    assert!(matches!(store.publish(d, &payload, ADMIN), Err(StoreError::Duplicate(_))));
    assert_eq!(store.revision(), 1);
}

#[test]
fn corrupted_payload_is_rejected_and_nothing_stored() {
    let store = ArtifactStore::in_memory(tokens());
    let (d, mut payload) = firmware("ABS Control Module", "2.0.0");
    payload[10] ^= 0xff;
    assert!(matches!(
        store.publish(d.clone(), &payload, ADMIN),
        Err(StoreError::DigestMismatch { .. })
    ));
    assert!(store.list_catalog(&CatalogFilter::default(), ADMIN).unwrap().artifacts.is_empty());
    assert!(store.fetch_payload(&d.digest, ADMIN).is_err());
}

#[test]
fn fetch_roundtrip_and_not_found() {
    let store = ArtifactStore::in_memory(tokens());
    let (d, payload) = firmware("ABS Control Module", "2.0.0");
    store.publish(d.clone(), &payload, ADMIN).unwrap();
    assert_eq!(store.fetch_payload(&d.digest, "fetch-only").unwrap(), payload);
    assert_eq!(store.fetch_descriptor(&d.artifact_id, d.version, "fetch-only").unwrap(), d);
    assert!(matches!(
        store.fetch_payload(&compute_digest(b"nope"), ADMIN),
        Err(StoreError::NotFound(_))
    ));
    assert!(matches!(
        store.publish(firmware("HVAC Control Module", "2.0.0").0, &firmware("HVAC Control Module", "2.0.0").1, "fetch-only"),
        Err(StoreError::PermissionDenied { needed: Permission::Publish })
    ));
}

#[test]
fn catalog_filters() {
    let store = ArtifactStore::in_memory(tokens());
    for (d, p) in lab_firmware() {
        store.publish(d, &p, ADMIN).unwrap();
    }
    let model_bytes = b"weights".to_vec();
    let mut model = artifact("detector", ArtifactKind::AiModel, "detector", "1.0.0", &model_bytes);
    model.tags.insert("stage".into(), "prod".into());
    store.publish(model, &model_bytes, ADMIN).unwrap();

    let fw = store.list_catalog(&CatalogFilter::kind(ArtifactKind::FirmwareBinary), ADMIN).unwrap();
    assert_eq!(fw.artifacts.len(), 5);
    let all = store.list_catalog(&CatalogFilter::default(), ADMIN).unwrap();
    assert_eq!(all.artifacts.len(), 6);
    let mut absent = CatalogFilter::default();
    absent.tags.insert("stage".into(), "beta".into());
    let none = store.list_catalog(&absent, ADMIN).unwrap();
    assert!(none.artifacts.is_empty());
    assert_eq!(none.revision, all.revision);
    let slot = CatalogFilter { slot: Some("HVAC Control Module".into()), ..Default::default() };
    assert_eq!(store.list_catalog(&slot, ADMIN).unwrap().artifacts.len(), 2);
}

#[test]
fn rollback_pins() {
    let store = ArtifactStore::in_memory(tokens());
    let (d, p) = firmware("ABS Control Module", "1.0.0");
    store.publish(d, &p, ADMIN).unwrap();
    let (d, p) = firmware("ABS Control Module", "2.0.0");
    store.publish(d, &p, ADMIN).unwrap();

    store.set_rollback_pin("variant-1", "ABS Control Module", v("1.0.0"), ADMIN).unwrap();
    assert_eq!(store.rollback_pins().get("variant-1", "ABS Control Module"), Some(v("1.0.0")));
    assert!(matches!(
        store.set_rollback_pin("variant-1", "ABS Control Module", v("0.1.0"), ADMIN),
        Err(StoreError::UnknownPinTarget { .. })
    ));
    store.set_rollback_pin("variant-1", "ABS Control Module", v("2.0.0"), ADMIN).unwrap();
    assert_eq!(store.rollback_pins().get("variant-1", "ABS Control Module"), Some(v("2.0.0")));
    assert_eq!(store.revision(), 2);
}

fn model_image(classes: &[&str], version: &str) -> Vec<u8> {
    let meta = ModelMetadata {
        accuracy: 0.9,
        evaluation_dataset: "lab".into(),
        detectable_classes: classes.iter().map(|s| s.to_string()).collect(),
    };
    image::encode_image(ArtifactKind::AiModel, v(version), &image::encode_model_body(&meta, b"w"))
}

#[test]
fn compose_container_with_model() {
    let store = ArtifactStore::in_memory(tokens());
    let container_bytes = image::encode_image(ArtifactKind::ContainerImage, v("1.0.0"), b"ros2 node");
    let mut container = artifact("perception", ArtifactKind::ContainerImage, "perception", "1.0.0", &container_bytes);
    container.requirement.required_sensors.insert("camera".into());
    container.requirement.min_compute_tier = Some(2);
    store.publish(container, &container_bytes, ADMIN).unwrap();

    let model_bytes = model_image(&["wooden-block", "robot", "cone"], "2.0.0");
    let mut model = artifact("detector", ArtifactKind::AiModel, "detector", "2.0.0", &model_bytes);
    model.requirement.required_sensors.insert("camera".into());
    model.requirement.min_compute_tier = Some(3);
    store.publish(model, &model_bytes, ADMIN).unwrap();

    let composed = store
        .compose_container_with_model(
            &ArtifactRef::new("perception", v("1.0.0")),
            &ArtifactRef::new("detector", v("2.0.0")),
            v("1.1.0"),
            ADMIN,
        )
        .unwrap();
    assert_eq!(composed.version, v("1.1.0"));
    assert_eq!(composed.kind, ArtifactKind::ContainerImage);
    assert_eq!(composed.embedded_model, Some(ArtifactRef::new("detector", v("2.0.0"))));
    assert_eq!(composed.requirement.required_sensors, ["camera".to_string()].into());
    assert_eq!(composed.requirement.min_compute_tier, Some(3));

    let payload = store.fetch_payload(&composed.digest, ADMIN).unwrap();
    let (c, m) = image::split_composed(&payload).unwrap();
    let part = image::decode_image(ArtifactKind::ContainerImage, c).unwrap();
    let original = image::decode_image(ArtifactKind::ContainerImage, &container_bytes).unwrap();
    assert_eq!(part.version, composed.version);
    assert_eq!(part.body, original.body);
    assert_eq!(m, &model_bytes[..]);

    let err = store
        .compose_container_with_model(
            &ArtifactRef::new("detector", v("2.0.0")),
            &ArtifactRef::new("detector", v("2.0.0")),
            v("9.0.0"),
            ADMIN,
        )
        .unwrap_err();
    assert!(matches!(err, StoreError::KindMismatch { .. }));
    assert!(matches!(
        store.compose_container_with_model(
            &ArtifactRef::new("perception", v("7.0.0")),
            &ArtifactRef::new("detector", v("2.0.0")),
            v("9.0.0"),
            ADMIN,
        ),
        Err(StoreError::NotFound(_))
    ));
}

#[test]
fn embedded_model_must_exist() {
    let store = ArtifactStore::in_memory(tokens());
    let bytes = b"c".to_vec();
    let mut d = artifact("perception", ArtifactKind::ContainerImage, "perception", "1.0.0", &bytes);
    d.embedded_model = Some(ArtifactRef::new("ghost", v("1.0.0")));
    assert!(matches!(store.publish(d, &bytes, ADMIN), Err(StoreError::NotFound(_))));
}

/// Every operation against every single-permission token.
#[test]
fn permission_table_is_exhaustive() {
    let store = ArtifactStore::in_memory(tokens());
    let (seed, seed_bytes) = firmware("ABS Control Module", "1.0.0");
    store.publish(seed.clone(), &seed_bytes, ADMIN).unwrap();
    let cbytes = image::encode_image(ArtifactKind::ContainerImage, v("1.0.0"), b"x");
    store.publish(artifact("svc", ArtifactKind::ContainerImage, "svc", "1.0.0", &cbytes), &cbytes, ADMIN).unwrap();
    let mbytes = model_image(&["robot"], "1.0.0");
    store.publish(artifact("det", ArtifactKind::AiModel, "det", "1.0.0", &mbytes), &mbytes, ADMIN).unwrap();

    let cases = [
        ("publish-only", Permission::Publish),
        ("fetch-only", Permission::Fetch),
        ("admin-only", Permission::Admin),
    ];
    let mut counter = 0;
    for (token, held) in cases {
        counter += 1;
        let (d, p) = firmware("ABS Control Module", &format!("5.{counter}.0"));
        let results: [(Permission, bool); 6] = [
            (Permission::Publish, store.publish(d, &p, token).is_ok()),
            (Permission::Fetch, store.fetch_descriptor(&seed.artifact_id, seed.version, token).is_ok()),
            (Permission::Fetch, store.fetch_payload(&seed.digest, token).is_ok()),
            (Permission::Fetch, store.list_catalog(&CatalogFilter::default(), token).is_ok()),
            (Permission::Admin, store.set_rollback_pin("v", "ABS Control Module", v("1.0.0"), token).is_ok()),
            (
                Permission::Publish,
                store
                    .compose_container_with_model(
                        &ArtifactRef::new("svc", v("1.0.0")),
                        &ArtifactRef::new("det", v("1.0.0")),
                        v(&format!("2.{counter}.0")),
                        token,
                    )
                    .is_ok(),
            ),
        ];
        for (ix, (needed, ok)) in results.into_iter().enumerate() {
            assert_eq!(ok, needed == held, "token {token} op {ix}");
        }
    }
    assert!(matches!(
        store.list_catalog(&CatalogFilter::default(), "bogus"),
        Err(StoreError::Unauthenticated)
    ));
}

#[test]
fn reopen_reproduces_identical_index() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let store = ArtifactStore::open(dir.path(), tokens()).unwrap();
        for (d, p) in lab_firmware() {
            store.publish(d, &p, ADMIN).unwrap();
        }
        store.set_rollback_pin("variant-1", "HVAC Control Module", v("2.0.0"), ADMIN).unwrap();
        store.canonical_index()
    };
    let on_disk = std::fs::read(dir.path().join("index.json")).unwrap();
    assert_eq!(on_disk, before);

    let reopened = ArtifactStore::open(dir.path(), tokens()).unwrap();
    assert_eq!(reopened.canonical_index(), before);
    assert_eq!(reopened.revision(), 5);
    for (d, p) in lab_firmware() {
        assert_eq!(reopened.fetch_payload(&d.digest, ADMIN).unwrap(), p);
    }
}

#[test]
fn stray_temp_files_are_discarded_on_open() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = ArtifactStore::open(dir.path(), tokens()).unwrap();
        let (d, p) = firmware("ABS Control Module", "2.0.0");
        store.publish(d, &p, ADMIN).unwrap();
    }
    std::fs::write(dir.path().join("index.json.tmp"), b"{garbage").unwrap();
    std::fs::write(dir.path().join("blobs").join("deadbeef.tmp"), b"partial").unwrap();
    let store = ArtifactStore::open(dir.path(), tokens()).unwrap();
    assert_eq!(store.revision(), 1);
    assert!(!dir.path().join("index.json.tmp").exists());
}

#[test]
fn missing_blob_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let (d, p) = firmware("ABS Control Module", "2.0.0");
    {
        let store = ArtifactStore::open(dir.path(), tokens()).unwrap();
        store.publish(d.clone(), &p, ADMIN).unwrap();
    }
    std::fs::remove_file(dir.path().join("blobs").join(d.digest.hex())).unwrap();
    assert!(matches!(ArtifactStore::open(dir.path(), tokens()), Err(StoreError::Corrupt(_))));
}
