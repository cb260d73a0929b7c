#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use ota_core::image;
use ota_core::model::{ArtifactDescriptor, ArtifactKind, HardwareRequirement};
use ota_core::{compute_digest, SemanticVersion};

pub const ADMIN: &str = "operator";
pub const VEHICLE: &str = "vehicle";

pub fn otactl() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_otactl"));
    cmd.env_remove("FLEET_SERVER").env_remove("FLEET_TOKEN");
    cmd
}

pub fn scenario_path(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect()
}

pub fn v(s: &str) -> SemanticVersion {
    s.parse().unwrap()
}

pub fn firmware(id: &str, slot: &str, version: &str, body: &[u8]) -> (ArtifactDescriptor, Vec<u8>) {
    let payload = image::encode_image(ArtifactKind::FirmwareBinary, v(version), body);
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

/// Writes config, token table and matrix for `otactl serve` into `dir`.
pub fn write_server_config(dir: &Path, matrix: &serde_json::Value) -> PathBuf {
    let tokens = serde_json::json!({
        ADMIN: ["PUBLISH", "FETCH", "ADMIN"],
        VEHICLE: ["FETCH"],
    });
    std::fs::write(dir.join("tokens.json"), tokens.to_string()).unwrap();
    std::fs::write(dir.join("matrix.json"), matrix.to_string()).unwrap();
    let config = serde_json::json!({
        "listen": "127.0.0.1:0",
        "store_root": "store",
        "tokens": "tokens.json",
        "matrix": "matrix.json",
    });
    let path = dir.join("server.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path
}

/// A running `otactl serve` child; SIGKILLed on drop.
pub struct ServerProcess {
    child: Child,
    pub url: String,
}

impl ServerProcess {
    pub fn start(config: &Path) -> Self {
        let mut child = otactl()
            .args(["serve", "--config"])
            .arg(config)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let url = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected serve output {line:?}"))
            .to_string();
        Self { child, url }
    }

    /// `kill -9`.
    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }

    /// Runs an `otactl` subcommand against this server.
    pub fn ctl(&self, token: &str, args: &[&str]) -> Output {
        otactl()
            .args(["--server", &self.url, "--token", token])
            .args(args)
            .output()
            .unwrap()
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
