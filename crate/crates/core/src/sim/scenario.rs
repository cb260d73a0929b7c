use std::collections::BTreeMap;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Phase, DEFAULT_POLL_INTERVAL_MS};
use crate::cloud::{CampaignSpec, RollbackRequest};
use crate::digest::compute_digest;
use crate::image;
use crate::model::{ArtifactDescriptor, ArtifactKind, ArtifactRef, HardwareRequirement, ModelMetadata, VehicleProfile};
use crate::resolver::DependencyMatrix;
use crate::version::SemanticVersion;
use crate::Millis;

pub const DEFAULT_MAX_TIME_MS: Millis = 3_600_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub fleet: Vec<VehicleProfile>,
    #[serde(default)]
    pub matrix: DependencyMatrix,
    #[serde(default)]
    pub publishes: Vec<PublishStep>,
    #[serde(default)]
    pub composes: Vec<ComposeStep>,
    #[serde(default)]
    pub pins: Vec<PinStep>,
    #[serde(default)]
    pub campaigns: Vec<CampaignStep>,
    #[serde(default)]
    pub rollbacks: Vec<RollbackStep>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
    #[serde(default)]
    pub network: NetworkModel,
    #[serde(default = "default_poll")]
    pub poll_interval_ms: Millis,
    #[serde(default = "default_cap")]
    pub max_time_ms: Millis,
}

fn default_poll() -> Millis {
    DEFAULT_POLL_INTERVAL_MS
}

fn default_cap() -> Millis {
    DEFAULT_MAX_TIME_MS
}

impl Scenario {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        Self {
            name: name.into(),
            seed,
            fleet: Vec::new(),
            matrix: DependencyMatrix::new(),
            publishes: Vec::new(),
            composes: Vec::new(),
            pins: Vec::new(),
            campaigns: Vec::new(),
            rollbacks: Vec::new(),
            faults: Vec::new(),
            assertions: Vec::new(),
            network: NetworkModel::default(),
            poll_interval_ms: DEFAULT_POLL_INTERVAL_MS,
            max_time_ms: DEFAULT_MAX_TIME_MS,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// One-way latency added between consecutive agent steps, uniform in
/// `[min_ms, max_ms]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub latency_min_ms: Millis,
    pub latency_max_ms: Millis,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            latency_min_ms: 10,
            latency_max_ms: 100,
        }
    }
}

/// Payload bytes derived from a size and a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadSpec {
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishStep {
    #[serde(default)]
    pub at: Millis,
    pub artifact_id: String,
    pub kind: ArtifactKind,
    pub slot_name: String,
    pub version: SemanticVersion,
    #[serde(default)]
    pub requirement: HardwareRequirement,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    #[serde(default)]
    pub model_meta: Option<ModelMetadata>,
    pub payload: PayloadSpec,
}

impl PublishStep {
    /// Framed payload bytes as the matching installer expects them.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut body = vec![0u8; self.payload.size];
        ChaCha8Rng::seed_from_u64(self.payload.seed).fill_bytes(&mut body);
        let body = match (&self.kind, &self.model_meta) {
            (ArtifactKind::AiModel, Some(meta)) => image::encode_model_body(meta, &body),
            _ => body,
        };
        image::encode_image(self.kind, self.version, &body)
    }

    pub fn descriptor(&self, payload: &[u8]) -> ArtifactDescriptor {
        ArtifactDescriptor {
            artifact_id: self.artifact_id.clone(),
            kind: self.kind,
            slot_name: self.slot_name.clone(),
            version: self.version,
            digest: compute_digest(payload),
            size_bytes: payload.len() as u64,
            requirement: self.requirement.clone(),
            tags: self.tags.clone(),
            model_meta: self.model_meta.clone(),
            embedded_model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeStep {
    #[serde(default)]
    pub at: Millis,
    pub container: ArtifactRef,
    pub model: ArtifactRef,
    pub version: SemanticVersion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinStep {
    #[serde(default)]
    pub at: Millis,
    pub variant_id: String,
    pub slot_name: String,
    pub version: SemanticVersion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignStep {
    #[serde(default)]
    pub at: Millis,
    #[serde(flatten)]
    pub spec: CampaignSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackStep {
    #[serde(default)]
    pub at: Millis,
    #[serde(flatten)]
    pub request: RollbackRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    /// Installer crashes mid-install.
    InstallFailure,
    /// Container starts but its health probe fails.
    ProbeFailure,
    /// One byte of a downloaded payload is flipped in transit.
    CorruptPayload,
    DownloadFailure,
    /// A report attempt is lost.
    DropReport,
    PollFailure,
}

/// `occurrence` is 1-based and counts installs or downloads of `slot`, or
/// polls or reports of the vehicle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub vehicle_id: String,
    #[serde(default)]
    pub slot: Option<String>,
    #[serde(default = "first")]
    pub occurrence: u32,
    /// Position to corrupt, taken modulo the payload length.
    #[serde(default)]
    pub byte_index: Option<usize>,
}

fn first() -> u32 {
    1
}

/// Checked at `at`, or at the end of the run when absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    #[serde(default)]
    pub at: Option<Millis>,
    #[serde(flatten)]
    pub check: Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StateSource {
    Ledger,
    Agent,
    Device,
    /// Ledger, agent and device must all agree.
    #[default]
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Check {
    VehicleVersions {
        vehicle_id: String,
        versions: BTreeMap<String, SemanticVersion>,
        #[serde(default)]
        source: StateSource,
    },
    CampaignState {
        campaign_id: String,
        state: String,
    },
    ModelClasses {
        vehicle_id: String,
        slot: String,
        contains: Vec<String>,
    },
    AgentPhase {
        vehicle_id: String,
        phase: Phase,
    },
}

impl Check {
    pub fn describe(&self) -> String {
        match self {
            Check::VehicleVersions {
                vehicle_id,
                versions,
                ..
            } => {
                let v: Vec<String> = versions.iter().map(|(s, v)| format!("{s}={v}")).collect();
                format!("{vehicle_id} at {{{}}}", v.join(", "))
            }
            Check::CampaignState { campaign_id, state } => format!("campaign {campaign_id} is {state}"),
            Check::ModelClasses {
                vehicle_id,
                slot,
                contains,
            } => format!("{vehicle_id}/{slot} detects {}", contains.join(", ")),
            Check::AgentPhase { vehicle_id, phase } => format!("agent {vehicle_id} is {phase}"),
        }
    }
}
