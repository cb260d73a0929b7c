use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::digest::compute_digest;
use crate::model::{ArtifactRef, VehicleProfile};
use crate::version::SemanticVersion;
use crate::Millis;

pub const DEFAULT_WAVE_TIMEOUT_MS: Millis = 60_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RolloutMode {
    Full,
    Staged,
    Canary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStrategy {
    pub mode: RolloutMode,
    pub wave_fractions: Vec<f64>,
    /// Minimum success ratio a wave needs before the next one opens.
    pub health_threshold: f64,
    #[serde(default = "default_timeout")]
    pub wave_timeout_ms: Millis,
}

fn default_timeout() -> Millis {
    DEFAULT_WAVE_TIMEOUT_MS
}

impl RolloutStrategy {
    pub fn full() -> Self {
        Self {
            mode: RolloutMode::Full,
            wave_fractions: vec![1.0],
            health_threshold: 1.0,
            wave_timeout_ms: DEFAULT_WAVE_TIMEOUT_MS,
        }
    }

    pub fn canary(fraction: f64, health_threshold: f64) -> Self {
        Self {
            mode: RolloutMode::Canary,
            wave_fractions: vec![fraction, 1.0 - fraction],
            health_threshold,
            wave_timeout_ms: DEFAULT_WAVE_TIMEOUT_MS,
        }
    }

    pub fn staged(wave_fractions: Vec<f64>, health_threshold: f64) -> Self {
        Self {
            mode: RolloutMode::Staged,
            wave_fractions,
            health_threshold,
            wave_timeout_ms: DEFAULT_WAVE_TIMEOUT_MS,
        }
    }

    pub fn with_timeout(mut self, wave_timeout_ms: Millis) -> Self {
        self.wave_timeout_ms = wave_timeout_ms;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        const EPS: f64 = 1e-9;
        if self.wave_fractions.is_empty() {
            return Err("wave_fractions must not be empty".into());
        }
        if self.wave_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err("every wave fraction must lie in (0, 1]".into());
        }
        let total: f64 = self.wave_fractions.iter().sum();
        if (total - 1.0).abs() > EPS {
            return Err(format!("wave fractions must cover the fleet exactly, sum is {total}"));
        }
        if !(0.0..=1.0).contains(&self.health_threshold) {
            return Err("health_threshold must lie in [0, 1]".into());
        }
        match self.mode {
            RolloutMode::Full if self.wave_fractions.len() != 1 => {
                Err("FULL rollouts have exactly one wave".into())
            }
            RolloutMode::Canary if self.wave_fractions.len() < 2 => {
                Err("CANARY rollouts need a canary wave and at least one more".into())
            }
            _ => Ok(()),
        }
    }
}

/// Which registered vehicles a campaign targets. Empty sets match all.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetFilter {
    pub variants: BTreeSet<String>,
    pub vehicle_ids: BTreeSet<String>,
    pub tags: BTreeMap<String, String>,
}

impl TargetFilter {
    pub fn variants<I, S>(variants: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            variants: variants.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn matches(&self, profile: &VehicleProfile) -> bool {
        (self.variants.is_empty() || self.variants.contains(&profile.variant_id))
            && (self.vehicle_ids.is_empty() || self.vehicle_ids.contains(&profile.vehicle_id))
            && self.tags.iter().all(|(k, v)| profile.tags.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    #[serde(default)]
    pub campaign_id: Option<String>,
    #[serde(default)]
    pub target: TargetFilter,
    pub strategy: RolloutStrategy,
    /// Restricts the campaign to these artifacts (version pinning).
    #[serde(default)]
    pub catalog_scope: Option<Vec<ArtifactRef>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CampaignState {
    Pending,
    WaveActive { wave: usize },
    Completed,
    AbortedRollingBack,
    Aborted,
}

impl CampaignState {
    pub fn is_terminal(self) -> bool {
        matches!(self, CampaignState::Completed | CampaignState::Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VehicleStatus {
    Pending,
    Offered,
    Succeeded,
    Failed,
    RolledBack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CampaignKind {
    /// Wave-gated rollout of newer artifacts.
    Rollout,
    /// Operator-triggered return to pinned versions.
    Rollback,
}

/// A slot this campaign moved, kept until it is rolled back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedChange {
    pub from: SemanticVersion,
    pub to: SemanticVersion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub campaign_id: String,
    pub kind: CampaignKind,
    pub target: TargetFilter,
    pub catalog_scope: Option<Vec<ArtifactRef>>,
    pub strategy: RolloutStrategy,
    pub state: CampaignState,
    pub waves: Vec<Vec<String>>,
    pub wave_membership: BTreeMap<String, usize>,
    pub vehicle_status: BTreeMap<String, VehicleStatus>,
    pub created_at: Millis,
    pub wave_started_at: Millis,
    /// Vehicle → slot → change made by this campaign and not yet undone.
    pub applied: BTreeMap<String, BTreeMap<String, AppliedChange>>,
    pub rollback_attempts: BTreeMap<String, u32>,
    /// (vehicle, slot) pairs this campaign may touch.
    pub touched: BTreeSet<(String, String)>,
}

impl Campaign {
    pub fn is_active(&self) -> bool {
        !self.state.is_terminal()
    }

    pub fn status(&self, vehicle_id: &str) -> Option<VehicleStatus> {
        self.vehicle_status.get(vehicle_id).copied()
    }

    pub fn members(&self) -> impl Iterator<Item = &str> {
        self.waves.iter().flatten().map(String::as_str)
    }

    pub fn success_ratio(&self, wave: usize) -> f64 {
        let members = &self.waves[wave];
        if members.is_empty() {
            return 1.0;
        }
        let ok = members
            .iter()
            .filter(|v| self.status(v) == Some(VehicleStatus::Succeeded))
            .count();
        ok as f64 / members.len() as f64
    }
}

/// Stable per-campaign ordering key for a vehicle.
fn wave_key(campaign_id: &str, vehicle_id: &str) -> String {
    compute_digest(format!("{campaign_id}\u{0}{vehicle_id}").as_bytes())
        .hex()
        .to_string()
}

/// Deterministically partitions `vehicles` into waves. Each wave but the last
/// takes `ceil(fraction × fleet)` vehicles (bounded by what is left); the last
/// wave takes the remainder.
pub fn assign_waves(campaign_id: &str, vehicles: &[String], fractions: &[f64]) -> Vec<Vec<String>> {
    let mut ordered: Vec<(String, &String)> = vehicles
        .iter()
        .map(|v| (wave_key(campaign_id, v), v))
        .collect();
    ordered.sort();
    let fleet = vehicles.len();
    let mut rest = ordered.into_iter().map(|(_, v)| v.clone());
    let mut waves = Vec::with_capacity(fractions.len());
    let mut remaining = fleet;
    for (ix, fraction) in fractions.iter().enumerate() {
        let size = if ix + 1 == fractions.len() {
            remaining
        } else {
            // Absorb float noise such as 0.1 * 30 = 3.0000000000000004.
            (((fraction * fleet as f64) - 1e-9).ceil().max(0.0) as usize).min(remaining)
        };
        remaining -= size;
        waves.push(rest.by_ref().take(size).collect());
    }
    waves
}
