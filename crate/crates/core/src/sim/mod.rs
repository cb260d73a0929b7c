//! Deterministic discrete-event fleet simulator.

mod link;
mod log;
mod scenario;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use link::{
    cloud_refusal, store_refusal, DirectLink, FaultyLink, InProcess, LinkFactory, Transport,
};
pub use log::{replay_check, replay_check_jsonl, Divergence, EventLog, LogEntry, LogRecord};
pub use scenario::{
    Assertion, CampaignStep, Check, ComposeStep, FaultKind, FaultSpec, NetworkModel, PayloadSpec,
    PinStep, PublishStep, RollbackStep, Scenario, StateSource, DEFAULT_MAX_TIME_MS,
};

use crate::agent::{Agent, CloudLink, Phase};
use crate::cloud::{
    Campaign, CampaignState, Clock, CloudService, FleetSnapshot, IssuedManifest, SharedService,
};
use crate::installer::{FaultPlan, InstallFault, ScheduledFault, SimulatedDevice};
use crate::store::{ArtifactStore, Permission, TokenTable};
use crate::Millis;

/// Token the simulator uses for scripted operator actions.
pub const OPERATOR_TOKEN: &str = "sim-operator";
/// Token simulated vehicles present.
pub const VEHICLE_TOKEN: &str = "sim-vehicle";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("malformed scenario: {0}")]
    Malformed(String),
    #[error("transport setup failed: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub index: usize,
    pub t: Millis,
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

pub struct SimOutcome {
    pub log: EventLog,
    pub assertions: Vec<AssertionResult>,
    pub end_time: Millis,
    pub stop_reason: String,
    pub agents: BTreeMap<String, Agent>,
    pub devices: BTreeMap<String, SimulatedDevice>,
    pub fleet: FleetSnapshot,
    pub campaigns: Vec<Campaign>,
    pub issued: Vec<IssuedManifest>,
    pub store: Arc<ArtifactStore>,
}

impl SimOutcome {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn campaign(&self, id: &str) -> Option<&Campaign> {
        self.campaigns.iter().find(|c| c.campaign_id == id)
    }
}

pub fn run_scenario(scenario: &Scenario) -> Result<SimOutcome, SimError> {
    run_scenario_with(scenario, &mut InProcess)
}

/// Event sources, in the order they are served at equal timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Source {
    Publish(usize),
    Compose(usize),
    Pin(usize),
    Campaign(usize),
    Rollback(usize),
    Assertion(usize),
    Deadline,
    Agent(usize),
}

impl Source {
    fn scripted(self) -> bool {
        !matches!(self, Source::Deadline | Source::Agent(_))
    }
}

struct Sim<'a> {
    scenario: &'a Scenario,
    service: SharedService,
    store: Arc<ArtifactStore>,
    clock: Clock,
    log: EventLog,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(Millis, Source, u64)>>,
    next_seq: u64,
    agents: Vec<Agent>,
    devices: Vec<SimulatedDevice>,
    links: Vec<Box<dyn CloudLink>>,
    deadlines: BTreeSet<Millis>,
    scripted_left: usize,
    results: Vec<AssertionResult>,
}

pub fn run_scenario_with(
    scenario: &Scenario,
    transport: &mut dyn Transport,
) -> Result<SimOutcome, SimError> {
    validate(scenario)?;
    let tokens = TokenTable::new()
        .with(OPERATOR_TOKEN, &[Permission::Publish, Permission::Fetch, Permission::Admin])
        .with(VEHICLE_TOKEN, &[Permission::Fetch]);
    let store = Arc::new(ArtifactStore::in_memory(tokens));
    let service = Arc::new(Mutex::new(CloudService::new(
        store.clone(),
        scenario.matrix.clone(),
    )));
    let clock = Clock::manual(0);
    let factory = transport
        .attach(service.clone(), clock.clone())
        .map_err(SimError::Transport)?;

    let mut agents = Vec::new();
    let mut devices = Vec::new();
    let mut links = Vec::new();
    for profile in &scenario.fleet {
        let id = &profile.vehicle_id;
        let mine = |k: FaultKind| {
            scenario
                .faults
                .iter()
                .filter(move |f| &f.vehicle_id == id && f.kind == k)
        };
        let installer_faults: Vec<ScheduledFault> = mine(FaultKind::InstallFailure)
            .map(|f| (f, InstallFault::Crash))
            .chain(mine(FaultKind::ProbeFailure).map(|f| (f, InstallFault::ProbeFailure)))
            .map(|(f, fault)| ScheduledFault {
                slot: f.slot.clone().unwrap_or_default(),
                attempt: f.occurrence,
                fault,
            })
            .collect();
        let plan = FaultPlan {
            scheduled: installer_faults,
            random_rate: 0.0,
            seed: scenario.seed,
        };
        devices.push(SimulatedDevice::from_profile(profile, plan));
        agents.push(Agent::new(profile.clone(), scenario.poll_interval_ms));
        let network_faults: Vec<FaultSpec> = scenario
            .faults
            .iter()
            .filter(|f| {
                &f.vehicle_id == id
                    && !matches!(f.kind, FaultKind::InstallFailure | FaultKind::ProbeFailure)
            })
            .cloned()
            .collect();
        let link = factory.connect(id, VEHICLE_TOKEN);
        links.push(Box::new(FaultyLink::new(link, network_faults)) as Box<dyn CloudLink>);
    }

    let mut sim = Sim {
        scenario,
        service,
        store,
        clock,
        log: EventLog::default(),
        rng: ChaCha8Rng::seed_from_u64(scenario.seed),
        queue: BinaryHeap::new(),
        next_seq: 0,
        agents,
        devices,
        links,
        deadlines: BTreeSet::new(),
        scripted_left: 0,
        results: Vec::new(),
    };
    let outcome = sim.run();
    drop(factory);
    Ok(outcome)
}

fn validate(scenario: &Scenario) -> Result<(), SimError> {
    let mut seen = BTreeSet::new();
    for p in &scenario.fleet {
        p.validate()
            .map_err(|e| SimError::Malformed(format!("vehicle {:?}: {e}", p.vehicle_id)))?;
        if !seen.insert(p.vehicle_id.as_str()) {
            return Err(SimError::Malformed(format!("duplicate vehicle {:?}", p.vehicle_id)));
        }
    }
    let n = &scenario.network;
    if n.latency_min_ms > n.latency_max_ms {
        return Err(SimError::Malformed("latency_min_ms exceeds latency_max_ms".into()));
    }
    if scenario.poll_interval_ms == 0 {
        return Err(SimError::Malformed("poll_interval_ms must be positive".into()));
    }
    for f in &scenario.faults {
        if !seen.contains(f.vehicle_id.as_str()) {
            return Err(SimError::Malformed(format!("fault targets unknown vehicle {:?}", f.vehicle_id)));
        }
        if f.occurrence == 0 {
            return Err(SimError::Malformed("fault occurrence is 1-based".into()));
        }
        let needs_slot = matches!(f.kind, FaultKind::InstallFailure | FaultKind::ProbeFailure);
        if needs_slot && f.slot.is_none() {
            return Err(SimError::Malformed(format!("{:?} fault needs a slot", f.kind)));
        }
    }
    Ok(())
}

impl Sim<'_> {
    fn schedule(&mut self, t: Millis, source: Source) {
        if source.scripted() {
            self.scripted_left += 1;
        }
        self.queue.push(Reverse((t, source, self.next_seq)));
        self.next_seq += 1;
    }

    fn service(&self) -> std::sync::MutexGuard<'_, CloudService> {
        self.service.lock().expect("service lock poisoned")
    }

    fn run(&mut self) -> SimOutcome {
        let s = self.scenario;
        self.log.push(
            0,
            "sim",
            LogEntry::SimStart {
                scenario: s.name.clone(),
                seed: s.seed,
                vehicles: s.fleet.len(),
            },
        );
        // Vehicles are provisioned with the service before the run starts.
        for p in &s.fleet {
            let result = self.service().register_vehicle(p.clone(), 0);
            if let Err(e) = result {
                self.scripted(0, "provision", Err(e.to_string()));
            }
        }
        self.drain_service(0);

        for (i, p) in s.publishes.iter().enumerate() {
            self.schedule(p.at, Source::Publish(i));
        }
        for (i, c) in s.composes.iter().enumerate() {
            self.schedule(c.at, Source::Compose(i));
        }
        for (i, p) in s.pins.iter().enumerate() {
            self.schedule(p.at, Source::Pin(i));
        }
        for (i, c) in s.campaigns.iter().enumerate() {
            self.schedule(c.at, Source::Campaign(i));
        }
        for (i, r) in s.rollbacks.iter().enumerate() {
            self.schedule(r.at, Source::Rollback(i));
        }
        for (i, a) in s.assertions.iter().enumerate() {
            if let Some(at) = a.at {
                self.schedule(at, Source::Assertion(i));
            }
        }
        for i in 0..self.agents.len() {
            let offset = self.rng.gen_range(0..s.poll_interval_ms);
            self.agents[i].next_poll_at = offset;
            self.schedule(offset, Source::Agent(i));
        }

        let mut now = 0;
        let stop_reason = loop {
            if self.quiescent() {
                break "quiescent";
            }
            let Some(Reverse((t, source, _))) = self.queue.pop() else {
                break "exhausted";
            };
            if t > s.max_time_ms {
                now = s.max_time_ms;
                break "time_cap";
            }
            now = t;
            self.clock.set(now);
            if source.scripted() {
                self.scripted_left -= 1;
            }
            self.dispatch(now, source);
            self.drain_service(now);
            self.schedule_deadline(now);
        };
        self.clock.set(now);

        for (i, a) in s.assertions.iter().enumerate() {
            if a.at.is_none() {
                self.check(now, i);
            }
        }
        self.log.push(
            now,
            "sim",
            LogEntry::SimStop {
                reason: stop_reason.to_string(),
                vehicles: self.agents.len(),
            },
        );
        let log = std::mem::take(&mut self.log);
        let assertions = std::mem::take(&mut self.results);
        let svc = self.service.lock().expect("service lock poisoned");
        SimOutcome {
            log,
            assertions,
            end_time: now,
            stop_reason: stop_reason.to_string(),
            agents: self
                .agents
                .iter()
                .map(|a| (a.vehicle_id().to_string(), a.clone()))
                .collect(),
            devices: self
                .devices
                .iter()
                .map(|d| (d.vehicle_id().to_string(), d.clone()))
                .collect(),
            fleet: svc.fleet(),
            campaigns: svc.campaigns().cloned().collect(),
            issued: svc.issued_manifests().cloned().collect(),
            store: self.store.clone(),
        }
    }

    fn quiescent(&self) -> bool {
        self.scripted_left == 0
            && self.agents.iter().all(|a| a.phase == Phase::Idle)
            && self.service().campaigns().all(|c| !c.is_active())
    }

    fn schedule_deadline(&mut self, now: Millis) {
        let next = self.service().next_deadline();
        if let Some(d) = next {
            let d = d.max(now);
            if self.deadlines.insert(d) {
                self.schedule(d, Source::Deadline);
            }
        }
    }

    fn drain_service(&mut self, now: Millis) {
        let events = self.service().drain_events();
        for event in events {
            self.log.push(now, "cloud", LogEntry::Service { event });
        }
    }

    fn scripted(&mut self, now: Millis, action: &str, result: Result<String, String>) {
        let (ok, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.log.push(
            now,
            "scenario",
            LogEntry::Scripted {
                action: action.to_string(),
                ok,
                detail,
            },
        );
    }

    fn dispatch(&mut self, now: Millis, source: Source) {
        let s = self.scenario;
        match source {
            Source::Publish(i) => {
                let step = &s.publishes[i];
                let payload = step.payload_bytes();
                let result = self
                    .store
                    .publish(step.descriptor(&payload), &payload, OPERATOR_TOKEN)
                    .map(|d| format!("{} {}", d.reference(), d.digest))
                    .map_err(|e| e.to_string());
                self.scripted(now, "publish", result);
            }
            Source::Compose(i) => {
                let step = &s.composes[i];
                let result = self
                    .store
                    .compose_container_with_model(
                        &step.container,
                        &step.model,
                        step.version,
                        OPERATOR_TOKEN,
                    )
                    .map(|d| format!("{} {}", d.reference(), d.digest))
                    .map_err(|e| e.to_string());
                self.scripted(now, "compose", result);
            }
            Source::Pin(i) => {
                let step = &s.pins[i];
                let result = self
                    .store
                    .set_rollback_pin(&step.variant_id, &step.slot_name, step.version, OPERATOR_TOKEN)
                    .map(|()| format!("{}/{} -> {}", step.variant_id, step.slot_name, step.version))
                    .map_err(|e| e.to_string());
                self.scripted(now, "pin", result);
            }
            Source::Campaign(i) => {
                let result = self
                    .service()
                    .create_campaign(s.campaigns[i].spec.clone(), now)
                    .map(|c| c.campaign_id)
                    .map_err(|e| e.to_string());
                self.scripted(now, "create_campaign", result);
            }
            Source::Rollback(i) => {
                let result = self
                    .service()
                    .trigger_rollback(s.rollbacks[i].request.clone(), now)
                    .map(|c| c.campaign_id)
                    .map_err(|e| e.to_string());
                self.scripted(now, "trigger_rollback", result);
            }
            Source::Assertion(i) => self.check(now, i),
            Source::Deadline => {
                self.deadlines.remove(&now);
                self.service().advance(now);
            }
            Source::Agent(i) => self.tick_agent(now, i),
        }
    }

    fn tick_agent(&mut self, now: Millis, i: usize) {
        let from = self.agents[i].phase;
        let effects = self.agents[i].tick(now, self.links[i].as_mut(), &mut self.devices[i]);
        let agent = &self.agents[i];
        let to = agent.phase;
        let (next, latency) = if to == Phase::Idle {
            (agent.next_wakeup(now), None)
        } else {
            let n = self.scenario.network;
            let latency = self.rng.gen_range(n.latency_min_ms..=n.latency_max_ms);
            (now + latency, Some(latency))
        };
        if !(from == Phase::Idle && to == Phase::Idle && effects.is_empty()) {
            self.log.push(
                now,
                format!("agent:{}", agent.vehicle_id()),
                LogEntry::AgentTick {
                    vehicle_id: agent.vehicle_id().to_string(),
                    from,
                    to,
                    effects,
                    latency_ms: latency,
                },
            );
        }
        self.schedule(next, Source::Agent(i));
    }

    fn check(&mut self, now: Millis, index: usize) {
        let assertion = &self.scenario.assertions[index];
        let description = assertion.check.describe();
        let result = self.evaluate(&assertion.check);
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.log.push(
            now,
            "sim",
            LogEntry::Assertion {
                index,
                description: description.clone(),
                passed,
                detail: detail.clone(),
            },
        );
        self.results.push(AssertionResult {
            index,
            t: now,
            description,
            passed,
            detail,
        });
    }

    fn evaluate(&self, check: &Check) -> Result<String, String> {
        let agent_ix = |id: &str| {
            self.agents
                .iter()
                .position(|a| a.vehicle_id() == id)
                .ok_or_else(|| format!("unknown vehicle {id:?}"))
        };
        match check {
            Check::VehicleVersions {
                vehicle_id,
                versions,
                source,
            } => {
                let ix = agent_ix(vehicle_id)?;
                let ledger = self
                    .service()
                    .ledger()
                    .profiles
                    .get(vehicle_id)
                    .map(|p| p.installed_state())
                    .unwrap_or_default();
                let agent = self.agents[ix].local_profile.installed_state();
                let device = &self.devices[ix];
                let views: Vec<(&str, VersionView<'_>)> = vec![
                    ("ledger", Box::new(move |s: &str| ledger.get(s).copied())),
                    ("agent", Box::new(move |s: &str| agent.get(s).copied())),
                    ("device", Box::new(move |s: &str| device.installed_version(s))),
                ];
                for (name, view) in &views {
                    let wanted = match source {
                        StateSource::All => true,
                        StateSource::Ledger => *name == "ledger",
                        StateSource::Agent => *name == "agent",
                        StateSource::Device => *name == "device",
                    };
                    if !wanted {
                        continue;
                    }
                    for (slot, expected) in versions {
                        let actual = view(slot);
                        if actual != Some(*expected) {
                            return Err(format!(
                                "{name} has {slot} at {}, expected {expected}",
                                actual.map_or("nothing".to_string(), |v| v.to_string())
                            ));
                        }
                    }
                }
                Ok("versions match".into())
            }
            Check::CampaignState { campaign_id, state } => {
                let svc = self.service();
                let c = svc
                    .campaign(campaign_id)
                    .ok_or_else(|| format!("unknown campaign {campaign_id:?}"))?;
                let actual = state_name(c.state);
                if actual == *state {
                    Ok(actual)
                } else {
                    Err(format!("state is {actual}"))
                }
            }
            Check::ModelClasses {
                vehicle_id,
                slot,
                contains,
            } => {
                let ix = agent_ix(vehicle_id)?;
                let classes = self.devices[ix]
                    .model_classes(slot)
                    .ok_or_else(|| format!("no model mounted on {slot:?}"))?;
                let missing: Vec<&String> = contains.iter().filter(|c| !classes.contains(c)).collect();
                if missing.is_empty() {
                    Ok(format!("classes: {}", classes.join(", ")))
                } else {
                    Err(format!("missing {missing:?}; classes: {}", classes.join(", ")))
                }
            }
            Check::AgentPhase { vehicle_id, phase } => {
                let actual = self.agents[agent_ix(vehicle_id)?].phase;
                if actual == *phase {
                    Ok(actual.to_string())
                } else {
                    Err(format!("phase is {actual}"))
                }
            }
        }
    }
}

/// Slot → version lookup over one view of a vehicle.
type VersionView<'a> = Box<dyn Fn(&str) -> Option<crate::SemanticVersion> + 'a>;

pub fn state_name(state: CampaignState) -> String {
    serde_json::to_value(state).expect("state serializes")["state"]
        .as_str()
        .expect("tagged state")
        .to_string()
}
