use std::collections::BTreeMap;

use crate::agent::{CloudLink, LinkError};
use crate::cloud::{
    Clock, CloudError, InstallReport, PollRequest, PollResponse, RegisterAck, ReportAck,
    SharedService,
};
use crate::model::VehicleProfile;
use crate::resolver::UpdateAction;
use crate::store::StoreError;

use super::scenario::{FaultKind, FaultSpec};

/// Produces one link per vehicle.
pub trait LinkFactory {
    fn connect(&self, vehicle_id: &str, token: &str) -> Box<dyn CloudLink>;
}

/// How agents reach the service during a simulation.
pub trait Transport {
    fn attach(&mut self, service: SharedService, clock: Clock) -> Result<Box<dyn LinkFactory>, String>;
}

/// Calls the service directly, no serialization.
#[derive(Debug, Default, Clone, Copy)]
pub struct InProcess;

impl Transport for InProcess {
    fn attach(&mut self, service: SharedService, clock: Clock) -> Result<Box<dyn LinkFactory>, String> {
        Ok(Box::new(DirectFactory { service, clock }))
    }
}

struct DirectFactory {
    service: SharedService,
    clock: Clock,
}

impl LinkFactory for DirectFactory {
    fn connect(&self, _vehicle_id: &str, token: &str) -> Box<dyn CloudLink> {
        Box::new(DirectLink::new(self.service.clone(), self.clock.clone(), token))
    }
}

pub struct DirectLink {
    service: SharedService,
    clock: Clock,
    token: String,
}

impl DirectLink {
    pub fn new(service: SharedService, clock: Clock, token: &str) -> Self {
        Self {
            service,
            clock,
            token: token.to_string(),
        }
    }

    fn authorized(&self) -> Result<(), LinkError> {
        let svc = self.service.lock().expect("service lock poisoned");
        svc.store()
            .authorize(&self.token, crate::store::Permission::Fetch)
            .map_err(store_refusal)
    }
}

pub fn cloud_refusal(e: CloudError) -> LinkError {
    LinkError::Refused {
        status: e.http_status(),
        message: e.to_string(),
    }
}

pub fn store_refusal(e: StoreError) -> LinkError {
    LinkError::Refused {
        status: e.http_status(),
        message: e.to_string(),
    }
}

impl CloudLink for DirectLink {
    fn register(&mut self, profile: &VehicleProfile) -> Result<RegisterAck, LinkError> {
        self.authorized()?;
        let mut svc = self.service.lock().expect("service lock poisoned");
        svc.register_vehicle(profile.clone(), self.clock.now())
            .map_err(cloud_refusal)
    }

    fn poll(&mut self, request: &PollRequest) -> Result<PollResponse, LinkError> {
        self.authorized()?;
        let mut svc = self.service.lock().expect("service lock poisoned");
        svc.handle_poll(request, self.clock.now()).map_err(cloud_refusal)
    }

    fn download(&mut self, action: &UpdateAction) -> Result<Vec<u8>, LinkError> {
        let store = self.service.lock().expect("service lock poisoned").store().clone();
        store
            .fetch_payload(&action.digest, &self.token)
            .map_err(store_refusal)
    }

    fn report(&mut self, report: &InstallReport) -> Result<ReportAck, LinkError> {
        self.authorized()?;
        let mut svc = self.service.lock().expect("service lock poisoned");
        svc.handle_report(report.clone(), self.clock.now())
            .map_err(cloud_refusal)
    }
}

/// Wraps a link and injects the network-side faults of a scenario.
pub struct FaultyLink {
    inner: Box<dyn CloudLink>,
    faults: Vec<FaultSpec>,
    polls: u32,
    reports: u32,
    downloads: BTreeMap<String, u32>,
}

impl FaultyLink {
    pub fn new(inner: Box<dyn CloudLink>, faults: Vec<FaultSpec>) -> Self {
        Self {
            inner,
            faults,
            polls: 0,
            reports: 0,
            downloads: BTreeMap::new(),
        }
    }

    fn armed(&self, kind: FaultKind, slot: Option<&str>, count: u32) -> Option<&FaultSpec> {
        self.faults.iter().find(|f| {
            f.kind == kind
                && f.occurrence == count
                && (f.slot.is_none() || f.slot.as_deref() == slot)
        })
    }
}

impl CloudLink for FaultyLink {
    fn register(&mut self, profile: &VehicleProfile) -> Result<RegisterAck, LinkError> {
        self.inner.register(profile)
    }

    fn poll(&mut self, request: &PollRequest) -> Result<PollResponse, LinkError> {
        self.polls += 1;
        if self.armed(FaultKind::PollFailure, None, self.polls).is_some() {
            return Err(LinkError::Unreachable("injected poll failure".into()));
        }
        self.inner.poll(request)
    }

    fn download(&mut self, action: &UpdateAction) -> Result<Vec<u8>, LinkError> {
        let slot = action.slot_name.as_str();
        let n = {
            let n = self.downloads.entry(slot.to_string()).or_default();
            *n += 1;
            *n
        };
        if self.armed(FaultKind::DownloadFailure, Some(slot), n).is_some() {
            return Err(LinkError::Unreachable("injected download failure".into()));
        }
        let mut bytes = self.inner.download(action)?;
        if let Some(f) = self.armed(FaultKind::CorruptPayload, Some(slot), n) {
            if bytes.is_empty() {
                bytes.push(0xA5);
            } else {
                let ix = f.byte_index.unwrap_or(0) % bytes.len();
                bytes[ix] ^= 0xFF;
            }
        }
        Ok(bytes)
    }

    fn report(&mut self, report: &InstallReport) -> Result<ReportAck, LinkError> {
        self.reports += 1;
        if self.armed(FaultKind::DropReport, None, self.reports).is_some() {
            return Err(LinkError::Unreachable("injected report loss".into()));
        }
        self.inner.report(report)
    }
}
