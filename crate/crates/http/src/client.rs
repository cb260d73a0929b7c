//! Blocking client for the service API.

use std::time::Duration;

use base64::Engine;
use ota_core::agent::{CloudLink, LinkError};
use ota_core::cloud::{
    Campaign, CampaignSpec, FleetSnapshot, InstallReport, PollRequest, PollResponse, RegisterAck,
    ReportAck, RollbackRequest,
};
use ota_core::store::Catalog;
use ota_core::{
    ArtifactDescriptor, RollbackPins, SemanticVersion, UpdateAction, UpdateManifest,
    VehicleProfile,
};
use serde::de::DeserializeOwned;
use thiserror::Error;
use ureq::http::Response;
use ureq::Body;

use crate::api::{
    ArtifactsQuery, ComposeRequest, ErrorBody, PinRequest, PublishRequest, API_PREFIX,
    REVISION_HEADER,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {message}")]
    Connection { url: String, message: String },
    #[error("server returned {status}: {message}")]
    Status { status: u16, message: String },
    #[error("malformed response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

impl From<ClientError> for LinkError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Status { status, message } => LinkError::Refused { status, message },
            other => LinkError::Unreachable(other.to_string()),
        }
    }
}

#[derive(Clone)]
pub struct Client {
    agent: ureq::Agent,
    base: String,
    token: String,
}

impl Client {
    pub fn new(base_url: &str, token: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .proxy(None)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .new_agent();
        Self {
            agent,
            base: base_url.trim_end_matches('/').to_string(),
            token: token.to_string(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        if path.starts_with("http://") || path.starts_with("https://") {
            path.to_string()
        } else if path.starts_with(API_PREFIX) {
            format!("{}{}", self.base, path)
        } else {
            format!("{}{}{}", self.base, API_PREFIX, path)
        }
    }

    fn bearer(&self) -> String {
        format!("Bearer {}", self.token)
    }

    fn get(&self, path: &str) -> ureq::RequestBuilder<ureq::typestate::WithoutBody> {
        self.agent.get(self.url(path)).header("Authorization", self.bearer())
    }

    fn post(&self, path: &str) -> ureq::RequestBuilder<ureq::typestate::WithBody> {
        self.agent.post(self.url(path)).header("Authorization", self.bearer())
    }

    fn sent(&self, result: Result<Response<Body>, ureq::Error>) -> Result<Response<Body>, ClientError> {
        let mut response = result.map_err(|e| ClientError::Connection {
            url: self.base.clone(),
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        if (200..300).contains(&status) {
            return Ok(response);
        }
        let text = response.body_mut().read_to_string().unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| b.error)
            .unwrap_or(text);
        Err(ClientError::Status { status, message })
    }

    fn json<T: DeserializeOwned>(
        &self,
        result: Result<Response<Body>, ureq::Error>,
    ) -> Result<T, ClientError> {
        self.sent(result)?
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_json()
            .map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn register(&self, profile: &VehicleProfile) -> Result<RegisterAck, ClientError> {
        self.json(self.post("/vehicles").send_json(profile))
    }

    pub fn poll(&self, request: &PollRequest) -> Result<PollResponse, ClientError> {
        let installed =
            serde_json::to_string(&request.installed).map_err(|e| ClientError::Decode(e.to_string()))?;
        let mut response = self.sent(
            self.get("/updates")
                .query("vehicle_id", &request.vehicle_id)
                .query("catalog_revision", request.catalog_revision.to_string())
                .query("installed", installed)
                .call(),
        )?;
        let catalog_revision = response
            .headers()
            .get(REVISION_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ClientError::Decode(format!("missing {REVISION_HEADER} header")))?;
        if response.status().as_u16() == 204 {
            return Ok(PollResponse::UpToDate { catalog_revision });
        }
        let manifest: UpdateManifest = response
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Decode(e.to_string()))?;
        Ok(PollResponse::Update {
            manifest,
            catalog_revision,
        })
    }

    /// Fetches a payload by its `download_url` (absolute or server-relative).
    pub fn download(&self, download_url: &str) -> Result<Vec<u8>, ClientError> {
        self.sent(self.get(download_url).call())?
            .body_mut()
            .with_config()
            .limit(u64::MAX)
            .read_to_vec()
            .map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn report(&self, report: &InstallReport) -> Result<ReportAck, ClientError> {
        self.json(self.post("/reports").send_json(report))
    }

    pub fn publish(
        &self,
        descriptor: &ArtifactDescriptor,
        payload: &[u8],
    ) -> Result<ArtifactDescriptor, ClientError> {
        let request = PublishRequest {
            descriptor: descriptor.clone(),
            payload_base64: base64::engine::general_purpose::STANDARD.encode(payload),
        };
        self.json(self.post("/artifacts").send_json(&request))
    }

    pub fn catalog(&self, query: &ArtifactsQuery) -> Result<Catalog, ClientError> {
        let mut request = self.get("/artifacts");
        if let Some(kind) = query.kind {
            request = request.query("kind", kind.as_str());
        }
        if let Some(slot) = &query.slot {
            request = request.query("slot", slot);
        }
        if let Some(tag) = &query.tag {
            request = request.query("tag", tag);
        }
        self.json(request.call())
    }

    pub fn descriptor(
        &self,
        artifact_id: &str,
        version: &SemanticVersion,
    ) -> Result<ArtifactDescriptor, ClientError> {
        self.json(self.get(&format!("/artifacts/{artifact_id}/{version}")).call())
    }

    pub fn create_campaign(&self, spec: &CampaignSpec) -> Result<Campaign, ClientError> {
        self.json(self.post("/campaigns").send_json(spec))
    }

    pub fn campaign(&self, campaign_id: &str) -> Result<Campaign, ClientError> {
        self.json(self.get(&format!("/campaigns/{campaign_id}")).call())
    }

    pub fn campaigns(&self) -> Result<Vec<Campaign>, ClientError> {
        self.json(self.get("/campaigns").call())
    }

    pub fn rollback(&self, request: &RollbackRequest) -> Result<Campaign, ClientError> {
        self.json(self.post("/rollbacks").send_json(request))
    }

    pub fn fleet(&self) -> Result<FleetSnapshot, ClientError> {
        self.json(self.get("/fleet").call())
    }

    pub fn pin(&self, request: &PinRequest) -> Result<RollbackPins, ClientError> {
        self.json(self.post("/pins").send_json(request))
    }

    pub fn pins(&self) -> Result<RollbackPins, ClientError> {
        self.json(self.get("/pins").call())
    }

    pub fn compose(&self, request: &ComposeRequest) -> Result<ArtifactDescriptor, ClientError> {
        self.json(self.post("/compose").send_json(request))
    }
}

/// Agent-side link over HTTP.
pub struct HttpLink {
    client: Client,
}

impl HttpLink {
    pub fn new(client: Client) -> Self {
        Self { client }
    }
}

impl CloudLink for HttpLink {
    fn register(&mut self, profile: &VehicleProfile) -> Result<RegisterAck, LinkError> {
        Ok(self.client.register(profile)?)
    }

    fn poll(&mut self, request: &PollRequest) -> Result<PollResponse, LinkError> {
        Ok(self.client.poll(request)?)
    }

    fn download(&mut self, action: &UpdateAction) -> Result<Vec<u8>, LinkError> {
        Ok(self.client.download(&action.download_url)?)
    }

    fn report(&mut self, report: &InstallReport) -> Result<ReportAck, LinkError> {
        Ok(self.client.report(report)?)
    }
}
