//! axum front end over a shared [`CloudService`].
//!
//! Every route needs a bearer token from the store's token table: vehicle
//! traffic and reads need `FETCH`, artifact uploads `PUBLISH`, and
//! campaign, rollback and pin changes `ADMIN`.

use std::future::Future;
use std::io;
use std::net::{SocketAddr, TcpListener as StdListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use ota_core::cloud::{
    Campaign, CampaignSpec, Clock, CloudError, CloudService, FleetSnapshot, InstallReport,
    PollRequest, PollResponse, RegisterAck, ReportAck, RollbackRequest, SharedService,
};
use ota_core::store::{ArtifactStore, Catalog, CatalogFilter, Permission, StoreError};
use ota_core::{ArtifactDescriptor, ContentDigest, RollbackPins, SemanticVersion, VehicleProfile};
use tokio::sync::oneshot;

use crate::api::{
    ArtifactsQuery, ComposeRequest, ErrorBody, PinRequest, PublishRequest, UpdatesQuery,
    REVISION_HEADER,
};

const MAX_BODY_BYTES: usize = 512 * 1024 * 1024;

#[derive(Clone)]
struct AppState {
    service: SharedService,
    clock: Clock,
}

impl AppState {
    fn lock(&self) -> std::sync::MutexGuard<'_, CloudService> {
        self.service.lock().expect("service lock poisoned")
    }

    fn store(&self) -> Arc<ArtifactStore> {
        self.lock().store().clone()
    }

    /// Returns the bearer token once it holds `needed`.
    fn authorize(&self, headers: &HeaderMap, needed: Permission) -> Result<String, ApiError> {
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))?
            .trim()
            .to_string();
        self.store().authorize(&token, needed)?;
        Ok(token)
    }
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

fn status(code: u16) -> StatusCode {
    StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
}

impl From<CloudError> for ApiError {
    fn from(e: CloudError) -> Self {
        Self::new(status(e.http_status()), e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        Self::new(status(e.http_status()), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(service: SharedService, clock: Clock) -> Router {
    let api = Router::new()
        .route("/vehicles", post(register))
        .route("/updates", get(updates))
        .route("/reports", post(report))
        .route("/blobs/{hex}", get(blob))
        .route("/campaigns", post(create_campaign).get(list_campaigns))
        .route("/campaigns/{id}", get(campaign))
        .route("/rollbacks", post(rollback))
        .route("/fleet", get(fleet))
        .route("/artifacts", post(publish).get(catalog))
        .route("/artifacts/{id}/{version}", get(descriptor))
        .route("/pins", post(pin).get(pins))
        .route("/compose", post(compose));
    Router::new()
        .nest(crate::api::API_PREFIX, api)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(AppState { service, clock })
}

async fn register(
    State(app): State<AppState>,
    headers: HeaderMap,
    Json(profile): Json<VehicleProfile>,
) -> ApiResult<Json<RegisterAck>> {
    app.authorize(&headers, Permission::Fetch)?;
    let now = app.clock.now();
    Ok(Json(app.lock().register_vehicle(profile, now)?))
}

async fn updates(
    State(app): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<UpdatesQuery>,
) -> ApiResult<Response> {
    app.authorize(&headers, Permission::Fetch)?;
    let installed = query.installed_map().map_err(ApiError::bad_request)?;
    let now = app.clock.now();
    let response = {
        let mut svc = app.lock();
        let installed = match installed {
            Some(m) => m,
            None => svc
                .ledger()
                .profiles
                .get(&query.vehicle_id)
                .map(|p| p.installed_state())
                .unwrap_or_default(),
        };
        let request = PollRequest {
            vehicle_id: query.vehicle_id,
            installed,
            catalog_revision: query.catalog_revision,
        };
        svc.handle_poll(&request, now)?
    };
    let revision = [(REVISION_HEADER, response.catalog_revision().to_string())];
    Ok(match response {
        PollResponse::UpToDate { .. } => (StatusCode::NO_CONTENT, revision).into_response(),
        PollResponse::Update { manifest, .. } => (revision, Json(manifest)).into_response(),
    })
}

async fn report(
    State(app): State<AppState>,
    headers: HeaderMap,
    Json(report): Json<InstallReport>,
) -> ApiResult<Json<ReportAck>> {
    app.authorize(&headers, Permission::Fetch)?;
    let now = app.clock.now();
    Ok(Json(app.lock().handle_report(report, now)?))
}

async fn blob(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(hex): Path<String>,
) -> ApiResult<Response> {
    let token = app.authorize(&headers, Permission::Fetch)?;
    let digest = ContentDigest::from_hex(&hex).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let bytes = app.store().fetch_payload(&digest, &token)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn create_campaign(
    State(app): State<AppState>,
    headers: HeaderMap,
    Json(spec): Json<CampaignSpec>,
) -> ApiResult<(StatusCode, Json<Campaign>)> {
    app.authorize(&headers, Permission::Admin)?;
    let now = app.clock.now();
    let campaign = app.lock().create_campaign(spec, now)?;
    Ok((StatusCode::CREATED, Json(campaign)))
}

async fn list_campaigns(
    State(app): State<AppState>,
    headers: HeaderMap,
) -> ApiResult<Json<Vec<Campaign>>> {
    app.authorize(&headers, Permission::Fetch)?;
    let now = app.clock.now();
    let mut svc = app.lock();
    svc.advance(now);
    Ok(Json(svc.campaigns().cloned().collect()))
}

async fn campaign(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<Campaign>> {
    app.authorize(&headers, Permission::Fetch)?;
    let now = app.clock.now();
    let mut svc = app.lock();
    svc.advance(now);
    svc.campaign(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| CloudError::UnknownCampaign(id).into())
}

async fn rollback(
    State(app): State<AppState>,
    headers: HeaderMap,
    Json(request): Json<RollbackRequest>,
) -> ApiResult<(StatusCode, Json<Campaign>)> {
    app.authorize(&headers, Permission::Admin)?;
    let now = app.clock.now();
    let campaign = app.lock().trigger_rollback(request, now)?;
    Ok((StatusCode::CREATED, Json(campaign)))
}

async fn fleet(State(app): State<AppState>, headers: HeaderMap) -> ApiResult<Json<FleetSnapshot>> {
    app.authorize(&headers, Permission::Fetch)?;
    Ok(Json(app.lock().fleet()))
}

async fn publish(
    State(app): State<AppState>,
    headers: HeaderMap,
    Json(request): Json<PublishRequest>,
) -> ApiResult<(StatusCode, Json<ArtifactDescriptor>)> {
    let token = app.authorize(&headers, Permission::Publish)?;
    let payload = base64::engine::general_purpose::STANDARD
        .decode(request.payload_base64.as_bytes())
        .map_err(|e| ApiError::bad_request(format!("payload_base64: {e}")))?;
    let stored = app.store().publish(request.descriptor, &payload, &token)?;
    Ok((StatusCode::CREATED, Json(stored)))
}

async fn catalog(
    State(app): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<ArtifactsQuery>,
) -> ApiResult<Json<Catalog>> {
    let token = app.authorize(&headers, Permission::Fetch)?;
    let mut filter = CatalogFilter {
        kind: query.kind,
        slot: query.slot,
        ..CatalogFilter::default()
    };
    if let Some(tag) = query.tag {
        let (k, v) = tag
            .split_once(':')
            .ok_or_else(|| ApiError::bad_request("tag must be key:value"))?;
        filter.tags.insert(k.to_string(), v.to_string());
    }
    Ok(Json(app.store().list_catalog(&filter, &token)?))
}

async fn descriptor(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path((id, version)): Path<(String, String)>,
) -> ApiResult<Json<ArtifactDescriptor>> {
    let token = app.authorize(&headers, Permission::Fetch)?;
    let version = SemanticVersion::parse(&version).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(app.store().fetch_descriptor(&id, version, &token)?))
}

async fn pin(
    State(app): State<AppState>,
    headers: HeaderMap,
    Json(request): Json<PinRequest>,
) -> ApiResult<Json<RollbackPins>> {
    let token = app.authorize(&headers, Permission::Admin)?;
    let store = app.store();
    store.set_rollback_pin(&request.variant_id, &request.slot_name, request.version, &token)?;
    Ok(Json(store.rollback_pins()))
}

async fn pins(State(app): State<AppState>, headers: HeaderMap) -> ApiResult<Json<RollbackPins>> {
    app.authorize(&headers, Permission::Fetch)?;
    Ok(Json(app.store().rollback_pins()))
}

async fn compose(
    State(app): State<AppState>,
    headers: HeaderMap,
    Json(request): Json<ComposeRequest>,
) -> ApiResult<(StatusCode, Json<ArtifactDescriptor>)> {
    let token = app.authorize(&headers, Permission::Publish)?;
    let stored = app.store().compose_container_with_model(
        &request.container,
        &request.model,
        request.version,
        &token,
    )?;
    Ok((StatusCode::CREATED, Json(stored)))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: SharedService,
    clock: Clock,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, router(service, clock))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server on its own runtime thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn spawn(service: SharedService, clock: Clock, addr: SocketAddr) -> io::Result<Self> {
        let listener = StdListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name(format!("ota-http-{addr}"))
            .spawn(move || {
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener)?;
                    serve(listener, service, clock, async {
                        let _ = rx.await;
                    })
                    .await
                })
            })?;
        Ok(Self {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown_and_join()
    }

    fn shutdown_and_join(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_and_join();
    }
}
