//! `otactl`: operator front end. Every command except `simulate` and
//! `serve` is a thin wrapper over one HTTP call.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ota_core::cloud::{
    Campaign, CampaignSpec, Clock, CloudService, FleetSnapshot, RollbackRequest, VehicleStatus,
};
use ota_core::sim::{run_scenario_with, state_name, InProcess, Scenario, SimOutcome, Transport};
use ota_core::store::{ArtifactStore, Catalog, TokenTable};
use ota_core::{
    ArtifactDescriptor, ArtifactKind, ArtifactRef, DependencyMatrix, SemanticVersion,
};
use ota_http::api::{ArtifactsQuery, ComposeRequest, PinRequest};
use ota_http::{Client, ClientError, LoopbackHttp};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(name = "otactl", version, about = "Operate the OTA update service and fleet simulator")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Service base URL.
    #[arg(long, global = true, env = "FLEET_SERVER", default_value = DEFAULT_SERVER)]
    pub server: String,
    /// Bearer token.
    #[arg(long, global = true, env = "FLEET_TOKEN", default_value = "", hide_env_values = true)]
    pub token: String,
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Human,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the service until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Upload an artifact. `digest` and `size_bytes` are filled in from the
    /// payload when the descriptor omits them.
    Publish {
        #[arg(long)]
        descriptor: PathBuf,
        #[arg(long)]
        payload: PathBuf,
    },
    /// Build a container version that bundles a model.
    Compose {
        /// Container as `id@version`.
        #[arg(long)]
        container: String,
        /// Model as `id@version`.
        #[arg(long)]
        model: String,
        /// Version of the new container.
        #[arg(long)]
        version: String,
    },
    /// List published artifacts.
    Catalog {
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ArtifactKind>,
        #[arg(long)]
        slot: Option<String>,
        /// `key:value`
        #[arg(long)]
        tag: Option<String>,
    },
    /// Store a rollback pin.
    Pin {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        slot: String,
        #[arg(long)]
        version: String,
    },
    #[command(subcommand)]
    Campaign(CampaignCommand),
    /// Return vehicles to their rollback pins.
    Rollback {
        #[arg(long = "variant")]
        variants: Vec<String>,
        #[arg(long = "vehicle")]
        vehicles: Vec<String>,
    },
    /// Show the fleet ledger.
    Fleet,
    /// Run a scenario file locally.
    Simulate {
        scenario: PathBuf,
        /// Write the event log (JSONL) here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Route agent traffic through a loopback HTTP server.
        #[arg(long)]
        http: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum CampaignCommand {
    /// Create a campaign from a spec file.
    Create { spec: PathBuf },
    /// Show one campaign.
    Status { campaign_id: String },
    /// Show all campaigns.
    List,
}

fn parse_kind(s: &str) -> Result<ArtifactKind, String> {
    ArtifactKind::ALL
        .into_iter()
        .find(|k| k.as_str().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown kind {s:?}"))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("{0}")]
    Connection(String),
    #[error("{0}")]
    Permission(String),
    #[error("{0}")]
    Server(String),
    #[error("{failed} of {total} assertions failed")]
    Assertions { failed: usize, total: usize },
    #[error("output: {0}")]
    Output(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Assertions { .. } => 1,
            CliError::Usage(_) | CliError::File { .. } => 2,
            CliError::Connection(_) => 3,
            CliError::Permission(_) => 4,
            CliError::Server(_) | CliError::Output(_) => 5,
        }
    }

    fn file(path: &Path, message: impl ToString) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match &e {
            ClientError::Connection { .. } => CliError::Connection(e.to_string()),
            ClientError::Status { status: 401 | 403, .. } => CliError::Permission(e.to_string()),
            _ => CliError::Server(e.to_string()),
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let g = &cli.global;
    let client = || Client::new(&g.server, &g.token);
    match cli.command {
        Command::Serve { config } => serve(&config, out),
        Command::Publish { descriptor, payload } => {
            let payload_bytes = fs::read(&payload).map_err(|e| CliError::file(&payload, e))?;
            let d = load_descriptor(&descriptor, &payload_bytes)?;
            let stored = client().publish(&d, &payload_bytes)?;
            emit(out, g.format, &stored, describe_artifact)
        }
        Command::Compose { container, model, version } => {
            let request = ComposeRequest {
                container: parse_ref(&container)?,
                model: parse_ref(&model)?,
                version: parse_version(&version)?,
            };
            let stored = client().compose(&request)?;
            emit(out, g.format, &stored, describe_artifact)
        }
        Command::Catalog { kind, slot, tag } => {
            let catalog = client().catalog(&ArtifactsQuery { kind, slot, tag })?;
            emit(out, g.format, &catalog, catalog_table)
        }
        Command::Pin { variant, slot, version } => {
            let request = PinRequest {
                variant_id: variant,
                slot_name: slot,
                version: parse_version(&version)?,
            };
            let pins = client().pin(&request)?;
            emit(out, g.format, &pins, |p| {
                serde_json::to_string_pretty(p).expect("pins serialize") + "\n"
            })
        }
        Command::Campaign(CampaignCommand::Create { spec }) => {
            let spec: CampaignSpec = load_json(&spec)?;
            let campaign = client().create_campaign(&spec)?;
            emit(out, g.format, &campaign, describe_campaign)
        }
        Command::Campaign(CampaignCommand::Status { campaign_id }) => {
            let campaign = client().campaign(&campaign_id)?;
            emit(out, g.format, &campaign, describe_campaign)
        }
        Command::Campaign(CampaignCommand::List) => {
            let campaigns = client().campaigns()?;
            emit(out, g.format, &campaigns, |cs| cs.iter().map(describe_campaign).collect())
        }
        Command::Rollback { variants, vehicles } => {
            if variants.is_empty() && vehicles.is_empty() {
                return Err(CliError::Usage("rollback needs --variant or --vehicle".into()));
            }
            let request = RollbackRequest {
                variants: variants.into_iter().collect(),
                vehicle_ids: vehicles.into_iter().collect(),
            };
            let campaign = client().rollback(&request)?;
            emit(out, g.format, &campaign, describe_campaign)
        }
        Command::Fleet => {
            let fleet = client().fleet()?;
            emit(out, g.format, &fleet, fleet_table)
        }
        Command::Simulate { scenario, log, http } => simulate(&scenario, log.as_deref(), http, g.format, out),
    }
}

fn emit<T: Serialize>(
    out: &mut dyn Write,
    format: Format,
    value: &T,
    human: impl FnOnce(&T) -> String,
) -> Result<(), CliError> {
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut *out, value).map_err(io::Error::other)?;
            writeln!(out)?;
        }
        Format::Human => out.write_all(human(value).as_bytes())?,
    }
    Ok(())
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::file(path, e))
}

fn load_descriptor(path: &Path, payload: &[u8]) -> Result<ArtifactDescriptor, CliError> {
    let mut value: Value = load_json(path)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::file(path, "descriptor must be a JSON object"))?;
    obj.entry("digest")
        .or_insert_with(|| ota_core::compute_digest(payload).to_string().into());
    obj.entry("size_bytes")
        .or_insert_with(|| (payload.len() as u64).into());
    serde_json::from_value(value).map_err(|e| CliError::file(path, e))
}

fn parse_version(s: &str) -> Result<SemanticVersion, CliError> {
    SemanticVersion::parse(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn parse_ref(s: &str) -> Result<ArtifactRef, CliError> {
    let (id, version) = s
        .rsplit_once('@')
        .ok_or_else(|| CliError::Usage(format!("expected id@version, got {s:?}")))?;
    Ok(ArtifactRef::new(id, parse_version(version)?))
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    for row in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(text, "{}", line.join("  ").trim_end());
    }
    text
}

fn describe_artifact(d: &ArtifactDescriptor) -> String {
    format!(
        "{} {} slot={:?} digest={} size={}\n",
        d.kind.as_str(),
        d.reference(),
        d.slot_name,
        d.digest,
        d.size_bytes
    )
}

fn catalog_table(c: &Catalog) -> String {
    let header: Vec<String> = ["ARTIFACT", "VERSION", "KIND", "SLOT", "SIZE"].map(String::from).into();
    let rows: Vec<Vec<String>> = c
        .artifacts
        .iter()
        .map(|d| {
            vec![
                d.artifact_id.clone(),
                d.version.to_string(),
                d.kind.as_str().to_string(),
                d.slot_name.clone(),
                d.size_bytes.to_string(),
            ]
        })
        .collect();
    format!("catalog revision {}\n{}", c.revision, table(&header, &rows))
}

fn describe_campaign(c: &Campaign) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for status in c.vehicle_status.values() {
        let key = match status {
            VehicleStatus::Pending => "pending",
            VehicleStatus::Offered => "offered",
            VehicleStatus::Succeeded => "succeeded",
            VehicleStatus::Failed => "failed",
            VehicleStatus::RolledBack => "rolled_back",
        };
        *counts.entry(key).or_default() += 1;
    }
    let counts: Vec<String> = counts.iter().map(|(k, n)| format!("{k}={n}")).collect();
    let wave = match c.state {
        ota_core::cloud::CampaignState::WaveActive { wave } => format!(" wave {}/{}", wave + 1, c.waves.len()),
        _ => String::new(),
    };
    format!(
        "{} {:?} {}{} vehicles={} {}\n",
        c.campaign_id,
        c.kind,
        state_name(c.state),
        wave,
        c.vehicle_status.len(),
        counts.join(" ")
    )
}

fn fleet_table(f: &FleetSnapshot) -> String {
    let slots: BTreeSet<&str> = f
        .vehicles
        .iter()
        .flat_map(|v| v.slots.keys().map(String::as_str))
        .collect();
    let header: Vec<String> = ["VEHICLE", "VARIANT"]
        .into_iter()
        .chain(slots.iter().copied())
        .map(String::from)
        .collect();
    let rows: Vec<Vec<String>> = f
        .vehicles
        .iter()
        .map(|v| {
            let mut row = vec![v.vehicle_id.clone(), v.variant_id.clone()];
            row.extend(
                slots
                    .iter()
                    .map(|s| v.slots.get(*s).map_or_else(|| "-".to_string(), ToString::to_string)),
            );
            row
        })
        .collect();
    table(&header, &rows)
}

/// `serve --config` file. Relative paths are resolved against the config
/// file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub store_root: PathBuf,
    /// Token table file: token → list of permissions.
    pub tokens: PathBuf,
    /// Dependency matrix file; empty matrix when absent.
    #[serde(default)]
    pub matrix: Option<PathBuf>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn serve(config_path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let config: ServeConfig = load_json(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let tokens_path = base.join(&config.tokens);
    let tokens = TokenTable::load(&tokens_path).map_err(|e| CliError::file(&tokens_path, e))?;
    let matrix = match &config.matrix {
        Some(p) => load_json::<DependencyMatrix>(&base.join(p))?,
        None => DependencyMatrix::new(),
    };
    let store_root = base.join(&config.store_root);
    let store = ArtifactStore::open(&store_root, tokens).map_err(|e| CliError::file(&store_root, e))?;
    let addr: SocketAddr = config
        .listen
        .parse()
        .map_err(|e| CliError::file(config_path, format!("listen: {e}")))?;
    let service = Arc::new(Mutex::new(CloudService::new(Arc::new(store), matrix)));

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Connection(format!("bind {addr}: {e}")))?;
        writeln!(out, "listening on http://{}", listener.local_addr()?)?;
        out.flush()?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        ota_http::serve(listener, service, Clock::System, shutdown).await?;
        Ok(())
    })
}

#[derive(Debug, Serialize)]
struct SimulateReport<'a> {
    scenario: &'a str,
    passed: bool,
    end_time: u64,
    stop_reason: &'a str,
    assertions: &'a [ota_core::sim::AssertionResult],
    vehicles: Vec<VehicleVersions>,
}

#[derive(Debug, Serialize)]
struct VehicleVersions {
    vehicle_id: String,
    variant_id: String,
    /// Ledger versions in ECU declaration order.
    versions: Vec<(String, SemanticVersion)>,
    /// Slots where the agent's local state differs from the ledger.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    agent_differs: BTreeMap<String, SemanticVersion>,
}

fn final_versions(scenario: &Scenario, outcome: &SimOutcome) -> Vec<VehicleVersions> {
    scenario
        .fleet
        .iter()
        .map(|p| {
            let ledger = outcome
                .fleet
                .vehicles
                .iter()
                .find(|e| e.vehicle_id == p.vehicle_id)
                .map(|e| e.slots.clone())
                .unwrap_or_default();
            let versions = p
                .slots()
                .into_iter()
                .filter_map(|s| ledger.get(&s.name).map(|v| (s.name, *v)))
                .collect();
            let agent_differs = outcome
                .agents
                .get(&p.vehicle_id)
                .map(|a| a.local_profile.installed_state())
                .unwrap_or_default()
                .into_iter()
                .filter(|(slot, v)| ledger.get(slot) != Some(v))
                .collect();
            VehicleVersions {
                vehicle_id: p.vehicle_id.clone(),
                variant_id: p.variant_id.clone(),
                versions,
                agent_differs,
            }
        })
        .collect()
}

fn simulate(
    path: &Path,
    log: Option<&Path>,
    http: bool,
    format: Format,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    let scenario = Scenario::from_json(&text).map_err(|e| CliError::file(path, e))?;
    let mut loopback = LoopbackHttp::new();
    let transport: &mut dyn Transport = if http { &mut loopback } else { &mut InProcess };
    let outcome = run_scenario_with(&scenario, transport).map_err(|e| match e {
        ota_core::sim::SimError::Transport(m) => CliError::Connection(m),
        other => CliError::file(path, other),
    })?;
    if let Some(log_path) = log {
        fs::write(log_path, outcome.log.to_jsonl()).map_err(|e| CliError::file(log_path, e))?;
    }
    let report = SimulateReport {
        scenario: &scenario.name,
        passed: outcome.passed(),
        end_time: outcome.end_time,
        stop_reason: &outcome.stop_reason,
        assertions: &outcome.assertions,
        vehicles: final_versions(&scenario, &outcome),
    };
    emit(out, format, &report, |r| {
        let mut text = format!("scenario {} stopped at t={}ms ({})\n", r.scenario, r.end_time, r.stop_reason);
        for a in r.assertions {
            let verdict = if a.passed { "PASS" } else { "FAIL" };
            let _ = write!(text, "{verdict} [{}] t={} {}", a.index, a.t, a.description);
            if !a.passed {
                let _ = write!(text, ": {}", a.detail);
            }
            text.push('\n');
        }
        for v in &r.vehicles {
            let versions: Vec<String> = v.versions.iter().map(|(s, ver)| format!("{s}={ver}")).collect();
            let _ = write!(text, "{} ({}): {}", v.vehicle_id, v.variant_id, versions.join(", "));
            if !v.agent_differs.is_empty() {
                let diff: Vec<String> = v.agent_differs.iter().map(|(s, ver)| format!("{s}={ver}")).collect();
                let _ = write!(text, " [agent: {}]", diff.join(", "));
            }
            text.push('\n');
        }
        text
    })?;
    let failed = outcome.assertions.iter().filter(|a| !a.passed).count();
    if failed > 0 {
        return Err(CliError::Assertions {
            failed,
            total: outcome.assertions.len(),
        });
    }
    Ok(())
}
