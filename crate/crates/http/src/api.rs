//! Request and response bodies that are not core domain types.

use std::collections::BTreeMap;

use ota_core::{ArtifactDescriptor, ArtifactKind, ArtifactRef, SemanticVersion};
use serde::{Deserialize, Serialize};

pub const API_PREFIX: &str = "/api/v1";

/// Catalog revision of the poll response; sent with both 200 and 204.
pub const REVISION_HEADER: &str = "x-catalog-revision";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishRequest {
    pub descriptor: ArtifactDescriptor,
    pub payload_base64: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinRequest {
    pub variant_id: String,
    pub slot_name: String,
    pub version: SemanticVersion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeRequest {
    pub container: ArtifactRef,
    pub model: ArtifactRef,
    pub version: SemanticVersion,
}

/// `GET /updates` query. `installed` is the vehicle's slot → version map
/// as a JSON object; omitted means "whatever the ledger says".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdatesQuery {
    pub vehicle_id: String,
    #[serde(default)]
    pub catalog_revision: u64,
    #[serde(default)]
    pub installed: Option<String>,
}

impl UpdatesQuery {
    pub fn installed_map(&self) -> Result<Option<BTreeMap<String, SemanticVersion>>, String> {
        self.installed
            .as_deref()
            .map(|s| serde_json::from_str(s).map_err(|e| format!("installed: {e}")))
            .transpose()
    }
}

/// `GET /artifacts` query. `tag` is `key:value`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactsQuery {
    #[serde(default)]
    pub kind: Option<ArtifactKind>,
    #[serde(default)]
    pub slot: Option<String>,
    #[serde(default)]
    pub tag: Option<String>,
}
