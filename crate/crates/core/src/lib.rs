//! Variant-aware over-the-air update orchestration for vehicle fleets.
//!
//! The crate is organised bottom-up: [`version`], [`digest`] and [`model`]
//! hold the shared domain types; [`resolver`] decides which artifacts a
//! vehicle may run; [`store`] keeps artifacts content-addressed on disk;
//! [`cloud`] runs rollout campaigns; [`agent`] and [`installer`] are the
//! vehicle side; [`sim`] wires everything into a deterministic fleet
//! simulation.

pub mod agent;
pub mod cloud;
pub mod digest;
pub mod image;
pub mod installer;
pub mod model;
pub mod resolver;
pub mod sim;
pub mod store;
pub mod version;

/// Timestamps and durations in milliseconds (simulated or wall-clock).
pub type Millis = u64;

pub use digest::{compute_digest, ContentDigest};
pub use model::{
    requirement_matches, ArtifactDescriptor, ArtifactKind, ArtifactRef, ComponentSlot,
    EcuDescriptor, HardwareRequirement, ModelMetadata, VehicleProfile,
};
pub use resolver::{
    check_compatibility, resolve_rollback, resolve_updates, select_best, DependencyMatrix,
    Direction, RollbackPins, UpdateAction, UpdateManifest, VersionConstraint, VersionRange,
};
pub use version::SemanticVersion;
