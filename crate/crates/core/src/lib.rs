//! Meta-catalog aggregation for OAI-PMH repository registries.
//!
//! The pipeline harvests repository listings from several registries
//! ([`sources`]), cleans their base URLs ([`normalize`]), checks each endpoint
//! with an `Identify` request ([`probe`]), and compares the registries with
//! set statistics ([`overlap`]). Results are rendered as tables ([`report`])
//! and persisted as run directories ([`store`]). The [`cli`] module wires the
//! stages together for the `metacat` binary.

pub mod catalog;
pub mod cli;
pub mod normalize;
pub mod overlap;
pub mod probe;
pub mod report;
pub mod sources;
pub mod store;

pub use catalog::{
    mask_of, CatalogId, CatalogSnapshot, MembershipMap, ModelError, NormalizedUrl, OverlapReport,
    ProbeOutcome, ProbeRecord, RawRepositoryEntry,
};
