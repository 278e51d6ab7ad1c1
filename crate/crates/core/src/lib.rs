//! Hybrid information-flow policy enforcement.
//!
//! An offline analyzer certifies a pipeline's expected conduit accesses
//! against data-specific policies and compiles them into capability sets. At
//! runtime a simulated capability sandbox serves certified accesses without
//! involving the reference monitor; everything else faults into the monitor,
//! which runs the same policy checks immediately.
//!
//! The crate is organized bottom-up:
//!
//! - [`policy`]: the policy language, normal forms and evaluation.
//! - [`restrict`]: the restrictiveness kernel and its brute-force oracle.
//! - [`analyzer`]: the offline analyzer and capability compilation.
//! - [`sandbox`]: capability sets, fd-only pipes and KV filters.
//! - [`monitor`]: the hybrid reference monitor and the pure-dynamic baseline.
//! - [`pipeline`]: the search-pipeline workload, leak detector and faults.
//! - [`bench`]: metrics, sweeps and reports.

pub mod analyzer;
pub mod bench;
pub mod meta;
pub mod model;
pub mod monitor;
pub mod pipeline;
pub mod policy;
pub mod restrict;
pub mod sandbox;

pub use meta::{MetaChange, MetaList, MetadataView};
pub use model::{AccessMode, ClassId, ConduitId, ListId, Principal, Region, Rights, TaskHandle, TaskId};
pub use policy::{Policy, Rule, SessionContext, Taint};
