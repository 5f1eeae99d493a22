//! Role classification and training-dynamics analysis for transformer
//! circuit components.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`tracer`] extracts per-token information-flow routes from a toy
//!    decoder and turns them into circuit activation records.
//! 2. [`roles`] scores every attention head and FFN against token selectors
//!    and assigns one of five roles per snapshot.
//! 3. [`dynamics`] compares role sets across snapshots: IoU against the final
//!    model, role switches and Markov transition estimates.
//! 4. [`probing`] checks answer reliability, template quality and top-k accuracy.
//!
//! [`ingest`] defines the on-disk formats, [`synth`] generates datasets with
//! known dynamics, [`analysis`] runs everything and [`report`] writes tables.

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod ingest;
pub mod model;
pub mod par;
pub mod probing;
pub mod report;
pub mod roles;
pub mod store;
pub mod synth;
pub mod tracer;

pub use error::{Error, Result, ValidationIssue};
pub use ingest::{load_dataset, write_dataset, Dataset, GroupFilter, Manifest};
pub use model::{ComponentId, ComponentKind, FactEntry, Group, ModelGeometry, Relation, Role, SnapshotId};
pub use par::Execution;
pub use roles::{assign_roles, RoleSets, Thresholds};
pub use store::CircuitStore;
