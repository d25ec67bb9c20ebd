//! Keygroup replication middleware for fog deployments.
//!
//! Data is organised in keygroups, each replicated to an explicit set of
//! nodes. Every replica accepts writes; concurrent writes are tracked with
//! version vectors and surface to clients as siblings. Clients carry a
//! session cache of observed versions that lets them detect stale replicas
//! and reject lost updates.

pub mod client;
pub mod harness;
pub mod model;
pub mod naming;
pub mod node;
pub mod storage;
pub mod transport;
pub mod version;
pub mod wire;

pub use client::{Client, ClientError, Connection, GuaranteeMode, Session, SessionCache};
pub use model::{
    KeygroupConfig, KeygroupMode, KeygroupName, NodeId, Payload, ReplicaConfig, TriggerConfig,
    VersionVector, VersionedValue,
};
pub use naming::Naming;
pub use node::{Node, NodeOptions};
pub use storage::{DiskStore, MemoryStore, StorageAdapter};
pub use version::{CausalOrder, Disposition, SiblingSet};
