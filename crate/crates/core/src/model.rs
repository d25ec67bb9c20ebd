//! Shared domain vocabulary: node and keygroup identifiers, version vectors,
//! versioned values and keygroup configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid node id {0:?}")]
    InvalidNodeId(String),
    #[error("invalid keygroup name {0:?}")]
    InvalidKeygroupName(String),
    #[error("invalid key {0:?}")]
    InvalidKey(String),
    #[error("malformed version vector: {0}")]
    MalformedVersion(String),
}

/// Identifier of one logical replica node. Ordered lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self, ModelError> {
        let id = id.into();
        if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(ModelError::InvalidNodeId(id));
        }
        Ok(NodeId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NodeId {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        NodeId::new(s)
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.0
    }
}

impl FromStr for NodeId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::new(s)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn is_safe_name(s: &str) -> bool {
    !s.is_empty()
        && s
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Checks that a data key matches `[a-zA-Z0-9_-]+`.
pub fn validate_key(key: &str) -> Result<(), ModelError> {
    if is_safe_name(key) {
        Ok(())
    } else {
        Err(ModelError::InvalidKey(key.to_string()))
    }
}

/// Name of a keygroup. Restricted to `[a-zA-Z0-9_-]+` since it is used as a
/// directory name by the disk backend.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KeygroupName(String);

impl KeygroupName {
    pub fn new(name: impl Into<String>) -> Result<Self, ModelError> {
        let name = name.into();
        if !is_safe_name(&name) {
            return Err(ModelError::InvalidKeygroupName(name));
        }
        Ok(KeygroupName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for KeygroupName {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        KeygroupName::new(s)
    }
}

impl From<KeygroupName> for String {
    fn from(n: KeygroupName) -> String {
        n.0
    }
}

impl FromStr for KeygroupName {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KeygroupName::new(s)
    }
}

impl fmt::Display for KeygroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeygroupMode {
    Mutable,
    AppendOnly,
}

/// Map from node to update counter. Zero counters are never stored, so two
/// vectors are equal exactly when their maps are equal.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "BTreeMap<NodeId, u64>", into = "BTreeMap<NodeId, u64>")]
pub struct VersionVector(BTreeMap<NodeId, u64>);

impl VersionVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counter for `node`; absent entries read as 0.
    pub fn get(&self, node: &NodeId) -> u64 {
        self.0.get(node).copied().unwrap_or(0)
    }

    pub fn set(&mut self, node: NodeId, counter: u64) {
        if counter == 0 {
            self.0.remove(&node);
        } else {
            self.0.insert(node, counter);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, u64)> {
        self.0.iter().map(|(n, c)| (n, *c))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Canonical text form: `{"<node>":<counter>,...}`, keys ascending, no
    /// whitespace.
    pub fn canonical_string(&self) -> String {
        serde_json::to_string(&self.0).expect("string-keyed map always serializes")
    }

    pub fn canonical_encode(&self) -> Vec<u8> {
        self.canonical_string().into_bytes()
    }

    pub fn canonical_decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let map: BTreeMap<NodeId, u64> = serde_json::from_slice(bytes)
            .map_err(|e| ModelError::MalformedVersion(e.to_string()))?;
        Ok(map.into())
    }
}

impl From<BTreeMap<NodeId, u64>> for VersionVector {
    fn from(mut map: BTreeMap<NodeId, u64>) -> Self {
        map.retain(|_, c| *c > 0);
        VersionVector(map)
    }
}

impl From<VersionVector> for BTreeMap<NodeId, u64> {
    fn from(v: VersionVector) -> Self {
        v.0
    }
}

impl FromIterator<(NodeId, u64)> for VersionVector {
    fn from_iter<I: IntoIterator<Item = (NodeId, u64)>>(iter: I) -> Self {
        let mut v = VersionVector::new();
        for (n, c) in iter {
            v.set(n, c);
        }
        v
    }
}

impl fmt::Display for VersionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_string())
    }
}

/// Shorthand used heavily in tests: `vv(&[("A", 3), ("B", 1)])`.
pub fn vv(entries: &[(&str, u64)]) -> VersionVector {
    entries
        .iter()
        .map(|(n, c)| (NodeId::new(*n).expect("valid node id"), *c))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Payload {
    Value(Bytes),
    Tombstone,
}

impl Payload {
    pub fn is_tombstone(&self) -> bool {
        matches!(self, Payload::Tombstone)
    }

    pub fn bytes(&self) -> Option<&Bytes> {
        match self {
            Payload::Value(b) => Some(b),
            Payload::Tombstone => None,
        }
    }
}

/// A value or tombstone together with its version.
///
/// `write_time` is the coordinating node's clock (ms) when the write was
/// accepted. It drives expiry only and plays no part in conflict handling.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VersionedValue {
    pub payload: Payload,
    pub version: VersionVector,
    pub write_time: u64,
}

impl VersionedValue {
    pub fn value(bytes: impl Into<Bytes>, version: VersionVector, write_time: u64) -> Self {
        VersionedValue {
            payload: Payload::Value(bytes.into()),
            version,
            write_time,
        }
    }

    pub fn tombstone(version: VersionVector, write_time: u64) -> Self {
        VersionedValue {
            payload: Payload::Tombstone,
            version,
            write_time,
        }
    }

    pub fn is_tombstone(&self) -> bool {
        self.payload.is_tombstone()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaConfig {
    pub node: NodeId,
    /// Retention in seconds at this replica; `None` keeps data forever.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttl: Option<u64>,
}

impl ReplicaConfig {
    pub fn full(node: NodeId) -> Self {
        ReplicaConfig { node, ttl: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerConfig {
    pub id: String,
    pub endpoint: String,
    pub node: NodeId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeygroupConfig {
    pub name: KeygroupName,
    pub mode: KeygroupMode,
    pub replicas: Vec<ReplicaConfig>,
    #[serde(default)]
    pub triggers: Vec<TriggerConfig>,
    #[serde(default)]
    pub version: u64,
}

impl KeygroupConfig {
    pub fn new(name: KeygroupName, mode: KeygroupMode, replicas: Vec<ReplicaConfig>) -> Self {
        KeygroupConfig {
            name,
            mode,
            replicas,
            triggers: Vec::new(),
            version: 0,
        }
    }

    pub fn replica(&self, node: &NodeId) -> Option<&ReplicaConfig> {
        self.replicas.iter().find(|r| &r.node == node)
    }

    pub fn is_replica(&self, node: &NodeId) -> bool {
        self.replica(node).is_some()
    }

    pub fn replica_nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.replicas.iter().map(|r| &r.node)
    }
}

/// A violated keygroup configuration invariant.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigViolation {
    #[error("empty replica set")]
    EmptyReplicaSet,
    #[error("non-positive ttl")]
    NonPositiveTtl,
    #[error("duplicate replica")]
    DuplicateReplica,
    #[error("duplicate trigger id")]
    DuplicateTriggerId,
}

pub fn validate_keygroup_config(cfg: &KeygroupConfig) -> Result<(), ConfigViolation> {
    if cfg.replicas.is_empty() {
        return Err(ConfigViolation::EmptyReplicaSet);
    }
    if cfg.replicas.iter().any(|r| r.ttl == Some(0)) {
        return Err(ConfigViolation::NonPositiveTtl);
    }
    let mut nodes = BTreeSet::new();
    if !cfg.replicas.iter().all(|r| nodes.insert(&r.node)) {
        return Err(ConfigViolation::DuplicateReplica);
    }
    let mut ids = BTreeSet::new();
    if !cfg.triggers.iter().all(|t| ids.insert(&t.id)) {
        return Err(ConfigViolation::DuplicateTriggerId);
    }
    Ok(())
}
