//! Deployment-wide registry of nodes and keygroup configurations.
//!
//! The registry holds metadata only, never keys or payloads. Every mutation
//! is serialized through one lock, appended to an optional JSON-per-line
//! update log and only then applied, so replaying the log reproduces the
//! registry exactly. Keygroup updates use compare-and-set on the config
//! version.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_keygroup_config, ConfigViolation, KeygroupConfig, KeygroupName, NodeId};
use crate::wire::{ConfigChange, ErrorCode, Request, Response};

#[derive(Debug, Error)]
pub enum NamingError {
    #[error("node {id} already registered at {existing}, refusing {requested}")]
    NodeConflict {
        id: NodeId,
        existing: String,
        requested: String,
    },
    #[error("keygroup {0} already exists")]
    DuplicateKeygroup(KeygroupName),
    #[error("invalid keygroup config: {0}")]
    InvalidConfig(#[from] ConfigViolation),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown keygroup {0}")]
    UnknownKeygroup(KeygroupName),
    #[error("version conflict: expected {expected}, current {current}")]
    VersionConflict { expected: u64, current: u64 },
    #[error("removing {0} would leave the keygroup without replicas")]
    WouldEmpty(NodeId),
    #[error("node {0} is not a replica of this keygroup")]
    NotAReplica(NodeId),
    #[error("node {0} is already a replica of this keygroup")]
    AlreadyReplica(NodeId),
    #[error("unknown trigger {0}")]
    UnknownTrigger(String),
    #[error("update log: {0}")]
    Log(String),
}

impl NamingError {
    pub fn code(&self) -> ErrorCode {
        match self {
            NamingError::VersionConflict { .. } | NamingError::NodeConflict { .. } => {
                ErrorCode::Conflict
            }
            NamingError::UnknownKeygroup(_) => ErrorCode::UnknownKeygroup,
            NamingError::UnknownNode(_) => ErrorCode::UnknownNode,
            NamingError::Log(_) => ErrorCode::Storage,
            _ => ErrorCode::Invalid,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LogEntry {
    RegisterNode {
        id: NodeId,
        addr: String,
    },
    CreateKeygroup {
        config: KeygroupConfig,
    },
    UpdateKeygroup {
        name: KeygroupName,
        expected_version: u64,
        change: ConfigChange,
    },
}

struct Watcher {
    name: Option<KeygroupName>,
    tx: Sender<KeygroupConfig>,
}

#[derive(Default)]
struct Registry {
    nodes: BTreeMap<NodeId, String>,
    history: BTreeMap<KeygroupName, Vec<KeygroupConfig>>,
    changes: Vec<KeygroupConfig>,
    watchers: Vec<Watcher>,
}

enum Effect {
    None,
    Config(KeygroupConfig),
}

impl Registry {
    fn current(&self, name: &KeygroupName) -> Result<&KeygroupConfig, NamingError> {
        self.history
            .get(name)
            .and_then(|h| h.last())
            .ok_or_else(|| NamingError::UnknownKeygroup(name.clone()))
    }

    /// Checks `entry` against the current state without mutating it.
    fn check(&self, entry: &LogEntry) -> Result<Option<KeygroupConfig>, NamingError> {
        match entry {
            LogEntry::RegisterNode { id, addr } => match self.nodes.get(id) {
                Some(existing) if existing != addr => Err(NamingError::NodeConflict {
                    id: id.clone(),
                    existing: existing.clone(),
                    requested: addr.clone(),
                }),
                _ => Ok(None),
            },
            LogEntry::CreateKeygroup { config } => {
                if self.history.contains_key(&config.name) {
                    return Err(NamingError::DuplicateKeygroup(config.name.clone()));
                }
                validate_keygroup_config(config)?;
                self.check_nodes(config)?;
                Ok(Some(KeygroupConfig {
                    version: 1,
                    ..config.clone()
                }))
            }
            LogEntry::UpdateKeygroup {
                name,
                expected_version,
                change,
            } => {
                let cur = self.current(name)?;
                if cur.version != *expected_version {
                    return Err(NamingError::VersionConflict {
                        expected: *expected_version,
                        current: cur.version,
                    });
                }
                let mut next = cur.clone();
                apply_change(&mut next, change)?;
                validate_keygroup_config(&next)?;
                self.check_nodes(&next)?;
                next.version = cur.version + 1;
                Ok(Some(next))
            }
        }
    }

    fn check_nodes(&self, cfg: &KeygroupConfig) -> Result<(), NamingError> {
        let nodes = cfg
            .replica_nodes()
            .chain(cfg.triggers.iter().map(|t| &t.node));
        for n in nodes {
            if !self.nodes.contains_key(n) {
                return Err(NamingError::UnknownNode(n.clone()));
            }
        }
        Ok(())
    }

    fn apply(&mut self, entry: LogEntry) -> Result<Effect, NamingError> {
        let cfg = self.check(&entry)?;
        if let LogEntry::RegisterNode { id, addr } = entry {
            self.nodes.insert(id, addr);
        }
        let Some(cfg) = cfg else {
            return Ok(Effect::None);
        };
        self.history
            .entry(cfg.name.clone())
            .or_default()
            .push(cfg.clone());
        self.changes.push(cfg.clone());
        self.watchers.retain(|w| {
            if w.name.as_ref().is_some_and(|n| n != &cfg.name) {
                return true;
            }
            w.tx.send(cfg.clone()).is_ok()
        });
        Ok(Effect::Config(cfg))
    }
}

fn apply_change(cfg: &mut KeygroupConfig, change: &ConfigChange) -> Result<(), NamingError> {
    match change {
        ConfigChange::AddReplica { replica } => {
            if cfg.is_replica(&replica.node) {
                return Err(NamingError::AlreadyReplica(replica.node.clone()));
            }
            cfg.replicas.push(replica.clone());
            cfg.replicas.sort_by(|a, b| a.node.cmp(&b.node));
        }
        ConfigChange::RemoveReplica { node } => {
            if !cfg.is_replica(node) {
                return Err(NamingError::NotAReplica(node.clone()));
            }
            if cfg.replicas.len() == 1 {
                return Err(NamingError::WouldEmpty(node.clone()));
            }
            cfg.replicas.retain(|r| &r.node != node);
        }
        ConfigChange::SetTtl { node, ttl } => {
            let r = cfg
                .replicas
                .iter_mut()
                .find(|r| &r.node == node)
                .ok_or_else(|| NamingError::NotAReplica(node.clone()))?;
            r.ttl = *ttl;
        }
        ConfigChange::AddTrigger { trigger } => cfg.triggers.push(trigger.clone()),
        ConfigChange::RemoveTrigger { id } => {
            let before = cfg.triggers.len();
            cfg.triggers.retain(|t| &t.id != id);
            if cfg.triggers.len() == before {
                return Err(NamingError::UnknownTrigger(id.clone()));
            }
        }
    }
    Ok(())
}

/// The naming service. All methods take `&self` and are safe to call from
/// any thread.
pub struct Naming {
    inner: Mutex<Registry>,
    log: Option<Mutex<File>>,
}

impl Default for Naming {
    fn default() -> Self {
        Self::new()
    }
}

impl Naming {
    /// Volatile registry.
    pub fn new() -> Self {
        Naming {
            inner: Mutex::new(Registry::default()),
            log: None,
        }
    }

    /// Registry persisted to (and replayed from) a JSON-per-line update log.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, NamingError> {
        let path = path.as_ref();
        let mut reg = Registry::default();
        if path.exists() {
            let f = File::open(path).map_err(|e| NamingError::Log(e.to_string()))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| NamingError::Log(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogEntry = serde_json::from_str(&line)
                    .map_err(|e| NamingError::Log(format!("line {}: {e}", i + 1)))?;
                reg.apply(entry)?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| NamingError::Log(e.to_string()))?;
        Ok(Naming {
            inner: Mutex::new(reg),
            log: Some(Mutex::new(file)),
        })
    }

    fn submit(&self, entry: LogEntry) -> Result<Effect, NamingError> {
        let mut reg = self.inner.lock().expect("registry poisoned");
        let changes_state = match &entry {
            LogEntry::RegisterNode { id, .. } => !reg.nodes.contains_key(id),
            _ => true,
        };
        reg.check(&entry)?;
        if changes_state {
            if let Some(log) = &self.log {
                let mut line = serde_json::to_string(&entry).expect("log entry serializes");
                line.push('\n');
                let mut f = log.lock().expect("log poisoned");
                f.write_all(line.as_bytes())
                    .and_then(|_| f.sync_data())
                    .map_err(|e| NamingError::Log(e.to_string()))?;
            }
        }
        reg.apply(entry)
    }

    /// Registers a node. Re-registering the same address is a no-op.
    pub fn register_node(&self, id: NodeId, addr: impl Into<String>) -> Result<(), NamingError> {
        self.submit(LogEntry::RegisterNode {
            id,
            addr: addr.into(),
        })
        .map(|_| ())
    }

    pub fn nodes(&self) -> Vec<(NodeId, String)> {
        let reg = self.inner.lock().expect("registry poisoned");
        reg.nodes.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn node_addr(&self, id: &NodeId) -> Option<String> {
        self.inner.lock().expect("registry poisoned").nodes.get(id).cloned()
    }

    /// Stores a new keygroup at config version 1.
    pub fn create_keygroup(&self, cfg: KeygroupConfig) -> Result<u64, NamingError> {
        match self.submit(LogEntry::CreateKeygroup { config: cfg })? {
            Effect::Config(c) => Ok(c.version),
            Effect::None => unreachable!("create always yields a config"),
        }
    }

    /// Applies `change` iff the current version equals `expected_version`.
    pub fn update_keygroup(
        &self,
        name: &KeygroupName,
        expected_version: u64,
        change: ConfigChange,
    ) -> Result<u64, NamingError> {
        match self.submit(LogEntry::UpdateKeygroup {
            name: name.clone(),
            expected_version,
            change,
        })? {
            Effect::Config(c) => Ok(c.version),
            Effect::None => unreachable!("update always yields a config"),
        }
    }

    pub fn get_config(&self, name: &KeygroupName) -> Result<KeygroupConfig, NamingError> {
        let reg = self.inner.lock().expect("registry poisoned");
        reg.current(name).cloned()
    }

    pub fn keygroups(&self) -> Vec<KeygroupName> {
        let reg = self.inner.lock().expect("registry poisoned");
        reg.history.keys().cloned().collect()
    }

    /// Accepted configs of `name` with version greater than `since_version`.
    pub fn configs_since(
        &self,
        name: &KeygroupName,
        since_version: u64,
    ) -> Result<Vec<KeygroupConfig>, NamingError> {
        let reg = self.inner.lock().expect("registry poisoned");
        reg.current(name)?;
        Ok(reg.history[name]
            .iter()
            .filter(|c| c.version > since_version)
            .cloned()
            .collect())
    }

    /// Stream of every accepted config of `name` with version greater than
    /// `since_version`, in version order, without gaps.
    pub fn watch_config(
        &self,
        name: &KeygroupName,
        since_version: u64,
    ) -> Result<Receiver<KeygroupConfig>, NamingError> {
        let mut reg = self.inner.lock().expect("registry poisoned");
        reg.current(name)?;
        let (tx, rx) = channel();
        for c in reg.history[name].iter().filter(|c| c.version > since_version) {
            let _ = tx.send(c.clone());
        }
        reg.watchers.push(Watcher {
            name: Some(name.clone()),
            tx,
        });
        Ok(rx)
    }

    /// Stream of every config accepted from now on, across all keygroups.
    pub fn watch_all(&self) -> Receiver<KeygroupConfig> {
        let (tx, rx) = channel();
        let mut reg = self.inner.lock().expect("registry poisoned");
        reg.watchers.push(Watcher { name: None, tx });
        rx
    }

    /// Global change feed: configs accepted at sequence >= `since`, plus the
    /// next sequence number to ask for.
    pub fn changes_since(&self, since: u64) -> (Vec<KeygroupConfig>, u64) {
        let reg = self.inner.lock().expect("registry poisoned");
        let start = (since as usize).min(reg.changes.len());
        (reg.changes[start..].to_vec(), reg.changes.len() as u64)
    }

    /// Serves one wire request. Data-plane ops are refused.
    pub fn handle_request(&self, req: Request) -> Response {
        let err = |e: NamingError| Response::error(e.code(), e.to_string());
        match req {
            Request::RegisterNode { id, addr } => match self.register_node(id, addr) {
                Ok(()) => Response::ok(),
                Err(e) => err(e),
            },
            Request::ListNodes => Response {
                nodes: Some(self.nodes()),
                ..Response::ok()
            },
            Request::CreateKeygroup { config } => match self.create_keygroup(config) {
                Ok(v) => Response {
                    config_version: Some(v),
                    ..Response::ok()
                },
                Err(e) => err(e),
            },
            Request::UpdateKeygroup {
                name,
                expected_version,
                change,
            } => match self.update_keygroup(&name, expected_version, change) {
                Ok(v) => Response {
                    config_version: Some(v),
                    ..Response::ok()
                },
                Err(e) => {
                    let mut r = err(e);
                    r.config_version = self.get_config(&name).ok().map(|c| c.version);
                    r
                }
            },
            Request::GetConfig { name } => match self.get_config(&name) {
                Ok(c) => Response {
                    config: Some(c),
                    ..Response::ok()
                },
                Err(e) => err(e),
            },
            Request::Watch {
                name,
                since_version,
            } => match self.configs_since(&name, since_version) {
                Ok(cs) => Response {
                    configs: Some(cs),
                    ..Response::ok()
                },
                Err(e) => err(e),
            },
            Request::Changes { since } => {
                let (cs, next) = self.changes_since(since);
                Response {
                    configs: Some(cs),
                    ack: Some(next),
                    ..Response::ok()
                }
            }
            other => Response::error(
                ErrorCode::BadRequest,
                format!("naming does not serve {}", op_name(&other)),
            ),
        }
    }
}

pub(crate) fn op_name(req: &Request) -> &'static str {
    match req {
        Request::Update { .. } => "update",
        Request::Delete { .. } => "delete",
        Request::Read { .. } => "read",
        Request::Scan { .. } => "scan",
        Request::Append { .. } => "append",
        Request::Replicate { .. } => "replicate",
        Request::PullPage { .. } => "pull_page",
        Request::Ack { .. } => "ack",
        Request::RegisterNode { .. } => "register_node",
        Request::ListNodes => "list_nodes",
        Request::CreateKeygroup { .. } => "create_keygroup",
        Request::UpdateKeygroup { .. } => "update_keygroup",
        Request::GetConfig { .. } => "get_config",
        Request::Watch { .. } => "watch",
        Request::Changes { .. } => "changes",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KeygroupMode, ReplicaConfig, TriggerConfig};

    fn n(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn kgname() -> KeygroupName {
        KeygroupName::new("kg").unwrap()
    }

    fn setup() -> Naming {
        let naming = Naming::new();
        for id in ["A", "B", "C"] {
            naming.register_node(n(id), format!("sim://{id}")).unwrap();
        }
        naming
    }

    fn cfg(replicas: &[&str]) -> KeygroupConfig {
        KeygroupConfig::new(
            kgname(),
            KeygroupMode::Mutable,
            replicas.iter().map(|r| ReplicaConfig::full(n(r))).collect(),
        )
    }

    #[test]
    fn node_registration() {
        let naming = Naming::new();
        naming.register_node(n("edge-1"), "10.0.0.1:7000").unwrap();
        naming.register_node(n("edge-1"), "10.0.0.1:7000").unwrap();
        assert_eq!(naming.nodes(), vec![(n("edge-1"), "10.0.0.1:7000".to_string())]);
        assert!(matches!(
            naming.register_node(n("edge-1"), "10.0.0.2:7000"),
            Err(NamingError::NodeConflict { .. })
        ));
    }

    #[test]
    fn create_rules() {
        let naming = setup();
        assert_eq!(naming.create_keygroup(cfg(&["A"])).unwrap(), 1);
        assert_eq!(naming.get_config(&kgname()).unwrap().version, 1);
        assert!(matches!(
            naming.create_keygroup(cfg(&["A"])),
            Err(NamingError::DuplicateKeygroup(_))
        ));
        let mut other = cfg(&["Z"]);
        other.name = KeygroupName::new("other").unwrap();
        assert!(matches!(naming.create_keygroup(other), Err(NamingError::UnknownNode(_))));
        let mut empty = cfg(&[]);
        empty.name = KeygroupName::new("empty").unwrap();
        assert!(matches!(
            naming.create_keygroup(empty),
            Err(NamingError::InvalidConfig(ConfigViolation::EmptyReplicaSet))
        ));
    }

    #[test]
    fn compare_and_set() {
        let naming = setup();
        naming.create_keygroup(cfg(&["A"])).unwrap();
        let add_b = ConfigChange::AddReplica {
            replica: ReplicaConfig::full(n("B")),
        };
        let add_c = ConfigChange::AddReplica {
            replica: ReplicaConfig::full(n("C")),
        };
        assert_eq!(naming.update_keygroup(&kgname(), 1, add_b).unwrap(), 2);
        assert!(matches!(
            naming.update_keygroup(&kgname(), 1, add_c),
            Err(NamingError::VersionConflict { expected: 1, current: 2 })
        ));
        let cfg = naming.get_config(&kgname()).unwrap();
        assert!(cfg.is_replica(&n("B")));
        naming
            .update_keygroup(&kgname(), 2, ConfigChange::RemoveReplica { node: n("A") })
            .unwrap();
        assert!(matches!(
            naming.update_keygroup(&kgname(), 3, ConfigChange::RemoveReplica { node: n("B") }),
            Err(NamingError::WouldEmpty(_))
        ));
    }

    #[test]
    fn watch_delivers_in_order_without_gaps() {
        let naming = setup();
        naming.create_keygroup(cfg(&["A"])).unwrap();
        let rx = naming.watch_config(&kgname(), 1).unwrap();
        assert!(rx.try_recv().is_err());
        naming
            .update_keygroup(
                &kgname(),
                1,
                ConfigChange::AddReplica {
                    replica: ReplicaConfig::full(n("B")),
                },
            )
            .unwrap();
        naming
            .update_keygroup(
                &kgname(),
                2,
                ConfigChange::AddTrigger {
                    trigger: TriggerConfig {
                        id: "t".into(),
                        endpoint: "sink".into(),
                        node: n("A"),
                    },
                },
            )
            .unwrap();
        let got: Vec<u64> = rx.try_iter().map(|c| c.version).collect();
        assert_eq!(got, vec![2, 3]);
        let replay: Vec<u64> = naming
            .watch_config(&kgname(), 0)
            .unwrap()
            .try_iter()
            .map(|c| c.version)
            .collect();
        assert_eq!(replay, vec![1, 2, 3]);
    }

    #[test]
    fn log_replay_reproduces_registry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("naming.log");
        {
            let naming = Naming::open(&path).unwrap();
            naming.register_node(n("A"), "a").unwrap();
            naming.register_node(n("B"), "b").unwrap();
            naming.create_keygroup(cfg(&["A"])).unwrap();
            naming
                .update_keygroup(
                    &kgname(),
                    1,
                    ConfigChange::AddReplica {
                        replica: ReplicaConfig { node: n("B"), ttl: Some(60) },
                    },
                )
                .unwrap();
            // rejected updates never reach the log
            let _ = naming.update_keygroup(&kgname(), 1, ConfigChange::RemoveReplica { node: n("A") });
        }
        let naming = Naming::open(&path).unwrap();
        let cfg = naming.get_config(&kgname()).unwrap();
        assert_eq!(cfg.version, 2);
        assert_eq!(cfg.replica(&n("B")).unwrap().ttl, Some(60));
        assert_eq!(naming.nodes().len(), 2);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
    }
}
