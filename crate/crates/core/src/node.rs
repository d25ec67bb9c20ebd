//! The replica-node engine.
//!
//! [`Node`] is a synchronous state machine: callers hand it requests,
//! responses to its own outgoing requests, configuration changes and clock
//! ticks, and collect the messages it wants sent with
//! [`Node::take_outgoing`]. The simulator and the socket server drive the
//! same engine.
//!
//! Writes are coordinated by the node that receives them: it assigns the new
//! version by advancing its own counter above the join of the client's
//! supersede set, stores the value and fans it out to every other replica
//! through a per-peer ordered outbox that retransmits until acknowledged.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Bound;

use bytes::Bytes;
use log::{debug, warn};
use thiserror::Error;

use crate::model::{
    validate_key, KeygroupConfig, KeygroupMode, KeygroupName, ModelError, NodeId, Payload,
    TriggerConfig, VersionVector, VersionedValue,
};
use crate::naming::op_name;
use crate::storage::{StorageAdapter, StorageError, DEFAULT_TOMBSTONE_GRACE_MS};
use crate::version::{join_all, CausalOrder, Disposition};
use crate::wire::{
    ErrorCode, ReplicationMessage, Request, Response, TriggerEvent, TriggerKind, WireEntry,
    WireValue,
};

#[derive(Clone, Debug)]
pub struct NodeOptions {
    /// Time after which an unacknowledged replication batch is resent.
    pub retransmit_ms: u64,
    pub max_batch: usize,
    pub sweep_interval_ms: u64,
    pub tombstone_grace_ms: u64,
    pub pull_page_size: usize,
    pub pull_retry_ms: u64,
    pub trigger_attempts: u32,
    /// First trigger attempt timeout; doubles per attempt.
    pub trigger_backoff_ms: u64,
}

impl Default for NodeOptions {
    fn default() -> Self {
        NodeOptions {
            retransmit_ms: 500,
            max_batch: 256,
            sweep_interval_ms: 1000,
            tombstone_grace_ms: DEFAULT_TOMBSTONE_GRACE_MS,
            pull_page_size: 64,
            pull_retry_ms: 200,
            trigger_attempts: 3,
            trigger_backoff_ms: 100,
        }
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("not a replica of keygroup {0}")]
    NotReplica(KeygroupName),
    #[error("keygroup {0} is still being pulled from peers")]
    NotReady(KeygroupName),
    #[error("operation not allowed on {mode:?} keygroup {kg}")]
    ModeViolation { kg: KeygroupName, mode: KeygroupMode },
    #[error("outdated supersede set")]
    Outdated,
    #[error("key not found")]
    NotFound { tombstones: Vec<VersionVector> },
    #[error("unknown keygroup {0}")]
    UnknownKeygroup(KeygroupName),
    #[error(transparent)]
    InvalidKey(#[from] ModelError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

impl NodeError {
    pub fn to_response(&self) -> Response {
        let code = match self {
            NodeError::NotReplica(_) => ErrorCode::NotReplica,
            NodeError::NotReady(_) => ErrorCode::NotReady,
            NodeError::ModeViolation { .. } => ErrorCode::ModeViolation,
            NodeError::Outdated => ErrorCode::Outdated,
            NodeError::NotFound { .. } => ErrorCode::NotFound,
            NodeError::UnknownKeygroup(_) => ErrorCode::UnknownKeygroup,
            NodeError::InvalidKey(_) => ErrorCode::Invalid,
            NodeError::Storage(_) => ErrorCode::Storage,
        };
        let mut resp = match self {
            NodeError::Outdated | NodeError::NotFound { .. } => Response::error(code, ""),
            other => Response::error(code, other.to_string()),
        };
        if let NodeError::NotFound { tombstones } = self {
            if !tombstones.is_empty() {
                resp.tombstones = Some(tombstones.clone());
            }
        }
        resp
    }
}

/// Live siblings of a key plus the versions of concurrent tombstones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadResult {
    pub values: Vec<(Bytes, VersionVector)>,
    pub tombstones: Vec<VersionVector>,
}

/// Message the driver must deliver on the node's behalf.
#[derive(Clone, Debug, PartialEq)]
pub enum Outgoing {
    Peer {
        to: NodeId,
        id: u64,
        request: Request,
    },
    Trigger {
        endpoint: String,
        id: u64,
        event: TriggerEvent,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub updates_accepted: u64,
    pub updates_rejected: u64,
    pub replicated_applied: u64,
    pub replicated_obsolete: u64,
    pub triggers_fired: u64,
    pub triggers_delivered: u64,
    pub triggers_dropped: u64,
    pub expired: u64,
}

enum Pending {
    Replicate { peer: NodeId, upto: u64 },
    Pull { kg: KeygroupName, peer: NodeId },
    Trigger { dispatch: u64 },
}

struct InFlight {
    id: u64,
    deadline: u64,
}

#[derive(Default)]
struct PeerOutbox {
    next_seq: u64,
    queue: VecDeque<(u64, ReplicationMessage)>,
    in_flight: Option<InFlight>,
}

struct PullState {
    after: Option<String>,
    config_version: u64,
    fetched: usize,
    in_flight: Option<InFlight>,
    retry_at: u64,
}

struct TriggerDispatch {
    trigger: TriggerConfig,
    event: TriggerEvent,
    attempt: u32,
    in_flight: Option<InFlight>,
    retry_at: u64,
}

pub struct Node {
    id: NodeId,
    store: Box<dyn StorageAdapter>,
    opts: NodeOptions,
    configs: BTreeMap<KeygroupName, KeygroupConfig>,
    serving: BTreeSet<KeygroupName>,
    outbox: BTreeMap<NodeId, PeerOutbox>,
    pulls: BTreeMap<(KeygroupName, NodeId), PullState>,
    pulled: BTreeMap<KeygroupName, usize>,
    parked: Vec<ReplicationMessage>,
    dispatches: BTreeMap<u64, TriggerDispatch>,
    pending: BTreeMap<u64, Pending>,
    outgoing: Vec<Outgoing>,
    next_id: u64,
    last_sweep: u64,
    stats: NodeStats,
}

impl Node {
    pub fn new(id: NodeId, store: Box<dyn StorageAdapter>) -> Self {
        Self::with_options(id, store, NodeOptions::default())
    }

    pub fn with_options(id: NodeId, store: Box<dyn StorageAdapter>, opts: NodeOptions) -> Self {
        Node {
            id,
            store,
            opts,
            configs: BTreeMap::new(),
            serving: BTreeSet::new(),
            outbox: BTreeMap::new(),
            pulls: BTreeMap::new(),
            pulled: BTreeMap::new(),
            parked: Vec::new(),
            dispatches: BTreeMap::new(),
            pending: BTreeMap::new(),
            outgoing: Vec::new(),
            next_id: 0,
            last_sweep: 0,
            stats: NodeStats::default(),
        }
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn store(&self) -> &dyn StorageAdapter {
        self.store.as_ref()
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    pub fn config(&self, kg: &KeygroupName) -> Option<&KeygroupConfig> {
        self.configs.get(kg)
    }

    pub fn is_serving(&self, kg: &KeygroupName) -> bool {
        self.serving.contains(kg)
    }

    /// Entries fetched by the completed join-pull of `kg`, if one ran.
    pub fn pulled(&self, kg: &KeygroupName) -> Option<usize> {
        self.pulled.get(kg).copied()
    }

    pub fn take_outgoing(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outgoing)
    }

    /// No replication, pull or trigger work outstanding.
    pub fn is_idle(&self) -> bool {
        self.outbox
            .values()
            .all(|o| o.queue.is_empty() && o.in_flight.is_none())
            && self.pulls.is_empty()
            && self.dispatches.is_empty()
    }

    /// Earliest time at which [`Node::tick`] has retransmission, retry or
    /// timeout work to do.
    pub fn next_deadline(&self) -> Option<u64> {
        let outbox = self
            .outbox
            .values()
            .filter_map(|o| o.in_flight.as_ref().map(|f| f.deadline));
        let pulls = self.pulls.values().map(|p| match &p.in_flight {
            Some(f) => f.deadline,
            None => p.retry_at,
        });
        let triggers = self.dispatches.values().map(|d| match &d.in_flight {
            Some(f) => f.deadline,
            None => d.retry_at,
        });
        outbox.chain(pulls).chain(triggers).min()
    }

    /// Time of the next expiry / tombstone sweep.
    pub fn next_sweep_at(&self) -> u64 {
        self.last_sweep + self.opts.sweep_interval_ms
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id
    }

    fn serving_config(&self, kg: &KeygroupName) -> Result<&KeygroupConfig, NodeError> {
        let cfg = self
            .configs
            .get(kg)
            .filter(|c| c.is_replica(&self.id))
            .ok_or_else(|| NodeError::NotReplica(kg.clone()))?;
        if !self.serving.contains(kg) {
            return Err(NodeError::NotReady(kg.clone()));
        }
        Ok(cfg)
    }

    // ---- client operations ------------------------------------------------

    /// Coordinates an update. `supersede` lists the versions the writer has
    /// seen. `None` is a blind write: it is always accepted and supersedes
    /// every version this node currently stores for the key.
    pub fn handle_update(
        &mut self,
        kg: &KeygroupName,
        key: &str,
        payload: Bytes,
        supersede: Option<&[VersionVector]>,
        now: u64,
    ) -> Result<VersionVector, NodeError> {
        self.coordinate(kg, key, Payload::Value(payload), supersede, now)
    }

    pub fn handle_delete(
        &mut self,
        kg: &KeygroupName,
        key: &str,
        supersede: Option<&[VersionVector]>,
        now: u64,
    ) -> Result<VersionVector, NodeError> {
        self.coordinate(kg, key, Payload::Tombstone, supersede, now)
    }

    fn coordinate(
        &mut self,
        kg: &KeygroupName,
        key: &str,
        payload: Payload,
        supersede: Option<&[VersionVector]>,
        now: u64,
    ) -> Result<VersionVector, NodeError> {
        let cfg = self.serving_config(kg)?.clone();
        if cfg.mode != KeygroupMode::Mutable {
            return Err(NodeError::ModeViolation {
                kg: kg.clone(),
                mode: cfg.mode,
            });
        }
        validate_key(key)?;
        let stored = self.store.get_raw(kg, key)?.unwrap_or_default();
        let supersede: Vec<VersionVector> = match supersede {
            Some(s) => s.to_vec(),
            None => stored.versions().cloned().collect(),
        };
        let base = join_all(&supersede);
        if !supersede.is_empty() {
            let seen = |s: &VersionVector| supersede.iter().any(|c| s.dominated_by(c));
            for s in stored.versions() {
                // a stored version newer than something the writer saw
                let newer = supersede.iter().any(|c| s.compare(c) == CausalOrder::Greater);
                // an unseen write this node coordinated, or one the new
                // version would silently dominate
                let overwritten = !seen(s) && (s.get(&self.id) > 0 || s.dominated_by(&base));
                if newer || overwritten {
                    self.stats.updates_rejected += 1;
                    return Err(NodeError::Outdated);
                }
            }
        }
        let floor = stored
            .versions()
            .map(|s| s.get(&self.id))
            .chain(std::iter::once(base.get(&self.id)))
            .max()
            .unwrap_or(0);
        let counter = self.store.bump_clock(kg, &self.id, floor)?;
        let mut version = base;
        version.set(self.id.clone(), counter);
        let value = VersionedValue {
            payload,
            version: version.clone(),
            write_time: now,
        };
        let disposition = self.store.put(kg, key, value.clone())?;
        debug_assert_eq!(disposition, Disposition::Applied);
        self.stats.updates_accepted += 1;
        self.after_local_write(&cfg, key, value, now);
        Ok(version)
    }

    pub fn handle_read(&self, kg: &KeygroupName, key: &str) -> Result<ReadResult, NodeError> {
        self.serving_config(kg)?;
        let stored = self.store.get_raw(kg, key)?.unwrap_or_default();
        let tombstones: Vec<VersionVector> = stored
            .iter()
            .filter(|v| v.is_tombstone())
            .map(|v| v.version.clone())
            .collect();
        let values: Vec<(Bytes, VersionVector)> = stored
            .live()
            .filter_map(|v| v.payload.bytes().map(|b| (b.clone(), v.version.clone())))
            .collect();
        if values.is_empty() {
            return Err(NodeError::NotFound { tombstones });
        }
        Ok(ReadResult { values, tombstones })
    }

    pub fn handle_scan(
        &self,
        kg: &KeygroupName,
        start: &str,
        count: usize,
    ) -> Result<Vec<WireEntry>, NodeError> {
        self.serving_config(kg)?;
        Ok(self
            .store
            .scan(kg, start, count)?
            .into_iter()
            .map(|e| WireEntry {
                key: e.key,
                values: e.siblings.live().map(WireValue::public).collect(),
            })
            .collect())
    }

    /// Appends to an append-only keygroup under a freshly generated key.
    pub fn handle_append(
        &mut self,
        kg: &KeygroupName,
        payload: Bytes,
        now: u64,
    ) -> Result<(String, VersionVector), NodeError> {
        let cfg = self.serving_config(kg)?.clone();
        if cfg.mode != KeygroupMode::AppendOnly {
            return Err(NodeError::ModeViolation {
                kg: kg.clone(),
                mode: cfg.mode,
            });
        }
        let key = self.store.next_append_key(kg, &self.id)?;
        let version = VersionVector::new().advance(&self.id);
        let value = VersionedValue::value(payload, version.clone(), now);
        self.store.put(kg, &key, value.clone())?;
        self.after_local_write(&cfg, &key, value, now);
        Ok((key, version))
    }

    fn after_local_write(&mut self, cfg: &KeygroupConfig, key: &str, value: VersionedValue, now: u64) {
        let peers: Vec<NodeId> = cfg
            .replica_nodes()
            .filter(|n| **n != self.id)
            .cloned()
            .collect();
        let msg = ReplicationMessage {
            kg: cfg.name.clone(),
            key: key.to_string(),
            value: WireValue::from_stored(&value),
            origin: self.id.clone(),
        };
        for peer in peers {
            self.enqueue(peer, msg.clone(), now);
        }
        self.fire_triggers(cfg, key, &value, now);
    }

    // ---- replication ------------------------------------------------------

    /// Absorbs a write fanned out by its coordinator. Messages for keygroups
    /// this node has no config for yet are parked until the config arrives.
    pub fn apply_replication(
        &mut self,
        msg: ReplicationMessage,
        now: u64,
    ) -> Result<Disposition, NodeError> {
        let Some(cfg) = self.configs.get(&msg.kg) else {
            let kg = msg.kg.clone();
            self.parked.push(msg);
            return Err(NodeError::UnknownKeygroup(kg));
        };
        if !cfg.is_replica(&self.id) {
            return Err(NodeError::NotReplica(msg.kg));
        }
        let cfg = cfg.clone();
        let value = msg.value.into_stored();
        let disposition = self.store.put(&msg.kg, &msg.key, value.clone())?;
        match disposition {
            Disposition::Applied => {
                self.stats.replicated_applied += 1;
                self.fire_triggers(&cfg, &msg.key, &value, now);
            }
            Disposition::Obsolete => self.stats.replicated_obsolete += 1,
        }
        Ok(disposition)
    }

    fn enqueue(&mut self, peer: NodeId, msg: ReplicationMessage, now: u64) {
        let ob = self.outbox.entry(peer.clone()).or_default();
        ob.next_seq += 1;
        let seq = ob.next_seq;
        ob.queue.push_back((seq, msg));
        self.flush(&peer, now);
    }

    /// Sends the queued batch for `peer` unless one is already in flight.
    fn flush(&mut self, peer: &NodeId, now: u64) {
        let Some(ob) = self.outbox.get(peer) else {
            return;
        };
        if ob.in_flight.is_some() || ob.queue.is_empty() {
            return;
        }
        let items: Vec<(u64, ReplicationMessage)> =
            ob.queue.iter().take(self.opts.max_batch).cloned().collect();
        let upto = items.last().map(|(s, _)| *s).unwrap_or(0);
        let id = self.fresh_id();
        let deadline = now + self.opts.retransmit_ms;
        let ob = self.outbox.get_mut(peer).expect("outbox exists");
        if let Some(old) = ob.in_flight.replace(InFlight { id, deadline }) {
            self.pending.remove(&old.id);
        }
        self.pending.insert(
            id,
            Pending::Replicate {
                peer: peer.clone(),
                upto,
            },
        );
        self.outgoing.push(Outgoing::Peer {
            to: peer.clone(),
            id,
            request: Request::Replicate {
                origin: self.id.clone(),
                seq: upto,
                items: items.into_iter().map(|(_, m)| m).collect(),
            },
        });
    }

    fn on_ack(&mut self, peer: &NodeId, upto: u64) {
        if let Some(ob) = self.outbox.get_mut(peer) {
            while ob.queue.front().is_some_and(|(s, _)| *s <= upto) {
                ob.queue.pop_front();
            }
        }
    }

    // ---- join pull --------------------------------------------------------

    /// Starts fetching `kg` from `from` page by page.
    pub fn join_pull(&mut self, kg: &KeygroupName, from: &NodeId, now: u64) {
        let config_version = self.configs.get(kg).map(|c| c.version).unwrap_or(0);
        self.pulls.insert(
            (kg.clone(), from.clone()),
            PullState {
                after: None,
                config_version,
                fetched: 0,
                in_flight: None,
                retry_at: now,
            },
        );
        self.send_pull(kg, from, now);
    }

    fn send_pull(&mut self, kg: &KeygroupName, peer: &NodeId, now: u64) {
        let id = self.fresh_id();
        let count = self.opts.pull_page_size;
        let deadline = now + self.opts.retransmit_ms;
        let Some(st) = self.pulls.get_mut(&(kg.clone(), peer.clone())) else {
            return;
        };
        if let Some(old) = st.in_flight.replace(InFlight { id, deadline }) {
            self.pending.remove(&old.id);
        }
        let request = Request::PullPage {
            kg: kg.clone(),
            after: st.after.clone(),
            count,
            config_version: st.config_version,
        };
        self.pending.insert(
            id,
            Pending::Pull {
                kg: kg.clone(),
                peer: peer.clone(),
            },
        );
        self.outgoing.push(Outgoing::Peer {
            to: peer.clone(),
            id,
            request,
        });
    }

    fn serve_pull(
        &self,
        kg: &KeygroupName,
        after: Option<&str>,
        count: usize,
        config_version: u64,
    ) -> Result<Response, NodeError> {
        let cfg = self
            .configs
            .get(kg)
            .filter(|c| c.is_replica(&self.id))
            .ok_or_else(|| NodeError::NotReplica(kg.clone()))?;
        if cfg.version < config_version {
            return Err(NodeError::NotReady(kg.clone()));
        }
        let start = after.map_or(Bound::Unbounded, Bound::Excluded);
        let count = count.max(1);
        let entries = self.store.entries(kg, start, count, true)?;
        let next = (entries.len() == count)
            .then(|| entries.last().map(|e| e.key.clone()))
            .flatten();
        let entries = entries
            .into_iter()
            .map(|e| WireEntry {
                key: e.key,
                values: e.siblings.iter().map(WireValue::from_stored).collect(),
            })
            .collect();
        Ok(Response {
            entries: Some(entries),
            next,
            ..Response::ok()
        })
    }

    fn on_pull_page(&mut self, kg: KeygroupName, peer: NodeId, id: u64, resp: Option<Response>, now: u64) {
        let key = (kg.clone(), peer.clone());
        let Some(st) = self.pulls.get_mut(&key) else {
            return;
        };
        if st.in_flight.as_ref().map(|f| f.id) != Some(id) {
            return;
        }
        st.in_flight = None;
        let resp = match resp {
            Some(r) if r.ok => r,
            other => {
                debug!("{}: pull of {kg} from {peer} failed: {:?}", self.id, other.and_then(|r| r.err));
                st.retry_at = now + self.opts.pull_retry_ms;
                return;
            }
        };
        let entries = resp.entries.unwrap_or_default();
        st.fetched += entries.len();
        st.after = resp.next.clone();
        for e in entries {
            for v in e.values {
                let msg = ReplicationMessage {
                    kg: kg.clone(),
                    key: e.key.clone(),
                    value: v,
                    origin: peer.clone(),
                };
                if let Err(err) = self.apply_replication(msg, now) {
                    warn!("{}: pulled entry rejected: {err}", self.id);
                }
            }
        }
        if resp.next.is_some() {
            self.send_pull(&kg, &peer, now);
        } else {
            let st = self.pulls.remove(&key).expect("pull state present");
            *self.pulled.entry(kg.clone()).or_insert(0) += st.fetched;
            self.finish_pull_if_done(&kg);
        }
    }

    fn finish_pull_if_done(&mut self, kg: &KeygroupName) {
        let pending = self.pulls.keys().any(|(k, _)| k == kg);
        let replica = self.configs.get(kg).is_some_and(|c| c.is_replica(&self.id));
        if !pending && replica {
            self.serving.insert(kg.clone());
        }
    }

    // ---- configuration ----------------------------------------------------

    /// Acts on a newer keygroup config: joins (pulling existing data from the
    /// other replicas before serving), leaves (deleting local data) or
    /// updates replica, ttl and trigger settings. Stale configs are ignored.
    pub fn handle_config_change(&mut self, cfg: KeygroupConfig, now: u64) -> Result<(), NodeError> {
        let kg = cfg.name.clone();
        let was = match self.configs.get(&kg) {
            Some(known) if known.version >= cfg.version => return Ok(()),
            Some(known) => known.is_replica(&self.id),
            None => false,
        };
        let is = cfg.is_replica(&self.id);
        let peers: Vec<NodeId> = cfg
            .replica_nodes()
            .filter(|n| **n != self.id)
            .cloned()
            .collect();
        self.configs.insert(kg.clone(), cfg.clone());
        if is && !was {
            self.store.create_keygroup(&kg, cfg.mode)?;
            self.serving.remove(&kg);
            self.pulled.remove(&kg);
            // a keygroup has no data before its first config
            if peers.is_empty() || cfg.version <= 1 {
                self.serving.insert(kg.clone());
            } else {
                for p in &peers {
                    self.join_pull(&kg, p, now);
                }
            }
        } else if was && !is {
            self.serving.remove(&kg);
            self.pulls.retain(|(k, _), _| k != &kg);
            self.store.drop_keygroup(&kg)?;
        } else if is {
            self.pulls
                .retain(|(k, p), _| k != &kg || peers.contains(p));
            if !self.serving.contains(&kg) {
                self.finish_pull_if_done(&kg);
            }
        }
        let (mine, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.parked)
            .into_iter()
            .partition(|m| m.kg == kg);
        self.parked = rest;
        if is {
            for m in mine {
                let _ = self.apply_replication(m, now);
            }
        }
        Ok(())
    }

    // ---- triggers ---------------------------------------------------------

    fn fire_triggers(&mut self, cfg: &KeygroupConfig, key: &str, value: &VersionedValue, now: u64) {
        let targets: Vec<TriggerConfig> = cfg
            .triggers
            .iter()
            .filter(|t| t.node == self.id)
            .cloned()
            .collect();
        for trigger in targets {
            let event = TriggerEvent {
                kind: if value.is_tombstone() {
                    TriggerKind::Delete
                } else {
                    TriggerKind::Update
                },
                kg: cfg.name.clone(),
                key: key.to_string(),
                val: value.payload.bytes().cloned(),
            };
            self.stats.triggers_fired += 1;
            let dispatch = self.fresh_id();
            self.dispatches.insert(
                dispatch,
                TriggerDispatch {
                    trigger,
                    event,
                    attempt: 0,
                    in_flight: None,
                    retry_at: now,
                },
            );
            self.send_trigger(dispatch, now);
        }
    }

    fn send_trigger(&mut self, dispatch: u64, now: u64) {
        let id = self.fresh_id();
        let base = self.opts.trigger_backoff_ms;
        let Some(d) = self.dispatches.get_mut(&dispatch) else {
            return;
        };
        d.attempt += 1;
        let timeout = base << (d.attempt - 1).min(16);
        d.in_flight = Some(InFlight {
            id,
            deadline: now + timeout,
        });
        self.pending.insert(id, Pending::Trigger { dispatch });
        self.outgoing.push(Outgoing::Trigger {
            endpoint: d.trigger.endpoint.clone(),
            id,
            event: d.event.clone(),
        });
    }

    fn trigger_failed(&mut self, dispatch: u64, now: u64) {
        let max = self.opts.trigger_attempts;
        let base = self.opts.trigger_backoff_ms;
        let Some(d) = self.dispatches.get_mut(&dispatch) else {
            return;
        };
        if let Some(f) = d.in_flight.take() {
            self.pending.remove(&f.id);
        }
        if d.attempt >= max {
            warn!(
                "{}: dropping {:?} event for {}/{} after {} attempts to {}",
                self.id, d.event.kind, d.event.kg, d.event.key, d.attempt, d.trigger.endpoint
            );
            self.stats.triggers_dropped += 1;
            self.dispatches.remove(&dispatch);
        } else {
            d.retry_at = now + (base << (d.attempt - 1).min(16));
        }
    }

    // ---- driver entry points ----------------------------------------------

    /// Serves one request addressed to this node.
    pub fn handle_request(&mut self, req: Request, now: u64) -> Response {
        let result = match req {
            Request::Update {
                kg,
                key,
                val,
                supersede,
            } => self
                .handle_update(&kg, &key, val, supersede.as_deref(), now)
                .map(|v| Response::ok().with_version(v)),
            Request::Delete { kg, key, supersede } => self
                .handle_delete(&kg, &key, supersede.as_deref(), now)
                .map(|v| Response::ok().with_version(v)),
            Request::Read { kg, key } => self.handle_read(&kg, &key).map(|r| Response {
                values: Some(
                    r.values
                        .into_iter()
                        .map(|(b, v)| WireValue {
                            val: Some(b),
                            version: v,
                            write_time: None,
                        })
                        .collect(),
                ),
                tombstones: (!r.tombstones.is_empty()).then_some(r.tombstones),
                ..Response::ok()
            }),
            Request::Scan { kg, start, count } => {
                self.handle_scan(&kg, &start, count).map(|entries| Response {
                    entries: Some(entries),
                    ..Response::ok()
                })
            }
            Request::Append { kg, val } => self.handle_append(&kg, val, now).map(|(key, v)| Response {
                key: Some(key),
                ..Response::ok().with_version(v)
            }),
            Request::Replicate { seq, items, .. } => {
                for item in items {
                    if let Err(e) = self.apply_replication(item, now) {
                        debug!("{}: replication item not applied: {e}", self.id);
                    }
                }
                Ok(Response {
                    ack: Some(seq),
                    ..Response::ok()
                })
            }
            Request::Ack { origin, seq } => {
                self.on_ack(&origin, seq);
                Ok(Response::ok())
            }
            Request::PullPage {
                kg,
                after,
                count,
                config_version,
            } => self.serve_pull(&kg, after.as_deref(), count, config_version),
            other => Ok(Response::error(
                ErrorCode::BadRequest,
                format!("nodes do not serve {}", op_name(&other)),
            )),
        };
        result.unwrap_or_else(|e| e.to_response())
    }

    /// Delivers the response to an outgoing request, or `None` when delivery
    /// failed.
    pub fn handle_response(&mut self, id: u64, resp: Option<Response>, now: u64) {
        let Some(pending) = self.pending.remove(&id) else {
            return;
        };
        match pending {
            Pending::Replicate { peer, upto } => {
                let Some(resp) = resp.filter(|r| r.ok) else {
                    // keep the batch in flight; it is resent at its deadline
                    return;
                };
                self.on_ack(&peer, resp.ack.unwrap_or(upto).min(upto));
                if let Some(ob) = self.outbox.get_mut(&peer) {
                    if ob.in_flight.as_ref().is_some_and(|f| f.id == id) {
                        ob.in_flight = None;
                    }
                }
                self.flush(&peer, now);
            }
            Pending::Pull { kg, peer } => self.on_pull_page(kg, peer, id, resp, now),
            Pending::Trigger { dispatch } => {
                if resp.is_some_and(|r| r.ok) {
                    self.stats.triggers_delivered += 1;
                    self.dispatches.remove(&dispatch);
                } else {
                    self.trigger_failed(dispatch, now);
                }
            }
        }
    }

    /// Runs due retransmissions, retries and sweeps.
    pub fn tick(&mut self, now: u64) {
        let expired: Vec<NodeId> = self
            .outbox
            .iter()
            .filter(|(_, o)| o.in_flight.as_ref().is_some_and(|f| f.deadline <= now))
            .map(|(p, _)| p.clone())
            .collect();
        for peer in expired {
            if let Some(f) = self.outbox.get_mut(&peer).and_then(|o| o.in_flight.take()) {
                self.pending.remove(&f.id);
            }
            self.flush(&peer, now);
        }

        let due: Vec<(KeygroupName, NodeId)> = self
            .pulls
            .iter()
            .filter(|(_, p)| match &p.in_flight {
                Some(f) => f.deadline <= now,
                None => p.retry_at <= now,
            })
            .map(|(k, _)| k.clone())
            .collect();
        for (kg, peer) in due {
            self.send_pull(&kg, &peer, now);
        }

        let timed_out: Vec<u64> = self
            .dispatches
            .iter()
            .filter(|(_, d)| d.in_flight.as_ref().is_some_and(|f| f.deadline <= now))
            .map(|(id, _)| *id)
            .collect();
        for id in timed_out {
            self.trigger_failed(id, now);
        }
        let retry: Vec<u64> = self
            .dispatches
            .iter()
            .filter(|(_, d)| d.in_flight.is_none() && d.retry_at <= now)
            .map(|(id, _)| *id)
            .collect();
        for id in retry {
            self.send_trigger(id, now);
        }

        if now >= self.next_sweep_at() {
            self.sweep(now);
        }
    }

    /// Expires data at partial replicas and collects old tombstones.
    pub fn sweep(&mut self, now: u64) {
        self.last_sweep = now;
        let local: Vec<(KeygroupName, Option<u64>)> = self
            .configs
            .values()
            .filter_map(|c| c.replica(&self.id).map(|r| (c.name.clone(), r.ttl)))
            .collect();
        for (kg, ttl) in local {
            match self.store.sweep_expired(&kg, ttl, now) {
                Ok(n) => self.stats.expired += n as u64,
                Err(e) => warn!("{}: expiry sweep of {kg} failed: {e}", self.id),
            }
            if let Err(e) = self
                .store
                .collect_tombstones(&kg, self.opts.tombstone_grace_ms, now)
            {
                warn!("{}: tombstone collection in {kg} failed: {e}", self.id);
            }
        }
    }
}
