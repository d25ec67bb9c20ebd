//! Deterministic in-process network.
//!
//! A single-threaded discrete event loop delivers typed messages between
//! nodes, clients and trigger sinks with per-link latency drawn from a seeded
//! RNG. The same seed and the same sequence of calls always yield the same
//! event order, which [`Cluster::trace_digest`] summarises.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{ClientError, Connection};
use crate::model::{KeygroupConfig, KeygroupName, NodeId};
use crate::naming::{Naming, NamingError};
use crate::node::{Node, NodeOptions, Outgoing};
use crate::storage::{DiskStore, MemoryStore, StorageAdapter, StoredEntry};
use crate::wire::{ConfigChange, Request, Response, TriggerEvent, WireEntry, WireValue};

/// Link drop window between two groups of endpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub a: Vec<String>,
    pub b: Vec<String>,
    #[serde(default)]
    pub from_ms: u64,
    #[serde(default)]
    pub until_ms: Option<u64>,
}

impl Partition {
    fn cuts(&self, x: &str, y: &str, now: u64) -> bool {
        let active = now >= self.from_ms && self.until_ms.is_none_or(|u| now < u);
        let has = |g: &[String], n: &str| g.iter().any(|m| m == n);
        active && ((has(&self.a, x) && has(&self.b, y)) || (has(&self.a, y) && has(&self.b, x)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RttEntry {
    pub a: String,
    pub b: String,
    pub ms: u64,
}

/// Network model, loadable from JSON with `--net`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimNetConfig {
    pub default_rtt_ms: u64,
    /// Symmetric per-pair overrides.
    pub rtt: Vec<RttEntry>,
    pub seed: u64,
    pub duplicate_prob: f64,
    /// Extra one-way delay drawn uniformly from `0..=reorder_jitter_ms`.
    pub reorder_jitter_ms: u64,
    pub partitions: Vec<Partition>,
    /// Time after which a client request without response fails.
    pub client_timeout_ms: u64,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        SimNetConfig {
            default_rtt_ms: 50,
            rtt: Vec::new(),
            seed: 0,
            duplicate_prob: 0.0,
            reorder_jitter_ms: 0,
            partitions: Vec::new(),
            client_timeout_ms: 2000,
        }
    }
}

impl SimNetConfig {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn rtt_between(&self, a: &str, b: &str) -> u64 {
        self.rtt
            .iter()
            .find(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a))
            .map_or(self.default_rtt_ms, |e| e.ms)
    }
}

/// Virtual milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct VirtualClock(u64);

impl VirtualClock {
    pub fn now(&self) -> u64 {
        self.0
    }

    fn advance_to(&mut self, t: u64) {
        debug_assert!(t >= self.0, "time moves forward");
        self.0 = self.0.max(t);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Addr {
    Node(NodeId),
    Client(u64),
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Addr::Node(n) => write!(f, "{n}"),
            Addr::Client(c) => write!(f, "client-{c}"),
        }
    }
}

enum Event {
    Request {
        from: Addr,
        to: NodeId,
        id: u64,
        req: Request,
    },
    Trigger {
        from: NodeId,
        endpoint: String,
        id: u64,
        event: TriggerEvent,
    },
    Response {
        to: Addr,
        id: u64,
        resp: Response,
    },
    ClientTimeout {
        client: u64,
        id: u64,
    },
    Wake {
        client: u64,
        token: u64,
    },
}

impl Event {
    fn in_flight(&self) -> bool {
        matches!(
            self,
            Event::Request { .. } | Event::Trigger { .. } | Event::Response { .. }
        )
    }
}

/// Something that happened to a simulated client.
#[derive(Clone, Debug, PartialEq)]
pub enum ClientDelivery {
    Response {
        client: u64,
        id: u64,
        resp: Result<Response, ClientError>,
    },
    Wake {
        client: u64,
        token: u64,
    },
}

/// Run did not settle within its time budget.
#[derive(Debug, thiserror::Error)]
#[error("not quiescent after {budget_ms} ms of virtual time ({in_flight} messages in flight)")]
pub struct NotQuiescent {
    pub budget_ms: u64,
    pub in_flight: usize,
}

/// Nodes, naming, trigger sinks and clients on one virtual network.
pub struct Cluster {
    net: SimNetConfig,
    clock: VirtualClock,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: BTreeMap<u64, Event>,
    seq: u64,
    in_flight: usize,
    nodes: BTreeMap<NodeId, Node>,
    node_opts: NodeOptions,
    disk_root: Option<PathBuf>,
    naming: Naming,
    naming_cursor: u64,
    sinks: BTreeMap<String, Vec<TriggerEvent>>,
    sinks_down: BTreeSet<String>,
    outstanding: BTreeSet<(u64, u64)>,
    next_client_req: u64,
    buffered: Vec<ClientDelivery>,
    trace: DefaultHasher,
    delivered: u64,
}

impl Cluster {
    pub fn new(net: SimNetConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(net.seed);
        Cluster {
            net,
            clock: VirtualClock::default(),
            rng,
            queue: BinaryHeap::new(),
            events: BTreeMap::new(),
            seq: 0,
            in_flight: 0,
            nodes: BTreeMap::new(),
            node_opts: NodeOptions::default(),
            disk_root: None,
            naming: Naming::new(),
            naming_cursor: 0,
            sinks: BTreeMap::new(),
            sinks_down: BTreeSet::new(),
            outstanding: BTreeSet::new(),
            next_client_req: 0,
            buffered: Vec::new(),
            trace: DefaultHasher::new(),
            delivered: 0,
        }
    }

    /// Nodes added afterwards persist to `<root>/<node-id>`.
    pub fn with_disk(mut self, root: impl Into<PathBuf>) -> Self {
        self.disk_root = Some(root.into());
        self
    }

    pub fn with_node_options(mut self, opts: NodeOptions) -> Self {
        self.node_opts = opts;
        self
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn net(&self) -> &SimNetConfig {
        &self.net
    }

    pub fn naming(&self) -> &Naming {
        &self.naming
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn open_store(&self, id: &NodeId) -> anyhow::Result<Box<dyn StorageAdapter>> {
        Ok(match &self.disk_root {
            Some(root) => Box::new(DiskStore::open(root.join(id.as_str()))?),
            None => Box::new(MemoryStore::new()),
        })
    }

    pub fn add_node(&mut self, id: NodeId) -> anyhow::Result<()> {
        self.naming.register_node(id.clone(), format!("sim://{id}"))?;
        let store = self.open_store(&id)?;
        let node = Node::with_options(id.clone(), store, self.node_opts.clone());
        self.nodes.insert(id, node);
        Ok(())
    }

    /// Drops a node's in-memory state and reopens it from its store, then
    /// hands it the current configs.
    pub fn restart_node(&mut self, id: &NodeId) -> anyhow::Result<()> {
        self.nodes.remove(id);
        let store = self.open_store(id)?;
        let mut node = Node::with_options(id.clone(), store, self.node_opts.clone());
        let now = self.now();
        for kg in self.naming.keygroups() {
            node.handle_config_change(self.naming.get_config(&kg)?, now)?;
        }
        self.nodes.insert(id.clone(), node);
        self.drain(id);
        Ok(())
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().cloned().collect()
    }

    pub fn add_sink(&mut self, endpoint: impl Into<String>) {
        self.sinks.entry(endpoint.into()).or_default();
    }

    /// A down sink never answers, so deliveries to it time out.
    pub fn set_sink_down(&mut self, endpoint: &str, down: bool) {
        if down {
            self.sinks_down.insert(endpoint.to_string());
        } else {
            self.sinks_down.remove(endpoint);
        }
    }

    pub fn sink_events(&self, endpoint: &str) -> &[TriggerEvent] {
        self.sinks.get(endpoint).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn create_keygroup(&mut self, cfg: KeygroupConfig) -> Result<u64, NamingError> {
        let v = self.naming.create_keygroup(cfg)?;
        self.sync_configs();
        Ok(v)
    }

    pub fn update_keygroup(
        &mut self,
        name: &KeygroupName,
        change: ConfigChange,
    ) -> Result<u64, NamingError> {
        let expected = self.naming.get_config(name)?.version;
        let v = self.naming.update_keygroup(name, expected, change)?;
        self.sync_configs();
        Ok(v)
    }

    /// Hands every accepted config change to the nodes.
    pub fn sync_configs(&mut self) {
        let (changes, next) = self.naming.changes_since(self.naming_cursor);
        self.naming_cursor = next;
        let now = self.now();
        for cfg in changes {
            let ids: Vec<NodeId> = self.nodes.keys().cloned().collect();
            for id in ids {
                let node = self.nodes.get_mut(&id).expect("node exists");
                if let Err(e) = node.handle_config_change(cfg.clone(), now) {
                    log::warn!("{id}: config {} v{} failed: {e}", cfg.name, cfg.version);
                }
                self.drain(&id);
            }
        }
    }

    fn record(&mut self, what: &str, a: &dyn fmt::Display, b: &dyn fmt::Display, id: u64) {
        (self.now(), what, a.to_string(), b.to_string(), id).hash(&mut self.trace);
        self.delivered += 1;
    }

    /// Hash over every delivery so far, for determinism checks.
    pub fn trace_digest(&self) -> (u64, u64) {
        (self.trace.clone().finish(), self.delivered)
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.seq += 1;
        if event.in_flight() {
            self.in_flight += 1;
        }
        self.queue.push(Reverse((at, self.seq)));
        self.events.insert(self.seq, event);
    }

    /// One-way delay, or `None` if the link is cut right now.
    fn link(&mut self, a: &str, b: &str) -> Option<u64> {
        let now = self.now();
        if self.net.partitions.iter().any(|p| p.cuts(a, b, now)) {
            return None;
        }
        let mut d = self.net.rtt_between(a, b) / 2;
        if self.net.reorder_jitter_ms > 0 {
            d += self.rng.random_range(0..=self.net.reorder_jitter_ms);
        }
        Some(d)
    }

    fn duplicate(&mut self) -> bool {
        self.net.duplicate_prob > 0.0 && self.rng.random_bool(self.net.duplicate_prob.min(1.0))
    }

    fn send_request(&mut self, from: Addr, to: NodeId, id: u64, req: Request) {
        let copies = if self.duplicate() { 2 } else { 1 };
        for _ in 0..copies {
            if let Some(d) = self.link(&from.to_string(), to.as_str()) {
                let at = self.now() + d;
                self.schedule(
                    at,
                    Event::Request {
                        from: from.clone(),
                        to: to.clone(),
                        id,
                        req: req.clone(),
                    },
                );
            }
        }
    }

    fn send_response(&mut self, from: &str, to: Addr, id: u64, resp: Response) {
        if let Some(d) = self.link(from, &to.to_string()) {
            let at = self.now() + d;
            self.schedule(at, Event::Response { to, id, resp });
        }
    }

    /// Moves a node's outgoing messages onto the network.
    fn drain(&mut self, id: &NodeId) {
        let Some(node) = self.nodes.get_mut(id) else {
            return;
        };
        for out in node.take_outgoing() {
            match out {
                Outgoing::Peer { to, id: rid, request } => {
                    self.send_request(Addr::Node(id.clone()), to, rid, request)
                }
                Outgoing::Trigger {
                    endpoint,
                    id: rid,
                    event,
                } => {
                    if let Some(d) = self.link(id.as_str(), &endpoint) {
                        let at = self.now() + d;
                        self.schedule(
                            at,
                            Event::Trigger {
                                from: id.clone(),
                                endpoint,
                                id: rid,
                                event,
                            },
                        );
                    }
                }
            }
        }
    }

    /// Sends `req` from a client; the response (or a timeout) comes back as a
    /// [`ClientDelivery`]. Returns the request id.
    pub fn client_send(&mut self, client: u64, to: &NodeId, req: Request) -> u64 {
        self.next_client_req += 1;
        let id = self.next_client_req;
        self.outstanding.insert((client, id));
        let deadline = self.now() + self.net.client_timeout_ms;
        self.schedule(deadline, Event::ClientTimeout { client, id });
        if self.nodes.contains_key(to) {
            self.send_request(Addr::Client(client), to.clone(), id, req);
        }
        id
    }

    /// Wakes `client` with `token` after `delay_ms`.
    pub fn client_wake(&mut self, client: u64, token: u64, delay_ms: u64) {
        let at = self.now() + delay_ms;
        self.schedule(at, Event::Wake { client, token });
    }

    /// Blocking call on behalf of `client`.
    pub fn call(&mut self, client: u64, to: &NodeId, req: Request) -> Result<Response, ClientError> {
        let id = self.client_send(client, to, req);
        let mut others = Vec::new();
        let result = loop {
            match self.step() {
                Some(ClientDelivery::Response { client: c, id: rid, resp }) if c == client && rid == id => {
                    break resp;
                }
                Some(other) => others.push(other),
                None => break Err(ClientError::Transport("simulation stalled".into())),
            }
        };
        self.buffered.extend(others);
        result
    }

    pub fn take_buffered(&mut self) -> Vec<ClientDelivery> {
        std::mem::take(&mut self.buffered)
    }

    fn next_node_deadline(&self) -> Option<u64> {
        self.nodes.values().filter_map(|n| n.next_deadline()).min()
    }

    /// Processes the next event or due node deadline. Client-facing events
    /// are returned; `None` means nothing is scheduled at all.
    pub fn step(&mut self) -> Option<ClientDelivery> {
        loop {
            let next_event = self.queue.peek().map(|Reverse((t, _))| *t);
            let next_deadline = self.next_node_deadline();
            match (next_event, next_deadline) {
                (None, None) => return None,
                (Some(t), Some(d)) if d < t => self.tick_nodes(d),
                (None, Some(d)) => self.tick_nodes(d),
                (Some(_), _) => {
                    if let Some(out) = self.pop_event() {
                        return Some(out);
                    }
                }
            }
        }
    }

    /// Ticks every node whose deadline is at or before `t`. Overdue
    /// deadlines run at the current time.
    fn tick_nodes(&mut self, t: u64) {
        self.clock.advance_to(t.max(self.now()));
        let now = self.now();
        let due: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|(_, n)| n.next_deadline().is_some_and(|d| d <= now) || n.next_sweep_at() <= now)
            .map(|(id, _)| id.clone())
            .collect();
        for id in due {
            self.nodes.get_mut(&id).expect("node exists").tick(now);
            self.drain(&id);
        }
    }

    fn pop_event(&mut self) -> Option<ClientDelivery> {
        let Reverse((t, seq)) = self.queue.pop()?;
        let event = self.events.remove(&seq).expect("event stored");
        if event.in_flight() {
            self.in_flight -= 1;
        }
        self.clock.advance_to(t);
        let now = self.now();
        match event {
            Event::Request { from, to, id, req } => {
                self.record("req", &from, &to, id);
                let node = self.nodes.get_mut(&to)?;
                let resp = node.handle_request(req, now);
                self.drain(&to);
                self.send_response(to.as_str(), from, id, resp);
                None
            }
            Event::Trigger {
                from,
                endpoint,
                id,
                event,
            } => {
                self.record("trigger", &from, &endpoint, id);
                if self.sinks_down.contains(&endpoint) {
                    return None;
                }
                let log = self.sinks.get_mut(&endpoint)?;
                log.push(event);
                self.send_response(&endpoint, Addr::Node(from), id, Response::ok());
                None
            }
            Event::Response { to, id, resp } => {
                self.record("resp", &"", &to, id);
                match to {
                    Addr::Node(n) => {
                        if let Some(node) = self.nodes.get_mut(&n) {
                            node.handle_response(id, Some(resp), now);
                            self.drain(&n);
                        }
                        None
                    }
                    Addr::Client(client) => self.outstanding.remove(&(client, id)).then_some(
                        ClientDelivery::Response {
                            client,
                            id,
                            resp: Ok(resp),
                        },
                    ),
                }
            }
            Event::ClientTimeout { client, id } => {
                self.outstanding.remove(&(client, id)).then(|| {
                    ClientDelivery::Response {
                        client,
                        id,
                        resp: Err(ClientError::Transport("request timed out".into())),
                    }
                })
            }
            Event::Wake { client, token } => Some(ClientDelivery::Wake { client, token }),
        }
    }

    pub fn is_quiescent(&self) -> bool {
        self.in_flight == 0 && self.nodes.values().all(Node::is_idle)
    }

    /// Runs until no message is in flight and every node is idle. Client
    /// deliveries seen on the way are buffered.
    pub fn run_until_quiescent(&mut self, budget_ms: u64) -> Result<u64, NotQuiescent> {
        let limit = self.now() + budget_ms;
        while !self.is_quiescent() {
            let next_event = self.queue.peek().map(|Reverse((t, _))| *t);
            let next = next_event.into_iter().chain(self.next_node_deadline()).min();
            match next {
                Some(t) if t <= limit => {
                    if let Some(d) = self.step() {
                        self.buffered.push(d);
                    }
                }
                _ => {
                    return Err(NotQuiescent {
                        budget_ms,
                        in_flight: self.in_flight,
                    })
                }
            }
        }
        Ok(self.now())
    }

    /// Lets `ms` of virtual time pass, running sweeps at their interval.
    pub fn advance(&mut self, ms: u64) {
        let target = self.now() + ms;
        loop {
            let next_event = self.queue.peek().map(|Reverse((t, _))| *t);
            let next_sweep = self.nodes.values().map(Node::next_sweep_at).min();
            let next = next_event
                .into_iter()
                .chain(self.next_node_deadline())
                .chain(next_sweep)
                .min();
            match next {
                Some(t) if t <= target => {
                    if next_event == Some(t) {
                        if let Some(d) = self.pop_event() {
                            self.buffered.push(d);
                        }
                    } else {
                        self.tick_nodes(t);
                    }
                }
                _ => break,
            }
        }
        self.clock.advance_to(target);
    }

    pub fn dump(&self, id: &NodeId) -> Vec<StoredEntry> {
        self.nodes.get(id).map(|n| n.store().dump()).unwrap_or_default()
    }

    /// Stored state of `kg` at each of its replicas.
    pub fn replica_dumps(&self, kg: &KeygroupName) -> BTreeMap<NodeId, Vec<StoredEntry>> {
        let Ok(cfg) = self.naming.get_config(kg) else {
            return BTreeMap::new();
        };
        cfg.replica_nodes()
            .filter_map(|n| {
                let node = self.nodes.get(n)?;
                let entries = node
                    .store()
                    .entries(kg, std::ops::Bound::Unbounded, usize::MAX, true)
                    .unwrap_or_default();
                Some((n.clone(), entries))
            })
            .collect()
    }

    /// All replicas of `kg` hold identical state.
    /// Canonical JSON encoding of each replica's dump of `kg`.
    pub fn dump_bytes(&self, kg: &KeygroupName) -> BTreeMap<NodeId, Vec<u8>> {
        self.replica_dumps(kg)
            .into_iter()
            .map(|(n, entries)| {
                let wire: Vec<WireEntry> = entries
                    .iter()
                    .map(|e| WireEntry {
                        key: e.key.clone(),
                        values: e.siblings.iter().map(WireValue::from_stored).collect(),
                    })
                    .collect();
                (n, crate::wire::encode(&wire))
            })
            .collect()
    }

    pub fn converged(&self, kg: &KeygroupName) -> bool {
        let dumps = self.replica_dumps(kg);
        let mut it = dumps.values();
        match it.next() {
            Some(first) => it.all(|d| d == first),
            None => true,
        }
    }
}

/// [`Connection`] for a client living on a shared [`Cluster`].
#[derive(Clone)]
pub struct SimConnection {
    cluster: Rc<RefCell<Cluster>>,
    client: u64,
}

impl SimConnection {
    pub fn new(cluster: Rc<RefCell<Cluster>>, client: u64) -> Self {
        SimConnection { cluster, client }
    }
}

impl Connection for SimConnection {
    fn call(&mut self, node: &NodeId, req: Request) -> Result<Response, ClientError> {
        self.cluster.borrow_mut().call(self.client, node, req)
    }

    fn call_naming(&mut self, req: Request) -> Result<Response, ClientError> {
        let mut c = self.cluster.borrow_mut();
        let resp = c.naming.handle_request(req);
        c.sync_configs();
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{Client, GuaranteeMode};
    use crate::model::{KeygroupMode, ReplicaConfig};

    fn n(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    fn three_nodes(net: SimNetConfig) -> Cluster {
        let mut c = Cluster::new(net);
        for id in ["A", "B", "C"] {
            c.add_node(n(id)).unwrap();
        }
        let cfg = KeygroupConfig::new(
            KeygroupName::new("kg").unwrap(),
            KeygroupMode::Mutable,
            ["A", "B", "C"].iter().map(|i| ReplicaConfig::full(n(i))).collect(),
        );
        c.create_keygroup(cfg).unwrap();
        c.run_until_quiescent(10_000).unwrap();
        c
    }

    #[test]
    fn writes_replicate_to_all() {
        let c = Rc::new(RefCell::new(three_nodes(SimNetConfig::default())));
        let kg = KeygroupName::new("kg").unwrap();
        let mut client = Client::new(SimConnection::new(c.clone(), 0), n("A"), GuaranteeMode::Guarded);
        client.update(&kg, "k", "v").unwrap();
        c.borrow_mut().run_until_quiescent(10_000).unwrap();
        assert!(c.borrow().converged(&kg));
        client.switch_node(n("C")).unwrap();
        let got = client.read(&kg, "k").unwrap();
        assert_eq!(got[0].0, bytes::Bytes::from("v"));
    }

    #[test]
    fn partition_heals_and_converges() {
        let net = SimNetConfig {
            partitions: vec![Partition {
                a: vec!["A".into()],
                b: vec!["B".into(), "C".into()],
                from_ms: 0,
                until_ms: Some(5_000),
            }],
            ..Default::default()
        };
        let mut c = Cluster::new(net);
        for id in ["A", "B", "C"] {
            c.add_node(n(id)).unwrap();
        }
        let kg = KeygroupName::new("kg").unwrap();
        c.create_keygroup(KeygroupConfig::new(
            kg.clone(),
            KeygroupMode::Mutable,
            vec![ReplicaConfig::full(n("A"))],
        ))
        .unwrap();
        c.call(0, &n("A"), Request::Update { kg: kg.clone(), key: "k".into(), val: "x".into(), supersede: None })
            .unwrap();
        for id in ["B", "C"] {
            c.update_keygroup(&kg, ConfigChange::AddReplica { replica: ReplicaConfig::full(n(id)) })
                .unwrap();
        }
        c.run_until_quiescent(60_000).unwrap();
        assert!(c.now() >= 5_000);
        assert!(c.converged(&kg));
        assert_eq!(c.replica_dumps(&kg).len(), 3);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = |seed| {
            let net = SimNetConfig {
                seed,
                reorder_jitter_ms: 20,
                duplicate_prob: 0.1,
                ..Default::default()
            };
            let mut c = three_nodes(net);
            let kg = KeygroupName::new("kg").unwrap();
            for (i, to) in ["A", "B", "C", "A"].iter().enumerate() {
                let req = Request::Update { kg: kg.clone(), key: format!("k{}", i % 2), val: "x".into(), supersede: None };
                c.client_send(i as u64, &n(to), req);
            }
            c.run_until_quiescent(60_000).unwrap();
            assert!(c.converged(&kg));
            c.trace_digest()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
