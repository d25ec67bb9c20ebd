//! Forum workload: clients append posts to shared threads.
//!
//! Each client repeatedly picks a thread, reads it (retrying until a read
//! succeeds), merges any siblings by taking the union of their posts, adds
//! one post of its own and writes the list back; a rejected write is
//! followed by a fresh read. After each completed post the client moves to
//! another node with a fixed probability.

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checker::ConsistencyChecker;
use crate::client::{ClientError, GuaranteeMode, Session};
use crate::model::{KeygroupConfig, KeygroupMode, KeygroupName, NodeId, ReplicaConfig};
use crate::transport::sim::{ClientDelivery, Cluster, SimNetConfig};
use crate::wire::Request;

#[derive(Clone, Debug)]
pub struct ForumConfig {
    pub clients: usize,
    /// Posts each client completes.
    pub ops: usize,
    pub mode: GuaranteeMode,
    pub seed: u64,
    pub net: SimNetConfig,
    pub nodes: usize,
    pub threads: usize,
    pub switch_prob: f64,
    /// A client gives up on a post after this many rejected writes.
    pub max_update_attempts: u32,
    /// Virtual-time budget for the final settle.
    pub settle_budget_ms: u64,
}

impl Default for ForumConfig {
    fn default() -> Self {
        ForumConfig {
            clients: 10,
            ops: 200,
            mode: GuaranteeMode::Guarded,
            seed: 0,
            net: SimNetConfig::default(),
            nodes: 10,
            threads: 10,
            switch_prob: 0.1,
            max_update_attempts: 1000,
            settle_budget_ms: 600_000,
        }
    }
}

/// Counts per attempt number.
pub type Histogram = BTreeMap<u32, u64>;

fn mean(h: &Histogram) -> f64 {
    let n: u64 = h.values().sum();
    if n == 0 {
        return 0.0;
    }
    h.iter().map(|(k, v)| *k as f64 * *v as f64).sum::<f64>() / n as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct ForumReport {
    pub clients: usize,
    pub mode: &'static str,
    pub ops: usize,
    pub mrc_violation_rate: f64,
    pub rywc_violation_rate: f64,
    pub read_attempts_mean: f64,
    pub update_attempts_mean: f64,
    pub merge_ops: u64,
    pub reads_ok: u64,
    pub mrc_violations: u64,
    pub rywc_violations: u64,
    pub read_attempts: Histogram,
    pub update_attempts: Histogram,
    pub read_rejections: u64,
    pub update_rejections: u64,
    pub posts_written: usize,
    pub abandoned_posts: u64,
    pub lost_posts: usize,
    pub converged: bool,
    pub virtual_ms: u64,
    /// Encoded final state per replica.
    #[serde(skip)]
    pub dumps: BTreeMap<NodeId, Vec<u8>>,
    /// Digest and count of delivered simulator events.
    pub trace: (u64, u64),
}

pub fn mode_label(mode: GuaranteeMode) -> &'static str {
    match mode {
        GuaranteeMode::Guarded => "library",
        GuaranteeMode::Direct => "direct",
    }
}

pub const CSV_HEADER: &str =
    "clients,mode,mrc_violation_rate,rywc_violation_rate,read_attempts_mean,update_attempts_mean,merge_ops";

impl ForumReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.clients,
            self.mode,
            self.mrc_violation_rate,
            self.rywc_violation_rate,
            self.read_attempts_mean,
            self.update_attempts_mean,
            self.merge_ops
        )
    }
}

/// CSV text for a set of runs. Runs without operations contribute no row.
pub fn emit_csv(reports: &[ForumReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports.iter().filter(|r| r.ops > 0) {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn forum_keygroup() -> KeygroupName {
    KeygroupName::new("forum").expect("valid name")
}

pub fn node_name(i: usize) -> NodeId {
    NodeId::new(format!("node-{i}")).expect("valid id")
}

pub fn thread_key(i: usize) -> String {
    format!("thread-{i}")
}

fn parse_posts(bytes: &[u8]) -> BTreeSet<String> {
    serde_json::from_slice(bytes).unwrap_or_default()
}

fn encode_posts(posts: &BTreeSet<String>) -> Bytes {
    Bytes::from(serde_json::to_vec(posts).expect("string list serializes"))
}

enum Phase {
    Reading,
    Writing,
    Done,
}

struct Actor {
    idx: usize,
    session: Session,
    rng: ChaCha8Rng,
    completed: usize,
    next_post: u64,
    phase: Phase,
    thread: String,
    post: String,
    awaiting: Option<u64>,
    read_tries: u32,
    update_tries: u32,
}

struct Run<'a> {
    cfg: &'a ForumConfig,
    cluster: Cluster,
    kg: KeygroupName,
    nodes: Vec<NodeId>,
    checker: ConsistencyChecker,
    read_hist: Histogram,
    update_hist: Histogram,
    merge_ops: u64,
    read_rejections: u64,
    update_rejections: u64,
    abandoned: u64,
}

impl Run<'_> {
    fn begin_post(&mut self, a: &mut Actor) {
        if a.completed >= self.cfg.ops {
            a.phase = Phase::Done;
            return;
        }
        a.thread = thread_key(a.rng.random_range(0..self.cfg.threads));
        a.post = format!("c{}-{}", a.idx, a.next_post);
        a.next_post += 1;
        a.update_tries = 0;
        self.begin_read(a);
    }

    fn begin_read(&mut self, a: &mut Actor) {
        a.phase = Phase::Reading;
        a.read_tries = 0;
        self.send_read(a);
    }

    fn send_read(&mut self, a: &mut Actor) {
        a.read_tries += 1;
        let req = a.session.read_request(&self.kg, &a.thread);
        a.awaiting = Some(self.cluster.client_send(a.idx as u64, a.session.node(), req));
    }

    fn finish_post(&mut self, a: &mut Actor) {
        a.completed += 1;
        if a.rng.random_bool(self.cfg.switch_prob) && self.nodes.len() > 1 {
            let current = self.nodes.iter().position(|n| n == a.session.node()).unwrap_or(0);
            let mut next = a.rng.random_range(0..self.nodes.len() - 1);
            if next >= current {
                next += 1;
            }
            a.session
                .switch_node(self.nodes[next].clone())
                .expect("forum nodes are known");
        }
        self.begin_post(a);
    }

    fn on_response(&mut self, a: &mut Actor, resp: Result<crate::wire::Response, ClientError>) {
        match a.phase {
            Phase::Reading => {
                let result = resp.and_then(|r| a.session.complete_read(&self.kg, &a.thread, r));
                let values = match result {
                    Ok(v) => v,
                    Err(e) => {
                        if e == ClientError::Outdated {
                            self.read_rejections += 1;
                        }
                        self.send_read(a);
                        return;
                    }
                };
                *self.read_hist.entry(a.read_tries).or_insert(0) += 1;
                if values.len() > 1 {
                    self.merge_ops += 1;
                }
                let mut posts = BTreeSet::new();
                for (bytes, _) in &values {
                    posts.extend(parse_posts(bytes));
                }
                self.checker.observe_read(a.idx, &a.thread, &posts);
                posts.insert(a.post.clone());
                a.phase = Phase::Writing;
                a.update_tries += 1;
                let req = a.session.update_request(&self.kg, &a.thread, encode_posts(&posts));
                a.awaiting = Some(self.cluster.client_send(a.idx as u64, a.session.node(), req));
            }
            Phase::Writing => {
                let result = resp.and_then(|r| a.session.complete_write(&self.kg, &a.thread, r));
                match result {
                    Ok(_) => {
                        *self.update_hist.entry(a.update_tries).or_insert(0) += 1;
                        self.checker.record_write(a.idx, &a.thread, &a.post);
                        self.finish_post(a);
                    }
                    Err(e) => {
                        if e == ClientError::Outdated {
                            self.update_rejections += 1;
                        }
                        if a.update_tries >= self.cfg.max_update_attempts {
                            self.abandoned += 1;
                            self.finish_post(a);
                        } else {
                            self.begin_read(a);
                        }
                    }
                }
            }
            Phase::Done => {}
        }
    }
}

/// Runs the forum workload to completion on a fresh simulated cluster.
pub fn run_forum(cfg: &ForumConfig) -> anyhow::Result<ForumReport> {
    anyhow::ensure!(cfg.nodes > 0 && cfg.threads > 0, "need at least one node and thread");
    let net = SimNetConfig {
        seed: cfg.seed,
        ..cfg.net.clone()
    };
    let mut cluster = Cluster::new(net);
    let nodes: Vec<NodeId> = (0..cfg.nodes).map(node_name).collect();
    for n in &nodes {
        cluster.add_node(n.clone())?;
    }
    let kg = forum_keygroup();
    cluster.create_keygroup(KeygroupConfig::new(
        kg.clone(),
        KeygroupMode::Mutable,
        nodes.iter().cloned().map(ReplicaConfig::full).collect(),
    ))?;
    cluster.run_until_quiescent(cfg.settle_budget_ms)?;
    let setup = u64::MAX;
    for t in 0..cfg.threads {
        cluster
            .call(
                setup,
                &nodes[0],
                Request::Update {
                    kg: kg.clone(),
                    key: thread_key(t),
                    val: encode_posts(&BTreeSet::new()),
                    supersede: None,
                },
            )
            .map_err(|e| anyhow::anyhow!("creating {}: {e}", thread_key(t)))?;
    }
    cluster.run_until_quiescent(cfg.settle_budget_ms)?;
    cluster.take_buffered();
    let start = cluster.now();

    let mut actors: Vec<Actor> = (0..cfg.clients)
        .map(|i| {
            let mut session = Session::new(nodes[i % nodes.len()].clone(), cfg.mode);
            session.set_known_nodes(nodes.iter().cloned());
            let stream = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            Actor {
                idx: i,
                session,
                rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ stream),
                completed: 0,
                next_post: 0,
                phase: Phase::Done,
                thread: String::new(),
                post: String::new(),
                awaiting: None,
                read_tries: 0,
                update_tries: 0,
            }
        })
        .collect();

    let mut run = Run {
        cfg,
        cluster,
        kg: kg.clone(),
        nodes: nodes.clone(),
        checker: ConsistencyChecker::new(),
        read_hist: Histogram::new(),
        update_hist: Histogram::new(),
        merge_ops: 0,
        read_rejections: 0,
        update_rejections: 0,
        abandoned: 0,
    };
    for a in actors.iter_mut() {
        run.begin_post(a);
    }
    while actors.iter().any(|a| !matches!(a.phase, Phase::Done)) {
        let Some(delivery) = run.cluster.step() else {
            anyhow::bail!("simulation stalled with clients still active");
        };
        if let ClientDelivery::Response { client, id, resp } = delivery {
            let Some(a) = actors.get_mut(client as usize) else {
                continue;
            };
            if a.awaiting != Some(id) {
                continue;
            }
            a.awaiting = None;
            run.on_response(a, resp);
        }
    }
    let end = run.cluster.now();
    run.cluster.run_until_quiescent(cfg.settle_budget_ms)?;
    let converged = run.cluster.converged(&kg);

    let mut lost_posts = 0;
    if let Some(node) = run.cluster.node(&nodes[0]) {
        for t in 0..cfg.threads {
            let key = thread_key(t);
            let mut final_posts = BTreeSet::new();
            if let Ok(r) = node.handle_read(&kg, &key) {
                for (bytes, _) in r.values {
                    final_posts.extend(parse_posts(&bytes));
                }
            }
            lost_posts += run.checker.lost(&key, &final_posts).len();
        }
    }

    Ok(ForumReport {
        clients: cfg.clients,
        mode: mode_label(cfg.mode),
        ops: cfg.ops,
        mrc_violation_rate: run.checker.mrc_rate(),
        rywc_violation_rate: run.checker.rywc_rate(),
        read_attempts_mean: mean(&run.read_hist),
        update_attempts_mean: mean(&run.update_hist),
        merge_ops: run.merge_ops,
        reads_ok: run.checker.reads(),
        mrc_violations: run.checker.mrc_violations(),
        rywc_violations: run.checker.rywc_violations(),
        read_attempts: run.read_hist,
        update_attempts: run.update_hist,
        read_rejections: run.read_rejections,
        update_rejections: run.update_rejections,
        posts_written: run.checker.posts_written(),
        abandoned_posts: run.abandoned,
        lost_posts,
        converged,
        virtual_ms: end - start,
        dumps: run.cluster.dump_bytes(&kg),
        trace: run.cluster.trace_digest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_fixed_header() {
        assert_eq!(emit_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn small_guarded_run_is_clean() {
        let cfg = ForumConfig {
            clients: 4,
            ops: 20,
            ..Default::default()
        };
        let r = run_forum(&cfg).unwrap();
        assert_eq!(r.mrc_violations + r.rywc_violations, 0, "{r:?}");
        assert_eq!(r.lost_posts, 0);
        assert!(r.converged);
        assert_eq!(r.posts_written, 80);
    }
}
