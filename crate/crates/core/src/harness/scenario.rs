//! Declarative scenario scripts run against a simulated deployment.
//!
//! A script names its nodes and trigger sinks and lists steps. Steps either
//! act (configure keygroups, write through a guarded client, let time pass)
//! or assert on node state, trigger deliveries or convergence. The first
//! failing step aborts the run with its index.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use anyhow::{anyhow, bail, ensure, Context};
use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::client::{Client, ClientError, GuaranteeMode};
use crate::model::{
    KeygroupConfig, KeygroupMode, KeygroupName, NodeId, ReplicaConfig, TriggerConfig,
};
use crate::node::NodeError;
use crate::transport::sim::{Cluster, SimConnection, SimNetConfig};
use crate::wire::{ConfigChange, TriggerKind};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub name: String,
    pub nodes: Vec<NodeId>,
    #[serde(default)]
    pub sinks: Vec<String>,
    #[serde(default)]
    pub net: Option<SimNetConfig>,
    pub steps: Vec<Step>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateHow {
    /// Sum numeric payloads into one `{"count","sum"}` record under `key`.
    #[default]
    Sum,
    /// Copy each item to the target keygroup under its own key.
    Copy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    CreateKeygroup {
        name: KeygroupName,
        #[serde(default = "mutable")]
        mode: KeygroupMode,
        replicas: Vec<ReplicaConfig>,
        #[serde(default)]
        triggers: Vec<TriggerConfig>,
    },
    AddReplica {
        kg: KeygroupName,
        node: NodeId,
        #[serde(default)]
        ttl: Option<u64>,
    },
    RemoveReplica {
        kg: KeygroupName,
        node: NodeId,
    },
    SetTtl {
        kg: KeygroupName,
        node: NodeId,
        ttl: Option<u64>,
    },
    AddTrigger {
        kg: KeygroupName,
        id: String,
        endpoint: String,
        node: NodeId,
    },
    RemoveTrigger {
        kg: KeygroupName,
        id: String,
    },
    /// Read-then-update through the scenario's guarded client.
    Write {
        node: NodeId,
        kg: KeygroupName,
        key: String,
        value: String,
    },
    Delete {
        node: NodeId,
        kg: KeygroupName,
        key: String,
    },
    Append {
        node: NodeId,
        kg: KeygroupName,
        value: String,
        #[serde(default)]
        expect_key: Option<String>,
    },
    /// The node's local live payloads for `key`, in any order.
    ExpectRead {
        node: NodeId,
        kg: KeygroupName,
        key: String,
        values: Vec<String>,
    },
    ExpectAbsent {
        node: NodeId,
        kg: KeygroupName,
        key: String,
    },
    ExpectNoLocalData {
        node: NodeId,
        kg: KeygroupName,
    },
    RunQuiescent {
        #[serde(default = "default_budget")]
        budget_ms: u64,
    },
    Advance {
        ms: u64,
    },
    ExpectConverged {
        kg: KeygroupName,
    },
    ExpectTriggerEvents {
        endpoint: String,
        #[serde(default)]
        kg: Option<KeygroupName>,
        #[serde(default)]
        kind: Option<TriggerKind>,
        count: usize,
    },
    /// Processes update events delivered to `endpoint` since the previous
    /// aggregate step on it: writes results to `to_kg` at `node` and,
    /// optionally, deletes the processed items from `from_kg` there.
    Aggregate {
        endpoint: String,
        node: NodeId,
        from_kg: KeygroupName,
        to_kg: KeygroupName,
        #[serde(default)]
        how: AggregateHow,
        #[serde(default)]
        key: Option<String>,
        #[serde(default)]
        delete_processed: bool,
    },
}

fn mutable() -> KeygroupMode {
    KeygroupMode::Mutable
}

fn default_budget() -> u64 {
    600_000
}

impl Step {
    fn name(&self) -> &'static str {
        match self {
            Step::CreateKeygroup { .. } => "create_keygroup",
            Step::AddReplica { .. } => "add_replica",
            Step::RemoveReplica { .. } => "remove_replica",
            Step::SetTtl { .. } => "set_ttl",
            Step::AddTrigger { .. } => "add_trigger",
            Step::RemoveTrigger { .. } => "remove_trigger",
            Step::Write { .. } => "write",
            Step::Delete { .. } => "delete",
            Step::Append { .. } => "append",
            Step::ExpectRead { .. } => "expect_read",
            Step::ExpectAbsent { .. } => "expect_absent",
            Step::ExpectNoLocalData { .. } => "expect_no_local_data",
            Step::RunQuiescent { .. } => "run_quiescent",
            Step::Advance { .. } => "advance",
            Step::ExpectConverged { .. } => "expect_converged",
            Step::ExpectTriggerEvents { .. } => "expect_trigger_events",
            Step::Aggregate { .. } => "aggregate",
        }
    }
}

impl Script {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Outcome of a completed script.
#[derive(Clone, Debug, Default)]
pub struct ScenarioLog {
    pub lines: Vec<String>,
    pub virtual_ms: u64,
}

struct Runner {
    cluster: Rc<RefCell<Cluster>>,
    client: Client<SimConnection>,
    cursors: BTreeMap<String, usize>,
}

/// Runs `script`; `seed` overrides the script's network seed.
pub fn run_scenario(script: &Script, seed: Option<u64>) -> anyhow::Result<ScenarioLog> {
    let mut net = script.net.clone().unwrap_or_default();
    if let Some(s) = seed {
        net.seed = s;
    }
    let mut cluster = Cluster::new(net);
    for n in &script.nodes {
        cluster.add_node(n.clone())?;
    }
    for s in &script.sinks {
        cluster.add_sink(s.clone());
    }
    let first = script
        .nodes
        .first()
        .cloned()
        .ok_or_else(|| anyhow!("script has no nodes"))?;
    let cluster = Rc::new(RefCell::new(cluster));
    let mut client = Client::new(SimConnection::new(cluster.clone(), 0), first, GuaranteeMode::Guarded);
    client.session_mut().set_known_nodes(script.nodes.iter().cloned());
    let mut runner = Runner {
        cluster,
        client,
        cursors: BTreeMap::new(),
    };
    let mut log = ScenarioLog::default();
    for (i, step) in script.steps.iter().enumerate() {
        runner
            .step(step)
            .with_context(|| format!("step {i} ({}) failed", step.name()))?;
        let now = runner.cluster.borrow().now();
        log.lines.push(format!("step {i} {} ok at {now} ms", step.name()));
    }
    log.virtual_ms = runner.cluster.borrow().now();
    Ok(log)
}

fn local_values(cluster: &Cluster, node: &NodeId, kg: &KeygroupName, key: &str) -> anyhow::Result<Option<Vec<String>>> {
    let n = cluster.node(node).ok_or_else(|| anyhow!("unknown node {node}"))?;
    match n.handle_read(kg, key) {
        Ok(r) => {
            let mut vals: Vec<String> = r
                .values
                .iter()
                .map(|(b, _)| String::from_utf8_lossy(b).into_owned())
                .collect();
            vals.sort();
            Ok(Some(vals))
        }
        Err(NodeError::NotFound { .. }) | Err(NodeError::NotReplica(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

impl Runner {
    fn configure(&mut self, kg: &KeygroupName, change: ConfigChange) -> anyhow::Result<()> {
        self.client.manage_keygroup(kg, change)?;
        Ok(())
    }

    fn at(&mut self, node: &NodeId) -> anyhow::Result<()> {
        self.client.switch_node(node.clone())?;
        Ok(())
    }

    /// Reads first so the write supersedes whatever is there.
    fn write(&mut self, node: &NodeId, kg: &KeygroupName, key: &str, value: Bytes) -> anyhow::Result<()> {
        self.at(node)?;
        match self.client.read(kg, key) {
            Ok(_) | Err(ClientError::NotFound) => {}
            Err(e) => bail!("read before write: {e}"),
        }
        self.client.update(kg, key, value)?;
        Ok(())
    }

    fn delete(&mut self, node: &NodeId, kg: &KeygroupName, key: &str) -> anyhow::Result<()> {
        self.at(node)?;
        self.client.read(kg, key)?;
        self.client.delete(kg, key)?;
        Ok(())
    }

    fn step(&mut self, step: &Step) -> anyhow::Result<()> {
        match step {
            Step::CreateKeygroup {
                name,
                mode,
                replicas,
                triggers,
            } => {
                let mut cfg = KeygroupConfig::new(name.clone(), *mode, replicas.clone());
                cfg.triggers = triggers.clone();
                self.client.create_keygroup(cfg)?;
            }
            Step::AddReplica { kg, node, ttl } => self.configure(
                kg,
                ConfigChange::AddReplica {
                    replica: ReplicaConfig {
                        node: node.clone(),
                        ttl: *ttl,
                    },
                },
            )?,
            Step::RemoveReplica { kg, node } => {
                self.configure(kg, ConfigChange::RemoveReplica { node: node.clone() })?
            }
            Step::SetTtl { kg, node, ttl } => self.configure(
                kg,
                ConfigChange::SetTtl {
                    node: node.clone(),
                    ttl: *ttl,
                },
            )?,
            Step::AddTrigger {
                kg,
                id,
                endpoint,
                node,
            } => self.configure(
                kg,
                ConfigChange::AddTrigger {
                    trigger: TriggerConfig {
                        id: id.clone(),
                        endpoint: endpoint.clone(),
                        node: node.clone(),
                    },
                },
            )?,
            Step::RemoveTrigger { kg, id } => {
                self.configure(kg, ConfigChange::RemoveTrigger { id: id.clone() })?
            }
            Step::Write {
                node,
                kg,
                key,
                value,
            } => self.write(node, kg, key, Bytes::from(value.clone()))?,
            Step::Delete { node, kg, key } => self.delete(node, kg, key)?,
            Step::Append {
                node,
                kg,
                value,
                expect_key,
            } => {
                self.at(node)?;
                let (key, _) = self.client.append(kg, value.clone())?;
                if let Some(want) = expect_key {
                    ensure!(&key == want, "append produced key {key}, expected {want}");
                }
            }
            Step::ExpectRead {
                node,
                kg,
                key,
                values,
            } => {
                let got = local_values(&self.cluster.borrow(), node, kg, key)?;
                let mut want = values.clone();
                want.sort();
                ensure!(
                    got.as_ref() == Some(&want),
                    "{node} {kg}/{key}: expected {want:?}, found {got:?}"
                );
            }
            Step::ExpectAbsent { node, kg, key } => {
                let got = local_values(&self.cluster.borrow(), node, kg, key)?;
                ensure!(got.is_none(), "{node} {kg}/{key}: expected absent, found {got:?}");
            }
            Step::ExpectNoLocalData { node, kg } => {
                let c = self.cluster.borrow();
                let n = c.node(node).ok_or_else(|| anyhow!("unknown node {node}"))?;
                let held = n
                    .store()
                    .entries(kg, std::ops::Bound::Unbounded, usize::MAX, true)
                    .map(|e| e.len())
                    .unwrap_or(0);
                ensure!(held == 0, "{node} still holds {held} entries of {kg}");
            }
            Step::RunQuiescent { budget_ms } => {
                self.cluster.borrow_mut().run_until_quiescent(*budget_ms)?;
            }
            Step::Advance { ms } => self.cluster.borrow_mut().advance(*ms),
            Step::ExpectConverged { kg } => {
                let c = self.cluster.borrow();
                ensure!(c.converged(kg), "replicas of {kg} differ");
            }
            Step::ExpectTriggerEvents {
                endpoint,
                kg,
                kind,
                count,
            } => {
                let c = self.cluster.borrow();
                let n = c
                    .sink_events(endpoint)
                    .iter()
                    .filter(|e| kg.as_ref().is_none_or(|k| &e.kg == k))
                    .filter(|e| kind.is_none_or(|k| e.kind == k))
                    .count();
                ensure!(n == *count, "{endpoint}: {n} matching events, expected {count}");
            }
            Step::Aggregate {
                endpoint,
                node,
                from_kg,
                to_kg,
                how,
                key,
                delete_processed,
            } => {
                let start = self.cursors.get(endpoint).copied().unwrap_or(0);
                let events: Vec<_> = {
                    let c = self.cluster.borrow();
                    let all = c.sink_events(endpoint);
                    self.cursors.insert(endpoint.clone(), all.len());
                    all[start.min(all.len())..]
                        .iter()
                        .filter(|e| &e.kg == from_kg && e.kind == TriggerKind::Update)
                        .cloned()
                        .collect()
                };
                match how {
                    AggregateHow::Sum => {
                        let mut sum = 0.0;
                        for e in &events {
                            let text = e.val.as_ref().map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default();
                            sum += text
                                .trim()
                                .parse::<f64>()
                                .with_context(|| format!("non-numeric item {}", e.key))?;
                        }
                        let key = key.clone().ok_or_else(|| anyhow!("sum aggregate needs a key"))?;
                        let record = serde_json::json!({ "count": events.len(), "sum": sum });
                        self.write(node, to_kg, &key, Bytes::from(record.to_string()))?;
                    }
                    AggregateHow::Copy => {
                        for e in &events {
                            let val = e.val.clone().unwrap_or_default();
                            self.write(node, to_kg, &e.key, val)?;
                        }
                    }
                }
                if *delete_processed {
                    for e in &events {
                        self.delete(node, from_kg, &e.key)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failing_assertion_names_the_step() {
        let script: Script = serde_json::from_str(
            r#"{"nodes":["A"],"steps":[
                {"op":"create_keygroup","name":"kg","replicas":[{"node":"A"}]},
                {"op":"write","node":"A","kg":"kg","key":"k","value":"v"},
                {"op":"expect_read","node":"A","kg":"kg","key":"k","values":["other"]}
            ]}"#,
        )
        .unwrap();
        let err = run_scenario(&script, None).unwrap_err();
        assert!(format!("{err:#}").starts_with("step 2 (expect_read) failed"), "{err:#}");
    }

    #[test]
    fn unknown_op_is_a_parse_error() {
        assert!(serde_json::from_str::<Script>(r#"{"nodes":["A"],"steps":[{"op":"explode"}]}"#).is_err());
    }
}
