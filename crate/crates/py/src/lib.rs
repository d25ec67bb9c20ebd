//! Python bindings: version vectors, the simulator and the forum harness.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fogrep::client::{Client, ClientError, GuaranteeMode};
use fogrep::harness::{run_forum as forum, run_scenario as scenario, ForumConfig, Script};
use fogrep::model::{KeygroupConfig, KeygroupMode, KeygroupName, NodeId, ReplicaConfig};
use fogrep::transport::sim::{Cluster, SimConnection, SimNetConfig};
use fogrep::version::CausalOrder;

create_exception!(pyfogrep, FogrepError, PyException);
create_exception!(pyfogrep, OutdatedError, FogrepError);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn client_err(e: ClientError) -> PyErr {
    match e {
        ClientError::Outdated => OutdatedError::new_err("outdated"),
        other => FogrepError::new_err(other.to_string()),
    }
}

fn node_id(s: &str) -> PyResult<NodeId> {
    NodeId::new(s).map_err(value_err)
}

fn kg_name(s: &str) -> PyResult<KeygroupName> {
    KeygroupName::new(s).map_err(value_err)
}

#[pyclass(name = "VersionVector", eq, frozen, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyVersionVector(fogrep::VersionVector);

#[pymethods]
impl PyVersionVector {
    #[new]
    #[pyo3(signature = (entries = None))]
    fn new(entries: Option<BTreeMap<String, u64>>) -> PyResult<Self> {
        let mut v = fogrep::VersionVector::new();
        for (n, c) in entries.unwrap_or_default() {
            v.set(node_id(&n)?, c);
        }
        Ok(PyVersionVector(v))
    }

    /// One of "equal", "less", "greater", "concurrent".
    fn compare(&self, other: &PyVersionVector) -> &'static str {
        match self.0.compare(&other.0) {
            CausalOrder::Equal => "equal",
            CausalOrder::Less => "less",
            CausalOrder::Greater => "greater",
            CausalOrder::Concurrent => "concurrent",
        }
    }

    fn join(&self, other: &PyVersionVector) -> Self {
        PyVersionVector(self.0.join(&other.0))
    }

    fn advance(&self, node: &str) -> PyResult<Self> {
        Ok(PyVersionVector(self.0.advance(&node_id(node)?)))
    }

    fn dominated_by(&self, other: &PyVersionVector) -> bool {
        self.0.dominated_by(&other.0)
    }

    fn to_dict(&self) -> BTreeMap<String, u64> {
        self.0.iter().map(|(n, c)| (n.to_string(), c)).collect()
    }

    fn __str__(&self) -> String {
        self.0.canonical_string()
    }

    fn __repr__(&self) -> String {
        format!("VersionVector({})", self.0.canonical_string())
    }
}

/// In-process simulated deployment with a virtual clock.
#[pyclass(unsendable)]
struct SimCluster {
    inner: Rc<RefCell<Cluster>>,
    next_client: u64,
}

#[pymethods]
impl SimCluster {
    #[new]
    #[pyo3(signature = (nodes, rtt_ms = 50, seed = 0))]
    fn new(nodes: Vec<String>, rtt_ms: u64, seed: u64) -> PyResult<Self> {
        let mut cluster = Cluster::new(SimNetConfig {
            default_rtt_ms: rtt_ms,
            seed,
            ..SimNetConfig::default()
        });
        for n in nodes {
            cluster.add_node(node_id(&n)?).map_err(value_err)?;
        }
        Ok(SimCluster {
            inner: Rc::new(RefCell::new(cluster)),
            next_client: 1,
        })
    }

    /// Creates a mutable keygroup replicated on `replicas`.
    fn create_keygroup(&self, name: &str, replicas: Vec<String>) -> PyResult<u64> {
        let replicas = replicas
            .iter()
            .map(|n| node_id(n).map(ReplicaConfig::full))
            .collect::<PyResult<Vec<_>>>()?;
        let cfg = KeygroupConfig::new(kg_name(name)?, KeygroupMode::Mutable, replicas);
        self.inner.borrow_mut().create_keygroup(cfg).map_err(value_err)
    }

    #[pyo3(signature = (node, library = true))]
    fn client(&mut self, node: &str, library: bool) -> PyResult<SimClient> {
        let id = self.next_client;
        self.next_client += 1;
        let mode = if library { GuaranteeMode::Guarded } else { GuaranteeMode::Direct };
        let conn = SimConnection::new(self.inner.clone(), id);
        Ok(SimClient(Client::new(conn, node_id(node)?, mode)))
    }

    #[pyo3(signature = (budget_ms = 600_000))]
    fn run_until_quiescent(&self, budget_ms: u64) -> PyResult<u64> {
        self.inner
            .borrow_mut()
            .run_until_quiescent(budget_ms)
            .map_err(|e| FogrepError::new_err(e.to_string()))
    }

    fn advance(&self, ms: u64) {
        self.inner.borrow_mut().advance(ms);
    }

    fn now(&self) -> u64 {
        self.inner.borrow().now()
    }

    fn converged(&self, keygroup: &str) -> PyResult<bool> {
        Ok(self.inner.borrow().converged(&kg_name(keygroup)?))
    }

    /// Payloads stored at `node` for `key`, sorted; empty if absent.
    fn local_values(&self, node: &str, keygroup: &str, key: &str) -> PyResult<Vec<Vec<u8>>> {
        let c = self.inner.borrow();
        let n = c
            .node(&node_id(node)?)
            .ok_or_else(|| value_err(format!("unknown node {node}")))?;
        let mut vals: Vec<Vec<u8>> = match n.handle_read(&kg_name(keygroup)?, key) {
            Ok(r) => r.values.into_iter().map(|(b, _)| b.to_vec()).collect(),
            Err(_) => Vec::new(),
        };
        vals.sort();
        Ok(vals)
    }
}

#[pyclass(unsendable)]
struct SimClient(Client<SimConnection>);

#[pymethods]
impl SimClient {
    /// Returns (payload, version) pairs.
    fn read(&mut self, keygroup: &str, key: &str) -> PyResult<Vec<(Vec<u8>, PyVersionVector)>> {
        let vals = self.0.read(&kg_name(keygroup)?, key).map_err(client_err)?;
        Ok(vals
            .into_iter()
            .map(|(b, v)| (b.to_vec(), PyVersionVector(v)))
            .collect())
    }

    fn update(&mut self, keygroup: &str, key: &str, value: Vec<u8>) -> PyResult<PyVersionVector> {
        self.0
            .update(&kg_name(keygroup)?, key, value)
            .map(PyVersionVector)
            .map_err(client_err)
    }

    fn delete(&mut self, keygroup: &str, key: &str) -> PyResult<PyVersionVector> {
        self.0
            .delete(&kg_name(keygroup)?, key)
            .map(PyVersionVector)
            .map_err(client_err)
    }

    fn switch_node(&mut self, node: &str) -> PyResult<()> {
        self.0.switch_node(node_id(node)?).map_err(client_err)
    }
}

/// Runs the forum workload and returns its metrics as a dict.
#[pyfunction]
#[pyo3(signature = (clients, ops, library = true, seed = 1, rtt_ms = 50))]
fn run_forum<'py>(
    py: Python<'py>,
    clients: usize,
    ops: usize,
    library: bool,
    seed: u64,
    rtt_ms: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ForumConfig {
        clients,
        ops,
        mode: if library { GuaranteeMode::Guarded } else { GuaranteeMode::Direct },
        seed,
        net: SimNetConfig {
            default_rtt_ms: rtt_ms,
            ..SimNetConfig::default()
        },
        ..ForumConfig::default()
    };
    let r = py
        .detach(|| forum(&cfg))
        .map_err(|e| FogrepError::new_err(format!("{e:#}")))?;
    let d = PyDict::new(py);
    d.set_item("clients", r.clients)?;
    d.set_item("mode", r.mode)?;
    d.set_item("mrc_violation_rate", r.mrc_violation_rate)?;
    d.set_item("rywc_violation_rate", r.rywc_violation_rate)?;
    d.set_item("read_attempts_mean", r.read_attempts_mean)?;
    d.set_item("update_attempts_mean", r.update_attempts_mean)?;
    d.set_item("merge_ops", r.merge_ops)?;
    d.set_item("reads_ok", r.reads_ok)?;
    d.set_item("update_rejections", r.update_rejections)?;
    d.set_item("read_rejections", r.read_rejections)?;
    d.set_item("lost_posts", r.lost_posts)?;
    d.set_item("converged", r.converged)?;
    d.set_item("csv_row", r.csv_row())?;
    Ok(d)
}

/// Runs a scenario script; returns its log lines or raises on the failing step.
#[pyfunction]
#[pyo3(signature = (path, seed = None))]
fn run_scenario(path: &str, seed: Option<u64>) -> PyResult<Vec<String>> {
    let script = Script::load(path).map_err(|e| value_err(format!("{e:#}")))?;
    scenario(&script, seed)
        .map(|log| log.lines)
        .map_err(|e| FogrepError::new_err(format!("{e:#}")))
}

#[pymodule]
fn pyfogrep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FogrepError", m.py().get_type::<FogrepError>())?;
    m.add("OutdatedError", m.py().get_type::<OutdatedError>())?;
    m.add_class::<PyVersionVector>()?;
    m.add_class::<SimCluster>()?;
    m.add_class::<SimClient>()?;
    m.add_function(wrap_pyfunction!(run_forum, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
