use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread::sleep;
use std::time::{Duration, Instant};

use fogrep::client::{Client, ClientError, GuaranteeMode};
use fogrep::model::{KeygroupConfig, KeygroupMode, KeygroupName, NodeId, ReplicaConfig, TriggerConfig};
use fogrep::naming::Naming;
use fogrep::node::Node;
use fogrep::storage::MemoryStore;
use fogrep::transport::{NamingServer, NodeServer, TcpConnection, TriggerSinkServer};
use fogrep::wire::{ConfigChange, TriggerKind};

const DEADLINE: Duration = Duration::from_secs(15);

fn id(s: &str) -> NodeId {
    NodeId::new(s).unwrap()
}

fn eventually<T>(what: &str, mut f: impl FnMut() -> Option<T>) -> T {
    let start = Instant::now();
    loop {
        if let Some(v) = f() {
            return v;
        }
        assert!(start.elapsed() < DEADLINE, "timed out waiting for {what}");
        sleep(Duration::from_millis(25));
    }
}

fn client(naming: &str, node: &str) -> Client<TcpConnection> {
    Client::new(TcpConnection::new(naming), id(node), GuaranteeMode::Guarded)
}

fn read_value(c: &mut Client<TcpConnection>, kg: &KeygroupName, key: &str) -> Result<Vec<Vec<u8>>, ClientError> {
    c.read(kg, key).map(|vs| vs.into_iter().map(|(b, _)| b.to_vec()).collect())
}

#[test]
fn nodes_replicate_and_fire_triggers_over_tcp() {
    let naming = NamingServer::start(Arc::new(Naming::new()), "127.0.0.1:0").unwrap();
    let naming_addr = naming.addr().to_string();
    let sink = TriggerSinkServer::start("127.0.0.1:0").unwrap();
    let mut servers = Vec::new();
    for n in ["a", "b", "c", "d"] {
        let node = Node::new(id(n), Box::new(MemoryStore::new()));
        servers.push(NodeServer::start(node, "127.0.0.1:0", &naming_addr).unwrap());
    }

    let kg = KeygroupName::new("smoke").unwrap();
    let mut cfg = KeygroupConfig::new(
        kg.clone(),
        KeygroupMode::Mutable,
        ["a", "b", "c"].iter().map(|n| ReplicaConfig::full(id(n))).collect(),
    );
    cfg.triggers.push(TriggerConfig {
        id: "t1".into(),
        endpoint: sink.handle.addr().to_string(),
        node: id("b"),
    });
    let mut writer = client(&naming_addr, "a");
    writer.create_keygroup(cfg).unwrap();

    eventually("keygroup at a", || match read_value(&mut writer, &kg, "k") {
        Err(ClientError::NotFound) => Some(()),
        _ => None,
    });
    writer.update(&kg, "k", b"hello".to_vec()).unwrap();

    let mut reader = client(&naming_addr, "c");
    eventually("replica at c", || match read_value(&mut reader, &kg, "k") {
        Ok(vs) if vs == vec![b"hello".to_vec()] => Some(()),
        _ => None,
    });

    let ev = eventually("trigger event", || sink.events.lock().unwrap().first().cloned());
    assert_eq!(ev.kind, TriggerKind::Update);
    assert_eq!(ev.key, "k");
    assert_eq!(ev.val.as_deref(), Some(&b"hello"[..]));

    // A replica added later pulls existing data before serving.
    writer
        .manage_keygroup(&kg, ConfigChange::AddReplica { replica: ReplicaConfig::full(id("d")) })
        .unwrap();
    let mut late = client(&naming_addr, "d");
    eventually("pulled value at d", || match read_value(&mut late, &kg, "k") {
        Ok(vs) if vs == vec![b"hello".to_vec()] => Some(()),
        _ => None,
    });

    reader.delete(&kg, "k").unwrap();
    eventually("delete at a", || match read_value(&mut writer, &kg, "k") {
        Err(ClientError::NotFound) => Some(()),
        _ => None,
    });
    eventually("delete trigger", || {
        sink.events
            .lock()
            .unwrap()
            .iter()
            .any(|e| e.kind == TriggerKind::Delete)
            .then_some(())
    });
}

struct Proc(Child);

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts the binary and returns it with the address it reports.
fn spawn(args: &[&str], env: &[(&str, &str)]) -> (Proc, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fogrep"));
    cmd.args(args).stdout(Stdio::piped()).stderr(Stdio::null());
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().expect("spawn fogrep");
    let out = child.stdout.take().unwrap();
    let mut line = String::new();
    BufReader::new(out).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();
    (Proc(child), addr)
}

#[test]
fn cli_processes_serve_a_keygroup() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("naming.log");
    let (_naming, naming_addr) = spawn(
        &["naming", "--listen", "127.0.0.1:0", "--log", log.to_str().unwrap()],
        &[],
    );
    let disk = format!("disk:{}", dir.path().join("n2").display());
    let (_n1, _) = spawn(
        &["node", "--listen", "127.0.0.1:0"],
        &[("FOGREP_NODE_ID", "n1"), ("FOGREP_NAMING_ADDR", &naming_addr)],
    );
    let (_n2, _) = spawn(
        &["node", "--listen", "127.0.0.1:0", "--storage", &disk],
        &[("FOGREP_NODE_ID", "n2"), ("FOGREP_NAMING_ADDR", &naming_addr)],
    );

    let kg = KeygroupName::new("procs").unwrap();
    let cfg = KeygroupConfig::new(
        kg.clone(),
        KeygroupMode::Mutable,
        vec![ReplicaConfig::full(id("n1")), ReplicaConfig::full(id("n2"))],
    );
    let mut c1 = client(&naming_addr, "n1");
    eventually("node registration", || c1.create_keygroup(cfg.clone()).ok());
    eventually("keygroup at n1", || match read_value(&mut c1, &kg, "x") {
        Err(ClientError::NotFound) => Some(()),
        _ => None,
    });
    c1.update(&kg, "x", b"42".to_vec()).unwrap();

    let mut c2 = client(&naming_addr, "n2");
    eventually("value at n2", || match read_value(&mut c2, &kg, "x") {
        Ok(vs) if vs == vec![b"42".to_vec()] => Some(()),
        _ => None,
    });
}
