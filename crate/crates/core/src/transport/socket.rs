//! TCP transport: length-prefixed JSON frames.
//!
//! Every process serves one role: the naming registry, a replica node or a
//! trigger sink. Connections carry a sequence of request/response pairs.
//! Nodes learn configuration changes by polling the registry's change feed.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};

use crate::client::{ClientError, Connection};
use crate::model::NodeId;
use crate::naming::Naming;
use crate::node::{Node, Outgoing};
use crate::wire::{read_message, write_frame, Request, Response, TriggerEvent};

const POLL: Duration = Duration::from_millis(20);
const IO_TIMEOUT: Duration = Duration::from_secs(5);

pub fn wall_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One framed request/response exchange over a fresh or cached stream.
struct Link {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Link {
    fn connect(addr: &str) -> io::Result<Self> {
        let sock = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {addr}")))?;
        let stream = TcpStream::connect_timeout(&sock, IO_TIMEOUT)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        Ok(Link {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    fn exchange<Q: serde::Serialize>(&mut self, req: &Q) -> io::Result<Response> {
        write_frame(&mut self.writer, req)?;
        self.writer.flush()?;
        read_message(&mut self.reader)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"))
    }
}

/// Keeps one connection per address and reconnects once on failure.
#[derive(Default)]
struct LinkPool {
    links: HashMap<String, Link>,
}

impl LinkPool {
    fn call<Q: serde::Serialize>(&mut self, addr: &str, req: &Q) -> io::Result<Response> {
        if let Some(link) = self.links.get_mut(addr) {
            match link.exchange(req) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    debug!("stale connection to {addr}: {e}");
                    self.links.remove(addr);
                }
            }
        }
        let mut link = Link::connect(addr)?;
        let r = link.exchange(req)?;
        self.links.insert(addr.to_string(), link);
        Ok(r)
    }
}

/// Accept loop that hands each connection to `serve` on its own thread.
fn spawn_acceptor<F>(listener: TcpListener, stop: Arc<AtomicBool>, serve: F) -> io::Result<JoinHandle<()>>
where
    F: Fn(TcpStream) + Send + Sync + 'static,
{
    listener.set_nonblocking(true)?;
    let serve = Arc::new(serve);
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let serve = serve.clone();
                    let _ = stream.set_nonblocking(false);
                    thread::spawn(move || serve(stream));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => {
                    warn!("accept failed: {e}");
                    thread::sleep(POLL);
                }
            }
        }
    }))
}

/// Reads requests off `stream` until it closes, answering each with `handle`.
fn serve_frames<Q, F>(stream: TcpStream, mut handle: F)
where
    Q: for<'de> serde::Deserialize<'de>,
    F: FnMut(Q) -> Response,
{
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    loop {
        let resp = match read_message::<_, serde_json::Value>(&mut reader) {
            Ok(Some(raw)) => match serde_json::from_value::<Q>(raw) {
                Ok(req) => handle(req),
                Err(e) => Response::error(crate::wire::ErrorCode::BadRequest, e.to_string()),
            },
            Ok(None) => return,
            Err(e) => {
                debug!("connection dropped: {e}");
                return;
            }
        };
        if write_frame(&mut writer, &resp).and_then(|_| writer.flush()).is_err() {
            return;
        }
    }
}

/// Handle to a running server; stops its threads when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server's background threads exit.
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

pub struct NamingServer;

impl NamingServer {
    pub fn start(naming: Arc<Naming>, listen: &str) -> io::Result<ServerHandle> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let t = spawn_acceptor(listener, stop.clone(), move |stream| {
            let naming = naming.clone();
            serve_frames(stream, |req: Request| naming.handle_request(req));
        })?;
        info!("naming listening on {addr}");
        Ok(ServerHandle {
            addr,
            stop,
            threads: vec![t],
        })
    }
}

/// Records posted trigger events.
pub struct TriggerSinkServer {
    pub events: Arc<Mutex<Vec<TriggerEvent>>>,
    pub handle: ServerHandle,
}

impl TriggerSinkServer {
    pub fn start(listen: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let events = Arc::new(Mutex::new(Vec::new()));
        let log = events.clone();
        let t = spawn_acceptor(listener, stop.clone(), move |stream| {
            let log = log.clone();
            serve_frames(stream, |ev: TriggerEvent| {
                info!("trigger {:?} {}/{}", ev.kind, ev.kg, ev.key);
                log.lock().expect("sink log poisoned").push(ev);
                Response::ok()
            });
        })?;
        Ok(TriggerSinkServer {
            events,
            handle: ServerHandle {
                addr,
                stop,
                threads: vec![t],
            },
        })
    }
}

enum Job {
    Peer { id: u64, request: Request },
    Trigger { id: u64, event: TriggerEvent },
}

struct NodeShared {
    node: Mutex<Node>,
    naming_addr: String,
    workers: Mutex<HashMap<String, Sender<Job>>>,
    stop: Arc<AtomicBool>,
}

impl NodeShared {
    /// Routes the node's queued messages to per-target workers.
    fn dispatch(self: &Arc<Self>, outs: Vec<Outgoing>) {
        for out in outs {
            let (target, job) = match out {
                Outgoing::Peer { to, id, request } => (format!("node:{to}"), Job::Peer { id, request }),
                Outgoing::Trigger { endpoint, id, event } => {
                    (format!("sink:{endpoint}"), Job::Trigger { id, event })
                }
            };
            let mut workers = self.workers.lock().expect("workers poisoned");
            let tx = workers.entry(target.clone()).or_insert_with(|| {
                let (tx, rx) = channel();
                let shared = self.clone();
                thread::spawn(move || shared.worker(target, rx));
                tx
            });
            let _ = tx.send(job);
        }
    }

    fn with_node<T>(self: &Arc<Self>, f: impl FnOnce(&mut Node, u64) -> T) -> T {
        let (out, outs) = {
            let mut node = self.node.lock().expect("node poisoned");
            let out = f(&mut node, wall_ms());
            (out, node.take_outgoing())
        };
        self.dispatch(outs);
        out
    }

    fn resolve(&self, pool: &mut LinkPool, node: &str) -> Option<String> {
        let resp = pool.call(&self.naming_addr, &Request::ListNodes).ok()?;
        resp.nodes?
            .into_iter()
            .find(|(id, _)| id.as_str() == node)
            .map(|(_, addr)| addr)
    }

    fn worker(self: Arc<Self>, target: String, rx: Receiver<Job>) {
        let mut pool = LinkPool::default();
        let mut addr: Option<String> = None;
        while let Ok(job) = rx.recv() {
            if self.stop.load(Ordering::Relaxed) {
                return;
            }
            match job {
                Job::Peer { id, request } => {
                    let peer = target.trim_start_matches("node:");
                    if addr.is_none() {
                        addr = self.resolve(&mut pool, peer);
                    }
                    let resp = match &addr {
                        Some(a) => pool.call(a, &request).ok(),
                        None => None,
                    };
                    if resp.is_none() {
                        addr = None;
                    }
                    self.with_node(|n, now| n.handle_response(id, resp, now));
                }
                Job::Trigger { id, event } => {
                    let endpoint = target.trim_start_matches("sink:");
                    let resp = pool.call(endpoint, &event).ok();
                    self.with_node(|n, now| n.handle_response(id, resp, now));
                }
            }
        }
    }

    /// Polls the naming change feed and drives node timers.
    fn pump(self: Arc<Self>) {
        let mut pool = LinkPool::default();
        let mut cursor = 0;
        while !self.stop.load(Ordering::Relaxed) {
            match pool.call(&self.naming_addr, &Request::Changes { since: cursor }) {
                Ok(resp) if resp.ok => {
                    for cfg in resp.configs.unwrap_or_default() {
                        self.with_node(|n, now| {
                            if let Err(e) = n.handle_config_change(cfg, now) {
                                warn!("{}: config change failed: {e}", n.id());
                            }
                        });
                    }
                    cursor = resp.ack.unwrap_or(cursor);
                }
                Ok(resp) => warn!("naming refused change feed: {:?}", resp.err),
                Err(e) => debug!("naming unreachable: {e}"),
            }
            self.with_node(|n, now| n.tick(now));
            thread::sleep(POLL);
        }
    }
}

pub struct NodeServer;

impl NodeServer {
    /// Registers `node` with the naming service under its listen address
    /// and starts serving.
    pub fn start(node: Node, listen: &str, naming_addr: &str) -> anyhow::Result<ServerHandle> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let id: NodeId = node.id().clone();
        let mut pool = LinkPool::default();
        let resp = pool.call(
            naming_addr,
            &Request::RegisterNode {
                id: id.clone(),
                addr: addr.to_string(),
            },
        )?;
        anyhow::ensure!(resp.ok, "registering {id}: {:?} {:?}", resp.err, resp.detail);
        let stop = Arc::new(AtomicBool::new(false));
        let shared = Arc::new(NodeShared {
            node: Mutex::new(node),
            naming_addr: naming_addr.to_string(),
            workers: Mutex::new(HashMap::new()),
            stop: stop.clone(),
        });
        let serving = shared.clone();
        let acceptor = spawn_acceptor(listener, stop.clone(), move |stream| {
            let shared = serving.clone();
            serve_frames(stream, |req: Request| shared.with_node(|n, now| n.handle_request(req, now)));
        })?;
        let pumping = shared.clone();
        let pump = thread::spawn(move || pumping.pump());
        info!("node {id} listening on {addr}");
        Ok(ServerHandle {
            addr,
            stop,
            threads: vec![acceptor, pump],
        })
    }
}

/// Client-side [`Connection`] over TCP. Node addresses come from naming.
pub struct TcpConnection {
    naming_addr: String,
    pool: LinkPool,
    addrs: HashMap<NodeId, String>,
}

impl TcpConnection {
    pub fn new(naming_addr: impl Into<String>) -> Self {
        TcpConnection {
            naming_addr: naming_addr.into(),
            pool: LinkPool::default(),
            addrs: HashMap::new(),
        }
    }

    fn addr_of(&mut self, node: &NodeId) -> Result<String, ClientError> {
        if let Some(a) = self.addrs.get(node) {
            return Ok(a.clone());
        }
        let resp = self.call_naming(Request::ListNodes)?;
        for (id, addr) in resp.nodes.unwrap_or_default() {
            self.addrs.insert(id, addr);
        }
        self.addrs
            .get(node)
            .cloned()
            .ok_or_else(|| ClientError::UnknownNode(node.clone()))
    }
}

impl Connection for TcpConnection {
    fn call(&mut self, node: &NodeId, req: Request) -> Result<Response, ClientError> {
        let addr = self.addr_of(node)?;
        self.pool.call(&addr, &req).map_err(|e| {
            self.addrs.remove(node);
            ClientError::Transport(e.to_string())
        })
    }

    fn call_naming(&mut self, req: Request) -> Result<Response, ClientError> {
        let addr = self.naming_addr.clone();
        self.pool
            .call(&addr, &req)
            .map_err(|e| ClientError::Transport(e.to_string()))
    }
}
