//! Client library: session guarantees on top of any replica.
//!
//! [`Session`] holds the per-client cache of observed versions and turns
//! operations into wire requests and responses back into results, without
//! doing any I/O itself. [`Client`] pairs a session with a [`Connection`] for
//! callers that want blocking calls.
//!
//! In guarded mode a read is accepted only if, for every version in the
//! cache for that key, the replica returns an equal or newer version; an
//! update carries the cached versions as its supersede set so the replica
//! can refuse writes that would overwrite data the client never saw.

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use thiserror::Error;

use crate::model::{KeygroupConfig, KeygroupName, NodeId, VersionVector};
use crate::wire::{ConfigChange, ErrorCode, Request, Response, WireEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GuaranteeMode {
    /// Reads are checked against the session cache and updates carry it.
    Guarded,
    /// Talk to replicas directly: reads are not checked and writes carry no
    /// version information.
    Direct,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("replica is behind this session")]
    Outdated,
    #[error("key not found")]
    NotFound,
    #[error("node is not a replica of the keygroup")]
    NotReplica,
    #[error("replica is still joining")]
    NotReady,
    #[error("operation not allowed in this keygroup mode")]
    ModeViolation,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("configuration changed concurrently")]
    Conflict,
    #[error("transport: {0}")]
    Transport(String),
    #[error("{code:?}: {detail}")]
    Remote { code: ErrorCode, detail: String },
}

impl ClientError {
    fn from_response(resp: &Response) -> Self {
        match resp.code().unwrap_or(ErrorCode::BadRequest) {
            ErrorCode::Outdated => ClientError::Outdated,
            ErrorCode::NotFound => ClientError::NotFound,
            ErrorCode::NotReplica => ClientError::NotReplica,
            ErrorCode::NotReady => ClientError::NotReady,
            ErrorCode::ModeViolation => ClientError::ModeViolation,
            ErrorCode::Conflict => ClientError::Conflict,
            code => ClientError::Remote {
                code,
                detail: resp.detail.clone().unwrap_or_default(),
            },
        }
    }
}

fn check(resp: Response) -> Result<Response, ClientError> {
    if resp.ok {
        Ok(resp)
    } else {
        Err(ClientError::from_response(&resp))
    }
}

/// Versions a session has observed, per key.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SessionCache {
    entries: BTreeMap<(KeygroupName, String), Vec<VersionVector>>,
}

impl SessionCache {
    pub fn get(&self, kg: &KeygroupName, key: &str) -> &[VersionVector] {
        self.entries
            .get(&(kg.clone(), key.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn set(&mut self, kg: &KeygroupName, key: &str, mut versions: Vec<VersionVector>) {
        versions.sort_by_cached_key(|v| v.canonical_string());
        versions.dedup();
        self.entries.insert((kg.clone(), key.to_string()), versions);
    }

    /// Adds `version`, keeping only maximal elements.
    pub fn merge(&mut self, kg: &KeygroupName, key: &str, version: VersionVector) {
        let mut current = self.get(kg, key).to_vec();
        if current.iter().any(|c| version.dominated_by(c)) {
            return;
        }
        current.retain(|c| !c.dominated_by(&version));
        current.push(version);
        self.set(kg, key, current);
    }

    pub fn forget(&mut self, kg: &KeygroupName) {
        self.entries.retain(|(k, _), _| k != kg);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Every cached version is matched or exceeded by some returned one.
fn covers(returned: &[VersionVector], cached: &[VersionVector]) -> bool {
    cached
        .iter()
        .all(|c| returned.iter().any(|r| c.dominated_by(r)))
}

/// Client state machine. Build a request, send it to [`Session::node`], and
/// hand the response to the matching `complete_*` method.
#[derive(Clone, Debug)]
pub struct Session {
    mode: GuaranteeMode,
    node: NodeId,
    known_nodes: Option<BTreeSet<NodeId>>,
    cache: SessionCache,
}

impl Session {
    pub fn new(node: NodeId, mode: GuaranteeMode) -> Self {
        Session {
            mode,
            node,
            known_nodes: None,
            cache: SessionCache::default(),
        }
    }

    pub fn mode(&self) -> GuaranteeMode {
        self.mode
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn cache(&self) -> &SessionCache {
        &self.cache
    }

    /// Restricts [`Session::switch_node`] to these nodes.
    pub fn set_known_nodes(&mut self, nodes: impl IntoIterator<Item = NodeId>) {
        self.known_nodes = Some(nodes.into_iter().collect());
    }

    /// Moves the session to another node; the cache travels with it.
    pub fn switch_node(&mut self, node: NodeId) -> Result<(), ClientError> {
        if let Some(known) = &self.known_nodes {
            if !known.contains(&node) {
                return Err(ClientError::UnknownNode(node));
            }
        }
        self.node = node;
        Ok(())
    }

    /// Records a version learned out of band, e.g. from a trigger.
    pub fn notify(&mut self, kg: &KeygroupName, key: &str, version: VersionVector) {
        self.cache.merge(kg, key, version);
    }

    pub fn read_request(&self, kg: &KeygroupName, key: &str) -> Request {
        Request::Read {
            kg: kg.clone(),
            key: key.to_string(),
        }
    }

    /// Returns the sibling values, or `Outdated` if the replica has not yet
    /// seen everything this session has.
    pub fn complete_read(
        &mut self,
        kg: &KeygroupName,
        key: &str,
        resp: Response,
    ) -> Result<Vec<(Bytes, VersionVector)>, ClientError> {
        let guarded = self.mode == GuaranteeMode::Guarded;
        if !resp.ok {
            if resp.code() != Some(ErrorCode::NotFound) || !guarded {
                return Err(ClientError::from_response(&resp));
            }
            let tombstones = resp.tombstones.unwrap_or_default();
            if !covers(&tombstones, self.cache.get(kg, key)) {
                return Err(ClientError::Outdated);
            }
            if !tombstones.is_empty() {
                self.cache.set(kg, key, tombstones);
            }
            return Err(ClientError::NotFound);
        }
        let values: Vec<(Bytes, VersionVector)> = resp
            .values
            .unwrap_or_default()
            .into_iter()
            .filter_map(|v| v.val.map(|b| (b, v.version)))
            .collect();
        if guarded {
            let mut returned: Vec<VersionVector> = values.iter().map(|(_, v)| v.clone()).collect();
            returned.extend(resp.tombstones.unwrap_or_default());
            if !covers(&returned, self.cache.get(kg, key)) {
                return Err(ClientError::Outdated);
            }
            self.cache.set(kg, key, returned);
        }
        Ok(values)
    }

    fn supersede(&self, kg: &KeygroupName, key: &str) -> Option<Vec<VersionVector>> {
        match self.mode {
            GuaranteeMode::Guarded => Some(self.cache.get(kg, key).to_vec()),
            GuaranteeMode::Direct => None,
        }
    }

    pub fn update_request(&self, kg: &KeygroupName, key: &str, val: Bytes) -> Request {
        Request::Update {
            kg: kg.clone(),
            key: key.to_string(),
            val,
            supersede: self.supersede(kg, key),
        }
    }

    pub fn delete_request(&self, kg: &KeygroupName, key: &str) -> Request {
        Request::Delete {
            kg: kg.clone(),
            key: key.to_string(),
            supersede: self.supersede(kg, key),
        }
    }

    /// Completes an update or delete, returning the assigned version.
    pub fn complete_write(
        &mut self,
        kg: &KeygroupName,
        key: &str,
        resp: Response,
    ) -> Result<VersionVector, ClientError> {
        let resp = check(resp)?;
        let version = resp
            .version
            .ok_or_else(|| ClientError::Transport("write response without version".into()))?;
        if self.mode == GuaranteeMode::Guarded {
            self.cache.set(kg, key, vec![version.clone()]);
        }
        Ok(version)
    }

    pub fn append_request(&self, kg: &KeygroupName, val: Bytes) -> Request {
        Request::Append { kg: kg.clone(), val }
    }

    pub fn complete_append(
        &mut self,
        kg: &KeygroupName,
        resp: Response,
    ) -> Result<(String, VersionVector), ClientError> {
        let resp = check(resp)?;
        match (resp.key, resp.version) {
            (Some(key), Some(version)) => {
                if self.mode == GuaranteeMode::Guarded {
                    self.cache.set(kg, &key, vec![version.clone()]);
                }
                Ok((key, version))
            }
            _ => Err(ClientError::Transport("append response without key".into())),
        }
    }

    pub fn scan_request(&self, kg: &KeygroupName, start: &str, count: usize) -> Request {
        Request::Scan {
            kg: kg.clone(),
            start: start.to_string(),
            count,
        }
    }

    pub fn complete_scan(&mut self, resp: Response) -> Result<Vec<WireEntry>, ClientError> {
        Ok(check(resp)?.entries.unwrap_or_default())
    }
}

/// Request/response channel to nodes and to the naming service.
pub trait Connection {
    fn call(&mut self, node: &NodeId, req: Request) -> Result<Response, ClientError>;
    fn call_naming(&mut self, req: Request) -> Result<Response, ClientError>;
}

/// Attempts made by [`Client::manage_keygroup`] before giving up on
/// concurrent config changes.
pub const MANAGE_ATTEMPTS: usize = 5;

/// Blocking client over a [`Connection`].
pub struct Client<C: Connection> {
    session: Session,
    conn: C,
}

impl<C: Connection> Client<C> {
    pub fn new(conn: C, node: NodeId, mode: GuaranteeMode) -> Self {
        Client {
            session: Session::new(node, mode),
            conn,
        }
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn session_mut(&mut self) -> &mut Session {
        &mut self.session
    }

    pub fn connection(&mut self) -> &mut C {
        &mut self.conn
    }

    fn send(&mut self, req: Request) -> Result<Response, ClientError> {
        let node = self.session.node().clone();
        self.conn.call(&node, req)
    }

    pub fn read(
        &mut self,
        kg: &KeygroupName,
        key: &str,
    ) -> Result<Vec<(Bytes, VersionVector)>, ClientError> {
        let resp = self.send(self.session.read_request(kg, key))?;
        self.session.complete_read(kg, key, resp)
    }

    pub fn update(
        &mut self,
        kg: &KeygroupName,
        key: &str,
        val: impl Into<Bytes>,
    ) -> Result<VersionVector, ClientError> {
        let resp = self.send(self.session.update_request(kg, key, val.into()))?;
        self.session.complete_write(kg, key, resp)
    }

    pub fn delete(&mut self, kg: &KeygroupName, key: &str) -> Result<VersionVector, ClientError> {
        let resp = self.send(self.session.delete_request(kg, key))?;
        self.session.complete_write(kg, key, resp)
    }

    pub fn append(
        &mut self,
        kg: &KeygroupName,
        val: impl Into<Bytes>,
    ) -> Result<(String, VersionVector), ClientError> {
        let resp = self.send(self.session.append_request(kg, val.into()))?;
        self.session.complete_append(kg, resp)
    }

    pub fn scan(
        &mut self,
        kg: &KeygroupName,
        start: &str,
        count: usize,
    ) -> Result<Vec<WireEntry>, ClientError> {
        let resp = self.send(self.session.scan_request(kg, start, count))?;
        self.session.complete_scan(resp)
    }

    pub fn switch_node(&mut self, node: NodeId) -> Result<(), ClientError> {
        self.session.switch_node(node)
    }

    pub fn notify(&mut self, kg: &KeygroupName, key: &str, version: VersionVector) {
        self.session.notify(kg, key, version)
    }

    pub fn create_keygroup(&mut self, config: KeygroupConfig) -> Result<u64, ClientError> {
        let resp = check(self.conn.call_naming(Request::CreateKeygroup { config })?)?;
        Ok(resp.config_version.unwrap_or(1))
    }

    pub fn get_config(&mut self, name: &KeygroupName) -> Result<KeygroupConfig, ClientError> {
        let resp = check(self.conn.call_naming(Request::GetConfig { name: name.clone() })?)?;
        resp.config
            .ok_or_else(|| ClientError::Transport("config response without config".into()))
    }

    /// Applies `change` with compare-and-set on the config version, retrying
    /// when another change lands first.
    pub fn manage_keygroup(
        &mut self,
        name: &KeygroupName,
        change: ConfigChange,
    ) -> Result<u64, ClientError> {
        let mut expected = self.get_config(name)?.version;
        for _ in 0..MANAGE_ATTEMPTS {
            let resp = self.conn.call_naming(Request::UpdateKeygroup {
                name: name.clone(),
                expected_version: expected,
                change: change.clone(),
            })?;
            if resp.ok {
                return Ok(resp.config_version.unwrap_or(expected + 1));
            }
            match (resp.code(), resp.config_version) {
                (Some(ErrorCode::Conflict), Some(current)) if current != expected => {
                    expected = current
                }
                _ => return Err(ClientError::from_response(&resp)),
            }
        }
        Err(ClientError::Conflict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vv;
    use crate::wire::WireValue;

    fn kg() -> KeygroupName {
        KeygroupName::new("kg").unwrap()
    }

    fn read_resp(versions: &[VersionVector]) -> Response {
        Response {
            values: Some(
                versions
                    .iter()
                    .map(|v| WireValue {
                        val: Some(Bytes::from_static(b"x")),
                        version: v.clone(),
                        write_time: None,
                    })
                    .collect(),
            ),
            ..Response::ok()
        }
    }

    fn session(mode: GuaranteeMode) -> Session {
        Session::new(NodeId::new("A").unwrap(), mode)
    }

    #[test]
    fn guarded_read_rejects_stale_replica() {
        let mut s = session(GuaranteeMode::Guarded);
        s.cache.set(&kg(), "k", vec![vv(&[("A", 2)])]);
        assert_eq!(
            s.complete_read(&kg(), "k", read_resp(&[vv(&[("A", 1)])])),
            Err(ClientError::Outdated)
        );
        assert_eq!(s.cache().get(&kg(), "k"), &[vv(&[("A", 2)])]);
        let got = s
            .complete_read(&kg(), "k", read_resp(&[vv(&[("A", 2), ("B", 1)]), vv(&[("C", 1)])]))
            .unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(s.cache().get(&kg(), "k").len(), 2);
    }

    #[test]
    fn direct_read_never_checks() {
        let mut s = session(GuaranteeMode::Direct);
        s.cache.set(&kg(), "k", vec![vv(&[("A", 2)])]);
        assert!(s.complete_read(&kg(), "k", read_resp(&[vv(&[("A", 1)])])).is_ok());
    }

    #[test]
    fn update_carries_cache_only_when_guarded() {
        let mut g = session(GuaranteeMode::Guarded);
        g.cache.set(&kg(), "k", vec![vv(&[("A", 3), ("B", 1)])]);
        match g.update_request(&kg(), "k", Bytes::new()) {
            Request::Update { supersede, .. } => assert_eq!(supersede, Some(vec![vv(&[("A", 3), ("B", 1)])])),
            other => panic!("{other:?}"),
        }
        let mut d = session(GuaranteeMode::Direct);
        d.cache.set(&kg(), "k", vec![vv(&[("A", 3)])]);
        match d.update_request(&kg(), "k", Bytes::new()) {
            Request::Update { supersede, .. } => assert_eq!(supersede, None),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_replaces_cache_entry() {
        let mut s = session(GuaranteeMode::Guarded);
        s.cache.set(&kg(), "k", vec![vv(&[("A", 1)]), vv(&[("B", 1)])]);
        let v = s
            .complete_write(&kg(), "k", Response::ok().with_version(vv(&[("A", 2), ("B", 1)])))
            .unwrap();
        assert_eq!(s.cache().get(&kg(), "k"), &[v]);
    }

    #[test]
    fn not_found_distinguishes_deleted_from_stale() {
        let mut s = session(GuaranteeMode::Guarded);
        assert_eq!(
            s.complete_read(&kg(), "k", Response::error(ErrorCode::NotFound, "")),
            Err(ClientError::NotFound)
        );
        s.cache.set(&kg(), "k", vec![vv(&[("A", 1)])]);
        assert_eq!(
            s.complete_read(&kg(), "k", Response::error(ErrorCode::NotFound, "")),
            Err(ClientError::Outdated)
        );
        let mut deleted = Response::error(ErrorCode::NotFound, "");
        deleted.tombstones = Some(vec![vv(&[("A", 2)])]);
        assert_eq!(s.complete_read(&kg(), "k", deleted), Err(ClientError::NotFound));
        assert_eq!(s.cache().get(&kg(), "k"), &[vv(&[("A", 2)])]);
    }

    #[test]
    fn notify_keeps_maximal_versions() {
        let mut s = session(GuaranteeMode::Guarded);
        s.notify(&kg(), "k", vv(&[("A", 1)]));
        s.notify(&kg(), "k", vv(&[("B", 1)]));
        s.notify(&kg(), "k", vv(&[("A", 2)]));
        s.notify(&kg(), "k", vv(&[("A", 1)]));
        assert_eq!(s.cache().get(&kg(), "k"), &[vv(&[("A", 2)]), vv(&[("B", 1)])]);
    }

    #[test]
    fn switch_node_validates_target() {
        let mut s = session(GuaranteeMode::Guarded);
        s.set_known_nodes([NodeId::new("A").unwrap(), NodeId::new("B").unwrap()]);
        s.switch_node(NodeId::new("B").unwrap()).unwrap();
        assert_eq!(s.node().as_str(), "B");
        assert_eq!(
            s.switch_node(NodeId::new("Z").unwrap()),
            Err(ClientError::UnknownNode(NodeId::new("Z").unwrap()))
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cache_merge_keeps_maximal(points in prop::collection::vec((0u64..3, 0u64..3), 0..10)) {
                let vs: Vec<VersionVector> = points.iter().map(|&(a, b)| vv(&[("A", a), ("B", b)])).collect();
                let mut cache = SessionCache::default();
                for v in &vs {
                    cache.merge(&kg(), "k", v.clone());
                }
                let got = cache.get(&kg(), "k");
                let mut want: Vec<VersionVector> = vs
                    .iter()
                    .filter(|v| !vs.iter().any(|w| v.compare(w) == crate::version::CausalOrder::Less))
                    .cloned()
                    .collect();
                want.sort_by_cached_key(|v| v.canonical_string());
                want.dedup();
                prop_assert_eq!(got, &want[..]);
            }
        }
    }
}
