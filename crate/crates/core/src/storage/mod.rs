//! Node-local persistence behind one adapter contract.
//!
//! Two backends ship: [`MemoryStore`] for constrained nodes and [`DiskStore`],
//! an append-only record log per keygroup that is replayed on open.

pub mod disk;
pub mod memory;

use std::collections::BTreeMap;
use std::ops::Bound;

use serde::Serialize;
use thiserror::Error;

use crate::model::{KeygroupMode, KeygroupName, NodeId, VersionedValue};
use crate::version::{Disposition, SiblingSet};
use crate::wire::WireValue;

pub use disk::DiskStore;
pub use memory::MemoryStore;

/// Grace period after which a key holding only a tombstone is removed.
pub const DEFAULT_TOMBSTONE_GRACE_MS: u64 = 24 * 60 * 60 * 1000;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("unknown keygroup {0}")]
    UnknownKeygroup(KeygroupName),
    #[error("key {key:?} not found in keygroup {kg}")]
    NotFound { kg: KeygroupName, key: String },
    #[error("keygroup {0} is not append-only")]
    NotAppendOnly(KeygroupName),
    #[error("keygroup {kg} already exists with mode {existing:?}")]
    ModeMismatch {
        kg: KeygroupName,
        existing: KeygroupMode,
    },
    #[error("corrupt record log {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StorageError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredEntry {
    pub keygroup: KeygroupName,
    pub key: String,
    pub siblings: SiblingSet,
}

/// Per-sibling decision used by [`StorageAdapter::retain`]: receives the key,
/// the key's full sibling set and the sibling under consideration.
pub type RetainFn<'a> = dyn FnMut(&str, &SiblingSet, &VersionedValue) -> bool + 'a;

/// Storage contract shared by all backends.
///
/// Every method is safe under concurrent callers; read-modify-write of one
/// key's siblings happens under that keygroup's lock.
pub trait StorageAdapter: Send + Sync {
    /// Creates the keygroup if missing. Idempotent for the same mode.
    fn create_keygroup(&self, kg: &KeygroupName, mode: KeygroupMode) -> Result<()>;

    /// Removes the keygroup and all its local data.
    fn drop_keygroup(&self, kg: &KeygroupName) -> Result<()>;

    fn keygroups(&self) -> Vec<KeygroupName>;

    fn mode(&self, kg: &KeygroupName) -> Result<KeygroupMode>;

    /// Absorbs `incoming` into the key's siblings.
    fn put(&self, kg: &KeygroupName, key: &str, incoming: VersionedValue) -> Result<Disposition>;

    /// Siblings including tombstones; `None` if the key was never stored or
    /// has been physically removed.
    fn get_raw(&self, kg: &KeygroupName, key: &str) -> Result<Option<SiblingSet>>;

    /// Up to `count` entries in ascending key order starting at `start`.
    fn entries(
        &self,
        kg: &KeygroupName,
        start: Bound<&str>,
        count: usize,
        include_tombstone_only: bool,
    ) -> Result<Vec<StoredEntry>>;

    /// Returns `<node>-<seq>` with a per-(keygroup, node) sequence starting
    /// at 0 that is never reused.
    fn next_append_key(&self, kg: &KeygroupName, node: &NodeId) -> Result<String>;

    /// Advances this keygroup's counter for `node` to `max(floor, current) + 1`
    /// and returns it.
    fn bump_clock(&self, kg: &KeygroupName, node: &NodeId, floor: u64) -> Result<u64>;

    /// Physically removes siblings for which `keep` returns false. Keys left
    /// without siblings disappear. Returns the number of removed siblings.
    fn retain(&self, kg: &KeygroupName, keep: &mut RetainFn<'_>) -> Result<usize>;

    /// Current siblings for external callers: tombstone-only keys are
    /// reported as not found.
    fn get(&self, kg: &KeygroupName, key: &str) -> Result<SiblingSet> {
        match self.get_raw(kg, key)? {
            Some(set) if !set.is_tombstone_only() => Ok(set),
            _ => Err(StorageError::NotFound {
                kg: kg.clone(),
                key: key.to_string(),
            }),
        }
    }

    /// At most `count` live entries from `start_key` onwards.
    fn scan(&self, kg: &KeygroupName, start_key: &str, count: usize) -> Result<Vec<StoredEntry>> {
        self.entries(kg, Bound::Included(start_key), count, false)
    }

    /// Drops every sibling with `write_time + ttl < now` at this replica only.
    fn sweep_expired(&self, kg: &KeygroupName, ttl_secs: Option<u64>, now_ms: u64) -> Result<usize> {
        let Some(ttl) = ttl_secs else {
            self.mode(kg)?;
            return Ok(0);
        };
        let ttl_ms = ttl.saturating_mul(1000);
        self.retain(kg, &mut |_, _, v| v.write_time.saturating_add(ttl_ms) >= now_ms)
    }

    /// Removes keys whose only sibling is a tombstone older than `grace_ms`.
    fn collect_tombstones(&self, kg: &KeygroupName, grace_ms: u64, now_ms: u64) -> Result<usize> {
        self.retain(kg, &mut |_, set, v| {
            !(set.len() == 1 && v.is_tombstone() && v.write_time.saturating_add(grace_ms) < now_ms)
        })
    }

    /// Every stored entry (including tombstones) in keygroup, key order.
    fn dump(&self) -> Vec<StoredEntry> {
        let mut out = Vec::new();
        for kg in self.keygroups() {
            if let Ok(entries) = self.entries(&kg, Bound::Unbounded, usize::MAX, true) {
                out.extend(entries);
            }
        }
        out
    }

    /// One JSON object per line, deterministic for equal contents.
    fn dump_json_lines(&self) -> String {
        dump_lines(&self.dump())
    }
}

#[derive(Serialize)]
struct DumpLine<'a> {
    kg: &'a KeygroupName,
    key: &'a str,
    siblings: Vec<WireValue>,
}

pub fn dump_lines(entries: &[StoredEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let line = DumpLine {
            kg: &e.keygroup,
            key: &e.key,
            siblings: e.siblings.iter().map(WireValue::from_stored).collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("dump line serializes"));
        out.push('\n');
    }
    out
}

/// In-memory state of one keygroup, shared by both backends.
#[derive(Clone, Debug)]
pub(crate) struct KeygroupData {
    pub mode: KeygroupMode,
    pub entries: BTreeMap<String, SiblingSet>,
    pub append_seq: BTreeMap<NodeId, u64>,
    pub clocks: BTreeMap<NodeId, u64>,
}

impl KeygroupData {
    pub fn new(mode: KeygroupMode) -> Self {
        KeygroupData {
            mode,
            entries: BTreeMap::new(),
            append_seq: BTreeMap::new(),
            clocks: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, key: &str, incoming: VersionedValue) -> Disposition {
        self.entries.entry(key.to_string()).or_default().absorb(incoming)
    }

    pub fn entries(
        &self,
        kg: &KeygroupName,
        start: Bound<&str>,
        count: usize,
        include_tombstone_only: bool,
    ) -> Vec<StoredEntry> {
        self.entries
            .range::<str, _>((start, Bound::Unbounded))
            .filter(|(_, s)| include_tombstone_only || !s.is_tombstone_only())
            .take(count)
            .map(|(k, s)| StoredEntry {
                keygroup: kg.clone(),
                key: k.clone(),
                siblings: s.clone(),
            })
            .collect()
    }

    /// Reserves the next append sequence number for `node`.
    pub fn take_append_seq(&mut self, node: &NodeId) -> u64 {
        let seq = self.append_seq.entry(node.clone()).or_insert(0);
        let out = *seq;
        *seq += 1;
        out
    }

    pub fn bump_clock(&mut self, node: &NodeId, floor: u64) -> u64 {
        let c = self.clocks.entry(node.clone()).or_insert(0);
        *c = (*c).max(floor) + 1;
        *c
    }

    /// Applies `keep` and returns the removed (key, value) pairs.
    pub fn retain(&mut self, keep: &mut RetainFn<'_>) -> Vec<(String, VersionedValue)> {
        let mut removed = Vec::new();
        for (key, set) in self.entries.iter_mut() {
            let snapshot = set.clone();
            set.retain(|v| {
                let k = keep(key, &snapshot, v);
                if !k {
                    removed.push((key.clone(), v.clone()));
                }
                k
            });
        }
        self.entries.retain(|_, s| !s.is_empty());
        removed
    }
}

#[cfg(test)]
mod tests;
