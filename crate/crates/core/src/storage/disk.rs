//! Record-log backend.
//!
//! Layout: `<root>/<keygroup>/log`. Each record is a little-endian `u32`
//! length followed by a tagged body. Strings are `u32` length + UTF-8 bytes.
//! Versions are stored in canonical text form. A torn trailing record is
//! truncated on open. The log is rewritten to the live siblings once it grows
//! well past them.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::ops::Bound;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use bytes::Bytes;

use super::{KeygroupData, Result, RetainFn, StorageAdapter, StorageError, StoredEntry};
use crate::model::{KeygroupMode, KeygroupName, NodeId, Payload, VersionVector, VersionedValue};
use crate::version::{Disposition, SiblingSet};

const LOG_FILE: &str = "log";
const TAG_MODE: u8 = 1;
const TAG_PUT: u8 = 2;
const TAG_REMOVE: u8 = 3;
const TAG_APPEND_SEQ: u8 = 4;
const TAG_CLOCK: u8 = 5;
const MAX_RECORD: u32 = 256 << 20;

#[derive(Debug, Clone, PartialEq)]
enum Record {
    Mode(KeygroupMode),
    Put { key: String, value: VersionedValue },
    Remove { key: String, version: VersionVector },
    AppendSeq { node: NodeId, next: u64 },
    Clock { node: NodeId, value: u64 },
}

fn put_str(buf: &mut Vec<u8>, s: &[u8]) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s);
}

impl Record {
    fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        match self {
            Record::Mode(mode) => {
                body.push(TAG_MODE);
                body.push(match mode {
                    KeygroupMode::Mutable => 0,
                    KeygroupMode::AppendOnly => 1,
                });
            }
            Record::Put { key, value } => {
                body.push(TAG_PUT);
                put_str(&mut body, key.as_bytes());
                put_str(&mut body, &value.version.canonical_encode());
                match &value.payload {
                    Payload::Tombstone => body.push(0),
                    Payload::Value(b) => {
                        body.push(1);
                        put_str(&mut body, b);
                    }
                }
                body.extend_from_slice(&value.write_time.to_le_bytes());
            }
            Record::Remove { key, version } => {
                body.push(TAG_REMOVE);
                put_str(&mut body, key.as_bytes());
                put_str(&mut body, &version.canonical_encode());
            }
            Record::AppendSeq { node, next } => {
                body.push(TAG_APPEND_SEQ);
                put_str(&mut body, node.as_str().as_bytes());
                body.extend_from_slice(&next.to_le_bytes());
            }
            Record::Clock { node, value } => {
                body.push(TAG_CLOCK);
                put_str(&mut body, node.as_str().as_bytes());
                body.extend_from_slice(&value.to_le_bytes());
            }
        }
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        frame
    }

    fn decode(body: &[u8]) -> std::result::Result<Record, String> {
        let mut cur = Cursor { buf: body, pos: 0 };
        let rec = match cur.u8()? {
            TAG_MODE => Record::Mode(match cur.u8()? {
                0 => KeygroupMode::Mutable,
                1 => KeygroupMode::AppendOnly,
                m => return Err(format!("unknown mode {m}")),
            }),
            TAG_PUT => {
                let key = cur.string()?;
                let version = cur.version()?;
                let payload = match cur.u8()? {
                    0 => Payload::Tombstone,
                    1 => Payload::Value(Bytes::copy_from_slice(cur.bytes()?)),
                    p => return Err(format!("unknown payload tag {p}")),
                };
                let write_time = cur.u64()?;
                Record::Put {
                    key,
                    value: VersionedValue {
                        payload,
                        version,
                        write_time,
                    },
                }
            }
            TAG_REMOVE => Record::Remove {
                key: cur.string()?,
                version: cur.version()?,
            },
            TAG_APPEND_SEQ => Record::AppendSeq {
                node: cur.node()?,
                next: cur.u64()?,
            },
            TAG_CLOCK => Record::Clock {
                node: cur.node()?,
                value: cur.u64()?,
            },
            t => return Err(format!("unknown record tag {t}")),
        };
        if cur.pos != body.len() {
            return Err("trailing bytes in record".into());
        }
        Ok(rec)
    }

    fn apply(self, data: &mut KeygroupData) {
        match self {
            Record::Mode(m) => data.mode = m,
            Record::Put { key, value } => {
                data.put(&key, value);
            }
            Record::Remove { key, version } => {
                if let Some(set) = data.entries.get_mut(&key) {
                    set.retain(|v| v.version != version);
                    if set.is_empty() {
                        data.entries.remove(&key);
                    }
                }
            }
            Record::AppendSeq { node, next } => {
                data.append_seq.insert(node, next);
            }
            Record::Clock { node, value } => {
                data.clocks.insert(node, value);
            }
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| "record truncated".to_string())?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> std::result::Result<String, String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|e| e.to_string())
    }
    fn node(&mut self) -> std::result::Result<NodeId, String> {
        NodeId::new(self.string()?).map_err(|e| e.to_string())
    }
    fn version(&mut self) -> std::result::Result<VersionVector, String> {
        VersionVector::canonical_decode(self.bytes()?).map_err(|e| e.to_string())
    }
}

struct LogKeygroup {
    data: KeygroupData,
    file: File,
    dir: PathBuf,
    records: usize,
}

impl LogKeygroup {
    fn create(dir: PathBuf, mode: KeygroupMode) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        let mut file = OpenOptions::new()
            .create(true)
            .truncate(true)
            .write(true)
            .open(dir.join(LOG_FILE))?;
        file.write_all(&Record::Mode(mode).encode())?;
        file.sync_all()?;
        sync_dir(&dir)?;
        Ok(LogKeygroup {
            data: KeygroupData::new(mode),
            file,
            dir,
            records: 1,
        })
    }

    fn open(dir: PathBuf) -> Result<Self> {
        let path = dir.join(LOG_FILE);
        let mut raw = Vec::new();
        File::open(&path)?.read_to_end(&mut raw)?;
        let corrupt = |reason: String| StorageError::Corrupt {
            path: path.display().to_string(),
            reason,
        };
        let mut data: Option<KeygroupData> = None;
        let mut pos = 0usize;
        let mut records = 0usize;
        while raw.len() - pos >= 4 {
            let len = u32::from_le_bytes(raw[pos..pos + 4].try_into().unwrap());
            if len > MAX_RECORD {
                return Err(corrupt(format!("record length {len} at offset {pos}")));
            }
            let end = pos + 4 + len as usize;
            if end > raw.len() {
                break;
            }
            let rec = Record::decode(&raw[pos + 4..end]).map_err(corrupt)?;
            match (&mut data, rec) {
                (None, Record::Mode(m)) => data = Some(KeygroupData::new(m)),
                (None, _) => return Err(corrupt("log does not start with a mode record".into())),
                (Some(d), rec) => rec.apply(d),
            }
            records += 1;
            pos = end;
        }
        let data = data.ok_or_else(|| corrupt("empty log".into()))?;
        let file = OpenOptions::new().write(true).open(&path)?;
        if pos < raw.len() {
            // torn tail from an interrupted append
            file.set_len(pos as u64)?;
            file.sync_all()?;
        }
        let mut file = file;
        use std::io::Seek;
        file.seek(io::SeekFrom::End(0))?;
        Ok(LogKeygroup {
            data,
            file,
            dir,
            records,
        })
    }

    fn append(&mut self, recs: &[Record]) -> Result<()> {
        let mut buf = Vec::new();
        for r in recs {
            buf.extend_from_slice(&r.encode());
        }
        self.file.write_all(&buf)?;
        self.file.sync_data()?;
        self.records += recs.len();
        Ok(())
    }

    fn live_records(&self) -> usize {
        1 + self.data.append_seq.len()
            + self.data.clocks.len()
            + self.data.entries.values().map(SiblingSet::len).sum::<usize>()
    }

    fn maybe_compact(&mut self) -> Result<()> {
        if self.records > 2 * self.live_records() + 128 {
            self.compact()?;
        }
        Ok(())
    }

    fn compact(&mut self) -> Result<()> {
        let mut buf = Record::Mode(self.data.mode).encode();
        for (node, next) in &self.data.append_seq {
            buf.extend(Record::AppendSeq { node: node.clone(), next: *next }.encode());
        }
        for (node, value) in &self.data.clocks {
            buf.extend(Record::Clock { node: node.clone(), value: *value }.encode());
        }
        for (key, set) in &self.data.entries {
            for v in set {
                buf.extend(Record::Put { key: key.clone(), value: v.clone() }.encode());
            }
        }
        let tmp = self.dir.join("log.compact");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(LOG_FILE))?;
        sync_dir(&self.dir)?;
        let mut file = OpenOptions::new().write(true).open(self.dir.join(LOG_FILE))?;
        use std::io::Seek;
        file.seek(io::SeekFrom::End(0))?;
        self.file = file;
        self.records = self.live_records();
        Ok(())
    }
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

/// Durable backend: every mutation is fsynced before the call returns.
pub struct DiskStore {
    root: PathBuf,
    keygroups: RwLock<BTreeMap<KeygroupName, Arc<Mutex<LogKeygroup>>>>,
}

impl DiskStore {
    /// Opens (or creates) a store rooted at `root`, replaying every keygroup
    /// log found there.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut map = BTreeMap::new();
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let Ok(name) = KeygroupName::new(entry.file_name().to_string_lossy().to_string()) else {
                continue;
            };
            if !entry.path().join(LOG_FILE).exists() {
                continue;
            }
            let kg = LogKeygroup::open(entry.path())?;
            map.insert(name, Arc::new(Mutex::new(kg)));
        }
        Ok(DiskStore {
            root,
            keygroups: RwLock::new(map),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Rewrites every keygroup log to its live contents.
    pub fn compact(&self) -> Result<()> {
        for kg in self.keygroups.read().expect("keygroup map poisoned").values() {
            kg.lock().expect("keygroup poisoned").compact()?;
        }
        Ok(())
    }

    fn with<T>(&self, kg: &KeygroupName, f: impl FnOnce(&mut LogKeygroup) -> Result<T>) -> Result<T> {
        let data = self
            .keygroups
            .read()
            .expect("keygroup map poisoned")
            .get(kg)
            .cloned()
            .ok_or_else(|| StorageError::UnknownKeygroup(kg.clone()))?;
        let mut guard = data.lock().expect("keygroup poisoned");
        f(&mut guard)
    }
}

impl StorageAdapter for DiskStore {
    fn create_keygroup(&self, kg: &KeygroupName, mode: KeygroupMode) -> Result<()> {
        let mut map = self.keygroups.write().expect("keygroup map poisoned");
        if let Some(existing) = map.get(kg) {
            let existing = existing.lock().expect("keygroup poisoned").data.mode;
            if existing != mode {
                return Err(StorageError::ModeMismatch { kg: kg.clone(), existing });
            }
            return Ok(());
        }
        let log = LogKeygroup::create(self.root.join(kg.as_str()), mode)?;
        map.insert(kg.clone(), Arc::new(Mutex::new(log)));
        Ok(())
    }

    fn drop_keygroup(&self, kg: &KeygroupName) -> Result<()> {
        let mut map = self.keygroups.write().expect("keygroup map poisoned");
        if map.remove(kg).is_some() {
            fs::remove_dir_all(self.root.join(kg.as_str()))?;
            sync_dir(&self.root)?;
        }
        Ok(())
    }

    fn keygroups(&self) -> Vec<KeygroupName> {
        self.keygroups
            .read()
            .expect("keygroup map poisoned")
            .keys()
            .cloned()
            .collect()
    }

    fn mode(&self, kg: &KeygroupName) -> Result<KeygroupMode> {
        self.with(kg, |l| Ok(l.data.mode))
    }

    fn put(&self, kg: &KeygroupName, key: &str, incoming: VersionedValue) -> Result<Disposition> {
        self.with(kg, |l| {
            let mut set = l.data.entries.get(key).cloned().unwrap_or_default();
            if set.absorb(incoming.clone()) == Disposition::Obsolete {
                return Ok(Disposition::Obsolete);
            }
            l.append(&[Record::Put {
                key: key.to_string(),
                value: incoming,
            }])?;
            l.data.entries.insert(key.to_string(), set);
            l.maybe_compact()?;
            Ok(Disposition::Applied)
        })
    }

    fn get_raw(&self, kg: &KeygroupName, key: &str) -> Result<Option<SiblingSet>> {
        self.with(kg, |l| Ok(l.data.entries.get(key).cloned()))
    }

    fn entries(
        &self,
        kg: &KeygroupName,
        start: Bound<&str>,
        count: usize,
        include_tombstone_only: bool,
    ) -> Result<Vec<StoredEntry>> {
        self.with(kg, |l| Ok(l.data.entries(kg, start, count, include_tombstone_only)))
    }

    fn next_append_key(&self, kg: &KeygroupName, node: &NodeId) -> Result<String> {
        self.with(kg, |l| {
            if l.data.mode != KeygroupMode::AppendOnly {
                return Err(StorageError::NotAppendOnly(kg.clone()));
            }
            let seq = l.data.append_seq.get(node).copied().unwrap_or(0);
            l.append(&[Record::AppendSeq {
                node: node.clone(),
                next: seq + 1,
            }])?;
            l.data.take_append_seq(node);
            l.maybe_compact()?;
            Ok(format!("{node}-{seq}"))
        })
    }

    fn bump_clock(&self, kg: &KeygroupName, node: &NodeId, floor: u64) -> Result<u64> {
        self.with(kg, |l| {
            let value = l.data.clocks.get(node).copied().unwrap_or(0).max(floor) + 1;
            l.append(&[Record::Clock {
                node: node.clone(),
                value,
            }])?;
            l.data.clocks.insert(node.clone(), value);
            l.maybe_compact()?;
            Ok(value)
        })
    }

    fn retain(&self, kg: &KeygroupName, keep: &mut RetainFn<'_>) -> Result<usize> {
        self.with(kg, |l| {
            let mut next = l.data.clone();
            let removed = next.retain(keep);
            if removed.is_empty() {
                return Ok(0);
            }
            let recs: Vec<Record> = removed
                .iter()
                .map(|(key, v)| Record::Remove {
                    key: key.clone(),
                    version: v.version.clone(),
                })
                .collect();
            l.append(&recs)?;
            l.data = next;
            l.maybe_compact()?;
            Ok(removed.len())
        })
    }
}
