use std::collections::BTreeMap;
use std::ops::Bound;
use std::sync::{Arc, Mutex, RwLock};

use super::{KeygroupData, Result, RetainFn, StorageAdapter, StorageError, StoredEntry};
use crate::model::{KeygroupMode, KeygroupName, NodeId, VersionedValue};
use crate::version::{Disposition, SiblingSet};

/// Volatile backend for nodes without usable disk.
#[derive(Default)]
pub struct MemoryStore {
    keygroups: RwLock<BTreeMap<KeygroupName, Arc<Mutex<KeygroupData>>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn kg(&self, kg: &KeygroupName) -> Result<Arc<Mutex<KeygroupData>>> {
        self.keygroups
            .read()
            .expect("keygroup map poisoned")
            .get(kg)
            .cloned()
            .ok_or_else(|| StorageError::UnknownKeygroup(kg.clone()))
    }

    fn with<T>(&self, kg: &KeygroupName, f: impl FnOnce(&mut KeygroupData) -> T) -> Result<T> {
        let data = self.kg(kg)?;
        let mut guard = data.lock().expect("keygroup poisoned");
        Ok(f(&mut guard))
    }
}

impl StorageAdapter for MemoryStore {
    fn create_keygroup(&self, kg: &KeygroupName, mode: KeygroupMode) -> Result<()> {
        let mut map = self.keygroups.write().expect("keygroup map poisoned");
        if let Some(existing) = map.get(kg) {
            let existing = existing.lock().expect("keygroup poisoned").mode;
            if existing != mode {
                return Err(StorageError::ModeMismatch { kg: kg.clone(), existing });
            }
            return Ok(());
        }
        map.insert(kg.clone(), Arc::new(Mutex::new(KeygroupData::new(mode))));
        Ok(())
    }

    fn drop_keygroup(&self, kg: &KeygroupName) -> Result<()> {
        self.keygroups
            .write()
            .expect("keygroup map poisoned")
            .remove(kg);
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
        self.with(kg, |d| d.mode)
    }

    fn put(&self, kg: &KeygroupName, key: &str, incoming: VersionedValue) -> Result<Disposition> {
        self.with(kg, |d| d.put(key, incoming))
    }

    fn get_raw(&self, kg: &KeygroupName, key: &str) -> Result<Option<SiblingSet>> {
        self.with(kg, |d| d.entries.get(key).cloned())
    }

    fn entries(
        &self,
        kg: &KeygroupName,
        start: Bound<&str>,
        count: usize,
        include_tombstone_only: bool,
    ) -> Result<Vec<StoredEntry>> {
        self.with(kg, |d| d.entries(kg, start, count, include_tombstone_only))
    }

    fn next_append_key(&self, kg: &KeygroupName, node: &NodeId) -> Result<String> {
        self.with(kg, |d| {
            if d.mode != KeygroupMode::AppendOnly {
                return Err(StorageError::NotAppendOnly(kg.clone()));
            }
            Ok(format!("{}-{}", node, d.take_append_seq(node)))
        })?
    }

    fn bump_clock(&self, kg: &KeygroupName, node: &NodeId, floor: u64) -> Result<u64> {
        self.with(kg, |d| d.bump_clock(node, floor))
    }

    fn retain(&self, kg: &KeygroupName, keep: &mut RetainFn<'_>) -> Result<usize> {
        self.with(kg, |d| d.retain(keep).len())
    }
}
