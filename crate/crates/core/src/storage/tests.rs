use std::collections::BTreeSet;

use super::*;
use crate::model::vv;

fn kg() -> KeygroupName {
    KeygroupName::new("kg").unwrap()
}

fn node(s: &str) -> NodeId {
    NodeId::new(s).unwrap()
}

/// Runs `f` once against each backend.
fn each_backend(f: impl Fn(&dyn StorageAdapter)) {
    f(&MemoryStore::new());
    let dir = tempfile::tempdir().unwrap();
    f(&DiskStore::open(dir.path()).unwrap());
}

#[test]
fn concurrent_put_keeps_both() {
    each_backend(|s| {
        s.create_keygroup(&kg(), KeygroupMode::Mutable).unwrap();
        let blue = VersionedValue::value("blue", vv(&[("A", 3)]), 0);
        let red = VersionedValue::value("red", vv(&[("B", 1)]), 0);
        assert_eq!(s.put(&kg(), "item", blue).unwrap(), Disposition::Applied);
        assert_eq!(s.put(&kg(), "item", red.clone()).unwrap(), Disposition::Applied);
        assert_eq!(s.put(&kg(), "item", red).unwrap(), Disposition::Obsolete);
        let got: Vec<_> = s.get(&kg(), "item").unwrap().versions().cloned().collect();
        assert_eq!(got, vec![vv(&[("A", 3)]), vv(&[("B", 1)])]);
    });
}

#[test]
fn unknown_keygroup_and_missing_key() {
    each_backend(|s| {
        assert!(matches!(
            s.get(&kg(), "x"),
            Err(StorageError::UnknownKeygroup(_))
        ));
        s.create_keygroup(&kg(), KeygroupMode::Mutable).unwrap();
        assert!(matches!(s.get(&kg(), "never"), Err(StorageError::NotFound { .. })));
    });
}

#[test]
fn tombstone_only_keys_are_hidden_until_collected() {
    each_backend(|s| {
        s.create_keygroup(&kg(), KeygroupMode::Mutable).unwrap();
        s.put(&kg(), "k", VersionedValue::value("v", vv(&[("A", 1)]), 0)).unwrap();
        s.put(&kg(), "k", VersionedValue::tombstone(vv(&[("A", 2)]), 10)).unwrap();
        assert!(matches!(s.get(&kg(), "k"), Err(StorageError::NotFound { .. })));
        assert!(s.get_raw(&kg(), "k").unwrap().is_some());
        assert!(s.scan(&kg(), "", 10).unwrap().is_empty());
        // grace not yet over
        assert_eq!(s.collect_tombstones(&kg(), DEFAULT_TOMBSTONE_GRACE_MS, 1000).unwrap(), 0);
        let later = 10 + DEFAULT_TOMBSTONE_GRACE_MS + 1;
        assert_eq!(s.collect_tombstones(&kg(), DEFAULT_TOMBSTONE_GRACE_MS, later).unwrap(), 1);
        assert!(s.get_raw(&kg(), "k").unwrap().is_none());
    });
}

#[test]
fn scan_orders_and_bounds() {
    each_backend(|s| {
        s.create_keygroup(&kg(), KeygroupMode::Mutable).unwrap();
        for (i, k) in ["c", "a", "b"].iter().enumerate() {
            s.put(&kg(), k, VersionedValue::value(*k, vv(&[("A", i as u64 + 1)]), 0))
                .unwrap();
        }
        let keys: Vec<_> = s.scan(&kg(), "", 2).unwrap().into_iter().map(|e| e.key).collect();
        assert_eq!(keys, vec!["a", "b"]);
        let keys: Vec<_> = s.scan(&kg(), "b", 5).unwrap().into_iter().map(|e| e.key).collect();
        assert_eq!(keys, vec!["b", "c"]);
        assert!(s.scan(&kg(), "d", 5).unwrap().is_empty());
    });
}

#[test]
fn scan_matches_filtered_dump() {
    each_backend(|s| {
        s.create_keygroup(&kg(), KeygroupMode::Mutable).unwrap();
        for i in 0..20u64 {
            let key = format!("k{:02}", (i * 7) % 20);
            let v = if i % 3 == 0 {
                VersionedValue::tombstone(vv(&[("A", i + 1)]), 0)
            } else {
                VersionedValue::value(key.clone(), vv(&[("A", i + 1)]), 0)
            };
            s.put(&kg(), &key, v).unwrap();
        }
        let oracle: Vec<_> = s
            .dump()
            .into_iter()
            .filter(|e| !e.siblings.is_tombstone_only() && e.key.as_str() >= "k05")
            .take(6)
            .collect();
        assert_eq!(s.scan(&kg(), "k05", 6).unwrap(), oracle);
    });
}

#[test]
fn append_keys_are_unique_and_gapless() {
    each_backend(|s| {
        s.create_keygroup(&kg(), KeygroupMode::AppendOnly).unwrap();
        assert_eq!(s.next_append_key(&kg(), &node("A")).unwrap(), "A-0");
        let nodes = [node("A"), node("B"), node("C")];
        let mut keys = BTreeSet::new();
        keys.insert("A-0".to_string());
        for i in 0..99 {
            keys.insert(s.next_append_key(&kg(), &nodes[i % 3]).unwrap());
        }
        assert_eq!(keys.len(), 100);
        for n in &nodes {
            let mut seqs: Vec<u64> = keys
                .iter()
                .filter_map(|k| k.strip_prefix(&format!("{n}-")))
                .map(|s| s.parse().unwrap())
                .collect();
            seqs.sort();
            assert_eq!(seqs, (0..seqs.len() as u64).collect::<Vec<_>>());
        }
        let mutable = KeygroupName::new("m").unwrap();
        s.create_keygroup(&mutable, KeygroupMode::Mutable).unwrap();
        assert!(matches!(
            s.next_append_key(&mutable, &node("A")),
            Err(StorageError::NotAppendOnly(_))
        ));
    });
}

#[test]
fn append_sequence_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let s = DiskStore::open(dir.path()).unwrap();
        s.create_keygroup(&kg(), KeygroupMode::AppendOnly).unwrap();
        assert_eq!(s.next_append_key(&kg(), &node("A")).unwrap(), "A-0");
        assert_eq!(s.next_append_key(&kg(), &node("A")).unwrap(), "A-1");
    }
    let s = DiskStore::open(dir.path()).unwrap();
    assert_eq!(s.next_append_key(&kg(), &node("A")).unwrap(), "A-2");
}

#[test]
fn concurrent_appenders_never_collide() {
    let store = std::sync::Arc::new(MemoryStore::new());
    store.create_keygroup(&kg(), KeygroupMode::AppendOnly).unwrap();
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let s = store.clone();
            std::thread::spawn(move || {
                (0..50)
                    .map(|_| s.next_append_key(&kg(), &node("A")).unwrap())
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    let mut all = BTreeSet::new();
    for h in handles {
        for k in h.join().unwrap() {
            assert!(all.insert(k));
        }
    }
    assert_eq!(all.len(), 400);
}

#[test]
fn expiry_sweep() {
    each_backend(|s| {
        s.create_keygroup(&kg(), KeygroupMode::Mutable).unwrap();
        s.put(&kg(), "m", VersionedValue::value("reading", vv(&[("A", 1)]), 0)).unwrap();
        assert_eq!(s.sweep_expired(&kg(), None, 86_500_000).unwrap(), 0);
        assert_eq!(s.sweep_expired(&kg(), Some(86_400), 86_400_000).unwrap(), 0);
        assert_eq!(s.sweep_expired(&kg(), Some(86_400), 86_500_000).unwrap(), 1);
        assert!(s.get_raw(&kg(), "m").unwrap().is_none());
    });
}

#[test]
fn clock_bumps_above_floor() {
    each_backend(|s| {
        s.create_keygroup(&kg(), KeygroupMode::Mutable).unwrap();
        assert_eq!(s.bump_clock(&kg(), &node("A"), 0).unwrap(), 1);
        assert_eq!(s.bump_clock(&kg(), &node("A"), 5).unwrap(), 6);
        assert_eq!(s.bump_clock(&kg(), &node("A"), 2).unwrap(), 7);
        assert_eq!(s.bump_clock(&kg(), &node("B"), 0).unwrap(), 1);
    });
}

#[test]
fn drop_keygroup_removes_data() {
    let dir = tempfile::tempdir().unwrap();
    let s = DiskStore::open(dir.path()).unwrap();
    s.create_keygroup(&kg(), KeygroupMode::Mutable).unwrap();
    s.put(&kg(), "k", VersionedValue::value("v", vv(&[("A", 1)]), 0)).unwrap();
    s.drop_keygroup(&kg()).unwrap();
    assert!(s.keygroups().is_empty());
    assert!(!dir.path().join("kg").exists());
    drop(s);
    assert!(DiskStore::open(dir.path()).unwrap().keygroups().is_empty());
}

#[test]
fn mode_is_fixed_at_creation() {
    each_backend(|s| {
        s.create_keygroup(&kg(), KeygroupMode::Mutable).unwrap();
        s.create_keygroup(&kg(), KeygroupMode::Mutable).unwrap();
        assert!(matches!(
            s.create_keygroup(&kg(), KeygroupMode::AppendOnly),
            Err(StorageError::ModeMismatch { .. })
        ));
    });
}
