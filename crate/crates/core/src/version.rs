//! Version-vector algebra and the multi-value register built on it.
//!
//! A key holds a [`SiblingSet`]: every value whose version is not dominated by
//! another stored version. Incoming values are merged with [`SiblingSet::absorb`],
//! which is idempotent and insensitive to delivery order, so replicas that
//! receive the same writes converge to the same set.

use crate::model::{NodeId, VersionVector, VersionedValue};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CausalOrder {
    Equal,
    Less,
    Greater,
    Concurrent,
}

impl VersionVector {
    pub fn compare(&self, other: &VersionVector) -> CausalOrder {
        let mut less = false;
        let mut greater = false;
        for node in self.nodes().chain(other.nodes()) {
            let (a, b) = (self.get(node), other.get(node));
            less |= a < b;
            greater |= a > b;
            if less && greater {
                return CausalOrder::Concurrent;
            }
        }
        match (less, greater) {
            (false, false) => CausalOrder::Equal,
            (true, false) => CausalOrder::Less,
            (false, true) => CausalOrder::Greater,
            (true, true) => CausalOrder::Concurrent,
        }
    }

    /// `self <= other` pointwise.
    pub fn dominated_by(&self, other: &VersionVector) -> bool {
        matches!(self.compare(other), CausalOrder::Less | CausalOrder::Equal)
    }

    /// Pointwise maximum.
    pub fn join(&self, other: &VersionVector) -> VersionVector {
        let mut out = self.clone();
        for (node, c) in other.iter() {
            if c > out.get(node) {
                out.set(node.clone(), c);
            }
        }
        out
    }

    pub fn advance(&self, at: &NodeId) -> VersionVector {
        let mut out = self.clone();
        out.set(at.clone(), self.get(at) + 1);
        out
    }
}

pub fn compare(a: &VersionVector, b: &VersionVector) -> CausalOrder {
    a.compare(b)
}

pub fn join(a: &VersionVector, b: &VersionVector) -> VersionVector {
    a.join(b)
}

pub fn join_all<'a>(vs: impl IntoIterator<Item = &'a VersionVector>) -> VersionVector {
    vs.into_iter().fold(VersionVector::new(), |acc, v| acc.join(v))
}

pub fn advance(v: &VersionVector, at: &NodeId) -> VersionVector {
    v.advance(at)
}

/// True iff `candidate` is strictly greater than every member of `seen`.
pub fn supersedes<'a>(
    candidate: &VersionVector,
    seen: impl IntoIterator<Item = &'a VersionVector>,
) -> bool {
    seen.into_iter()
        .all(|s| candidate.compare(s) == CausalOrder::Greater)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Disposition {
    Applied,
    Obsolete,
}

/// Pairwise-concurrent set of values for one key, ordered by canonical
/// version encoding.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SiblingSet {
    values: Vec<VersionedValue>,
}

impl SiblingSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(value: VersionedValue) -> Self {
        SiblingSet {
            values: vec![value],
        }
    }

    /// Merges `incoming`. Obsolete if some member's version is greater than
    /// or equal to it; otherwise every dominated member is dropped.
    pub fn absorb(&mut self, incoming: VersionedValue) -> Disposition {
        if self
            .values
            .iter()
            .any(|v| incoming.version.dominated_by(&v.version))
        {
            return Disposition::Obsolete;
        }
        self.values
            .retain(|v| v.version.compare(&incoming.version) != CausalOrder::Less);
        let key = incoming.version.canonical_string();
        let pos = self
            .values
            .partition_point(|v| v.version.canonical_string() < key);
        self.values.insert(pos, incoming);
        Disposition::Applied
    }

    pub fn iter(&self) -> std::slice::Iter<'_, VersionedValue> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_tombstone_only(&self) -> bool {
        self.values.iter().all(|v| v.is_tombstone())
    }

    pub fn versions(&self) -> impl Iterator<Item = &VersionVector> {
        self.values.iter().map(|v| &v.version)
    }

    pub fn live(&self) -> impl Iterator<Item = &VersionedValue> {
        self.values.iter().filter(|v| !v.is_tombstone())
    }

    pub fn retain(&mut self, f: impl FnMut(&VersionedValue) -> bool) {
        self.values.retain(f);
    }

    pub fn into_values(self) -> Vec<VersionedValue> {
        self.values
    }
}

impl<'a> IntoIterator for &'a SiblingSet {
    type Item = &'a VersionedValue;
    type IntoIter = std::slice::Iter<'a, VersionedValue>;
    fn into_iter(self) -> Self::IntoIter {
        self.values.iter()
    }
}
