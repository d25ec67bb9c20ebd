//! Session-guarantee violation detection from observed content.
//!
//! The checker knows nothing about versions. It tracks, per client and
//! thread, which posts the client has seen in earlier reads and which posts
//! it has written successfully, and flags a read that is missing any of
//! them.

use std::collections::{BTreeMap, BTreeSet};

/// Outcome of checking one read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReadCheck {
    /// A post seen by an earlier read of this client is missing.
    pub monotonic_read: bool,
    /// A post this client wrote is missing.
    pub read_your_writes: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ConsistencyChecker {
    seen: BTreeMap<(usize, String), BTreeSet<String>>,
    own: BTreeMap<(usize, String), BTreeSet<String>>,
    written: BTreeMap<String, BTreeSet<String>>,
    reads: u64,
    mrc_violations: u64,
    rywc_violations: u64,
}

impl ConsistencyChecker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe_read(&mut self, client: usize, thread: &str, posts: &BTreeSet<String>) -> ReadCheck {
        let key = (client, thread.to_string());
        let seen = self.seen.entry(key.clone()).or_default();
        let check = ReadCheck {
            monotonic_read: !seen.is_subset(posts),
            read_your_writes: self.own.get(&key).is_some_and(|own| !own.is_subset(posts)),
        };
        seen.extend(posts.iter().cloned());
        self.reads += 1;
        self.mrc_violations += check.monotonic_read as u64;
        self.rywc_violations += check.read_your_writes as u64;
        check
    }

    pub fn record_write(&mut self, client: usize, thread: &str, post: &str) {
        self.own
            .entry((client, thread.to_string()))
            .or_default()
            .insert(post.to_string());
        self.written
            .entry(thread.to_string())
            .or_default()
            .insert(post.to_string());
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }

    pub fn mrc_violations(&self) -> u64 {
        self.mrc_violations
    }

    pub fn rywc_violations(&self) -> u64 {
        self.rywc_violations
    }

    pub fn mrc_rate(&self) -> f64 {
        ratio(self.mrc_violations, self.reads)
    }

    pub fn rywc_rate(&self) -> f64 {
        ratio(self.rywc_violations, self.reads)
    }

    pub fn written(&self, thread: &str) -> impl Iterator<Item = &String> {
        self.written.get(thread).into_iter().flatten()
    }

    pub fn posts_written(&self) -> usize {
        self.written.values().map(BTreeSet::len).sum()
    }

    /// Successfully written posts of `thread` absent from `final_posts`.
    pub fn lost(&self, thread: &str, final_posts: &BTreeSet<String>) -> Vec<String> {
        self.written(thread)
            .filter(|p| !final_posts.contains(*p))
            .cloned()
            .collect()
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ps: &[&str]) -> BTreeSet<String> {
        ps.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn flags_missing_seen_and_own_posts() {
        let mut c = ConsistencyChecker::new();
        assert_eq!(c.observe_read(0, "t", &set(&["a"])), ReadCheck::default());
        c.record_write(0, "t", "mine");
        let r = c.observe_read(0, "t", &set(&["mine"]));
        assert!(r.monotonic_read && !r.read_your_writes);
        let r = c.observe_read(0, "t", &set(&["a"]));
        assert!(r.monotonic_read && r.read_your_writes);
        // other threads and clients are independent
        assert_eq!(c.observe_read(1, "t", &set(&[])), ReadCheck::default());
        assert_eq!(c.observe_read(0, "u", &set(&[])), ReadCheck::default());
        assert_eq!(c.reads(), 5);
        assert!((c.mrc_rate() - 0.4).abs() < 1e-12);
        assert!((c.rywc_rate() - 0.2).abs() < 1e-12);
        assert_eq!(c.lost("t", &set(&["a"])), vec!["mine".to_string()]);
    }
}
