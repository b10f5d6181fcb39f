//! Fixed-size hash set with one sorted list per bucket.

use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use crate::arena::Arena;
use crate::error::{Error, Result};
use crate::sets::access::Access;
use crate::sets::list::{run_op, sentinels, walk, Op, Variant};

/// Buckets share a single tail sentinel; each head is its own root.
pub struct HashSet {
    variant: Variant,
    arena: Arc<Arena>,
    heads: Vec<u64>,
    roots: Vec<Arc<AtomicU64>>,
}

impl std::fmt::Debug for HashSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HashSet")
            .field("variant", &self.variant)
            .field("buckets", &self.heads.len())
            .finish_non_exhaustive()
    }
}

impl HashSet {
    pub fn new(arena: Arc<Arena>, variant: Variant, buckets: usize) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::Config("a hash set needs at least one bucket".into()));
        }
        let mut heads = Vec::with_capacity(buckets);
        let mut roots = Vec::with_capacity(buckets);
        let mut tail = None;
        for _ in 0..buckets {
            let (head, t) = sentinels(&arena, tail)?;
            tail = Some(t);
            let root = Arc::new(AtomicU64::new(head));
            arena.register_global_root(root.clone());
            heads.push(head);
            roots.push(root);
        }
        Ok(Self {
            variant,
            arena,
            heads,
            roots,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.arena
    }

    pub fn buckets(&self) -> usize {
        self.heads.len()
    }

    pub fn roots(&self) -> &[Arc<AtomicU64>] {
        &self.roots
    }

    pub fn bucket_of(&self, key: i64) -> usize {
        key.rem_euclid(self.heads.len() as i64) as usize
    }

    fn head(&self, key: i64) -> u64 {
        self.heads[self.bucket_of(key)]
    }

    pub fn contains<A: Access>(&self, acc: &mut A, key: i64) -> Result<bool> {
        run_op(acc, self.variant, self.head(key), Op::Contains, key)
    }

    pub fn insert<A: Access>(&self, acc: &mut A, key: i64) -> Result<bool> {
        run_op(acc, self.variant, self.head(key), Op::Insert, key)
    }

    pub fn remove<A: Access>(&self, acc: &mut A, key: i64) -> Result<bool> {
        run_op(acc, self.variant, self.head(key), Op::Remove, key)
    }

    /// Untagged keys of one bucket in list order. Quiescent use only.
    pub fn bucket_keys(&self, bucket: usize) -> Vec<i64> {
        walk(&self.arena, self.heads[bucket]).keys
    }

    /// All untagged keys, sorted. Quiescent use only.
    pub fn keys(&self) -> Vec<i64> {
        let mut all: Vec<i64> = (0..self.buckets()).flat_map(|b| self.bucket_keys(b)).collect();
        all.sort_unstable();
        all
    }

    /// Nodes reachable from any head, counting the shared tail once.
    pub fn reachable_nodes(&self) -> usize {
        self.heads.iter().map(|&h| walk(&self.arena, h).nodes).sum::<usize>() + 1
    }
}
