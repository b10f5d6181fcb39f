//! Hazard-pointer reclamation.
//!
//! Each thread publishes up to `H` references it is about to dereference.
//! Retired nodes collect in a thread-local list; once the list reaches the
//! threshold the thread scans every published slot and frees the retired
//! nodes nobody protects. Scans never wait for other threads.

use std::sync::atomic::Ordering::{Acquire, Relaxed, SeqCst};
use std::sync::atomic::{fence, AtomicU64, AtomicUsize};
use std::sync::Arc;

use crate::arena::{Arena, NULL};
use crate::error::{Error, Result};
use crate::runtime::Hook;
use crate::tracer::clear_tag;

/// Slots per thread are padded to one cache line.
const STRIDE: usize = 8;

/// Shared hazard-slot registry.
pub struct HpDomain {
    slots: Box<[AtomicU64]>,
    per_thread: usize,
    max_threads: usize,
    registered: AtomicUsize,
    threshold: usize,
    scans: AtomicU64,
    reclaimed: AtomicU64,
    pub(crate) hook: Option<Hook>,
}

impl std::fmt::Debug for HpDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HpDomain")
            .field("per_thread", &self.per_thread)
            .field("threshold", &self.threshold)
            .field("registered", &self.registered.load(Relaxed))
            .finish_non_exhaustive()
    }
}

impl HpDomain {
    /// `per_thread` slots (at most 8) for up to `max_threads` threads; a
    /// thread scans once it holds `threshold` retired nodes.
    pub fn new(max_threads: usize, per_thread: usize, threshold: usize) -> Result<Arc<Self>> {
        Self::with_hook(max_threads, per_thread, threshold, None)
    }

    /// Like [`HpDomain::new`]; `hook` runs after every protected read.
    pub fn with_hook(
        max_threads: usize,
        per_thread: usize,
        threshold: usize,
        hook: Option<Hook>,
    ) -> Result<Arc<Self>> {
        if per_thread == 0 || per_thread > STRIDE {
            return Err(Error::Config(format!("hazard slots per thread must be in 1..={STRIDE}")));
        }
        if max_threads == 0 {
            return Err(Error::Config("max_threads must be at least 1".into()));
        }
        Ok(Arc::new(Self {
            slots: (0..max_threads * STRIDE).map(|_| AtomicU64::new(NULL)).collect(),
            per_thread,
            max_threads,
            registered: AtomicUsize::new(0),
            threshold: threshold.max(1),
            scans: AtomicU64::new(0),
            reclaimed: AtomicU64::new(0),
            hook,
        }))
    }

    /// The retire threshold used by the benchmarks: 100000 nodes shared
    /// among the threads.
    pub fn default_threshold(threads: usize) -> usize {
        (100_000 / threads.max(1)).max(1)
    }

    pub fn register(self: &Arc<Self>, arena: Arc<Arena>) -> Result<HpThread> {
        let tid = self
            .registered
            .fetch_update(SeqCst, SeqCst, |n| (n < self.max_threads).then_some(n + 1))
            .map_err(|_| Error::RegistryFull(self.max_threads))?;
        Ok(HpThread {
            domain: self.clone(),
            arena,
            tid,
            retired: Vec::new(),
        })
    }

    /// Scans that freed at least one node.
    pub fn reclaiming_scans(&self) -> u64 {
        self.scans.load(Relaxed)
    }

    pub fn reclaimed(&self) -> u64 {
        self.reclaimed.load(Relaxed)
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    fn slot(&self, tid: usize, i: usize) -> &AtomicU64 {
        &self.slots[tid * STRIDE + i]
    }

    fn snapshot(&self) -> Vec<u64> {
        fence(SeqCst);
        let n = self.registered.load(SeqCst);
        let mut v: Vec<u64> = (0..n)
            .flat_map(|t| (0..self.per_thread).map(move |i| (t, i)))
            .map(|(t, i)| self.slot(t, i).load(Acquire))
            .filter(|&p| p != NULL)
            .collect();
        v.sort_unstable();
        v
    }
}

/// One thread's view of an [`HpDomain`].
pub struct HpThread {
    domain: Arc<HpDomain>,
    arena: Arc<Arena>,
    tid: usize,
    retired: Vec<u64>,
}

impl HpThread {
    pub fn tid(&self) -> usize {
        self.tid
    }

    pub fn domain(&self) -> &Arc<HpDomain> {
        &self.domain
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.arena
    }

    /// Loads `cell` and protects the (untagged) result in slot `i`.
    pub fn hp_read(&self, cell: &AtomicU64, i: usize) -> u64 {
        debug_assert!(i < self.domain.per_thread);
        let slot = self.domain.slot(self.tid, i);
        let mut v = cell.load(Acquire);
        loop {
            slot.store(clear_tag(v), SeqCst);
            let again = cell.load(SeqCst);
            if again == v {
                return v;
            }
            v = again;
        }
    }

    /// Publishes `v` in slot `i` without validation.
    pub fn protect(&self, i: usize, v: u64) {
        self.domain.slot(self.tid, i).store(clear_tag(v), SeqCst);
    }

    pub fn clear(&self) {
        for i in 0..self.domain.per_thread {
            self.domain.slot(self.tid, i).store(NULL, Relaxed);
        }
    }

    pub fn retired(&self) -> usize {
        self.retired.len()
    }

    /// Queues an unlinked node, scanning when the threshold is reached.
    pub fn retire(&mut self, node: u64) {
        self.retired.push(clear_tag(node));
        if self.retired.len() >= self.domain.threshold {
            self.scan();
        }
    }

    /// Frees every retired node absent from all published slots. Returns
    /// the number freed.
    pub fn scan(&mut self) -> usize {
        let hazards = self.domain.snapshot();
        let before = self.retired.len();
        let arena = &self.arena;
        self.retired.retain(|&n| {
            if hazards.binary_search(&n).is_ok() {
                true
            } else {
                arena.release(n);
                false
            }
        });
        let freed = before - self.retired.len();
        if freed > 0 {
            self.domain.scans.fetch_add(1, Relaxed);
            self.domain.reclaimed.fetch_add(freed as u64, Relaxed);
        }
        freed
    }

    /// Pops a node, scanning and yielding while the pool is empty.
    pub fn alloc(&mut self) -> Result<u64> {
        let deadline = std::time::Instant::now() + super::ALLOC_PATIENCE;
        while std::time::Instant::now() < deadline {
            if let Some(n) = self.arena.pop_free(0) {
                return Ok(n.raw());
            }
            if self.scan() == 0 {
                std::thread::yield_now();
            }
        }
        Err(Error::Exhausted {
            capacity: self.arena.capacity(),
        })
    }
}

impl Drop for HpThread {
    fn drop(&mut self) {
        self.clear();
    }
}
