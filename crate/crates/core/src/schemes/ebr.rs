//! Epoch-based reclamation.
//!
//! Threads announce the global epoch when they enter an operation. The
//! epoch advances only once every active thread has announced it, so a
//! node retired while the global epoch was `e` can be freed once the epoch
//! reaches `e + 2`. A thread that stays active forever pins the epoch.

use std::sync::atomic::Ordering::{Acquire, Relaxed, Release, SeqCst};
use std::sync::atomic::{AtomicU64, AtomicUsize};
use std::sync::Arc;

use crossbeam_utils::CachePadded;

use crate::arena::Arena;
use crate::error::{Error, Result};
use crate::runtime::Hook;
use crate::tracer::clear_tag;

const ACTIVE: u64 = 1;

pub struct EbrDomain {
    epoch: CachePadded<AtomicU64>,
    /// `(announced epoch << 1) | active`.
    local: Box<[CachePadded<AtomicU64>]>,
    registered: AtomicUsize,
    advances: AtomicU64,
    reclaimed: AtomicU64,
    pub(crate) hook: Option<Hook>,
}

impl std::fmt::Debug for EbrDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EbrDomain")
            .field("epoch", &self.epoch())
            .field("registered", &self.registered.load(Relaxed))
            .finish_non_exhaustive()
    }
}

impl EbrDomain {
    pub fn new(max_threads: usize) -> Result<Arc<Self>> {
        Self::with_hook(max_threads, None)
    }

    /// Like [`EbrDomain::new`]; `hook` runs after every node read.
    pub fn with_hook(max_threads: usize, hook: Option<Hook>) -> Result<Arc<Self>> {
        if max_threads == 0 {
            return Err(Error::Config("max_threads must be at least 1".into()));
        }
        Ok(Arc::new(Self {
            epoch: CachePadded::new(AtomicU64::new(0)),
            local: (0..max_threads).map(|_| CachePadded::new(AtomicU64::new(0))).collect(),
            registered: AtomicUsize::new(0),
            advances: AtomicU64::new(0),
            reclaimed: AtomicU64::new(0),
            hook,
        }))
    }

    pub fn register(self: &Arc<Self>, arena: Arc<Arena>) -> Result<EbrThread> {
        let max = self.local.len();
        let tid = self
            .registered
            .fetch_update(SeqCst, SeqCst, |n| (n < max).then_some(n + 1))
            .map_err(|_| Error::RegistryFull(max))?;
        Ok(EbrThread {
            domain: self.clone(),
            arena,
            tid,
            bins: std::array::from_fn(|_| (0, Vec::new())),
            active: false,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(SeqCst)
    }

    pub fn advances(&self) -> u64 {
        self.advances.load(Relaxed)
    }

    pub fn reclaimed(&self) -> u64 {
        self.reclaimed.load(Relaxed)
    }

    /// Advances the epoch from `e` if every active thread has announced it.
    pub fn try_advance(&self, e: u64) -> bool {
        let n = self.registered.load(SeqCst);
        for local in &self.local[..n] {
            let w = local.load(SeqCst);
            if w & ACTIVE != 0 && w >> 1 != e {
                return false;
            }
        }
        let ok = self.epoch.compare_exchange(e, e + 1, SeqCst, SeqCst).is_ok();
        if ok {
            self.advances.fetch_add(1, Relaxed);
        }
        ok
    }
}

/// One thread's view of an [`EbrDomain`], with its three limbo bins.
pub struct EbrThread {
    domain: Arc<EbrDomain>,
    arena: Arc<Arena>,
    tid: usize,
    /// `(epoch the bin was filled in, nodes)`, indexed by `epoch % 3`.
    bins: [(u64, Vec<u64>); 3],
    active: bool,
}

impl EbrThread {
    pub fn tid(&self) -> usize {
        self.tid
    }

    pub fn domain(&self) -> &Arc<EbrDomain> {
        &self.domain
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.arena
    }

    pub fn ebr_enter(&mut self) {
        let d = &*self.domain;
        let e = d.epoch.load(SeqCst);
        d.local[self.tid].store((e << 1) | ACTIVE, SeqCst);
        self.active = true;
        let e = d.epoch.load(SeqCst);
        d.try_advance(e);
        self.collect();
    }

    pub fn ebr_exit(&mut self) {
        let d = &*self.domain;
        let w = d.local[self.tid].load(Relaxed);
        d.local[self.tid].store(w & !ACTIVE, Release);
        self.active = false;
    }

    /// Queues an unlinked node for freeing two epochs from now.
    pub fn ebr_retire(&mut self, node: u64) {
        let g = self.domain.epoch.load(SeqCst);
        let bin = (g % 3) as usize;
        if self.bins[bin].0 != g {
            // same residue, so at least three epochs old
            self.free_bin(bin);
            self.bins[bin].0 = g;
        }
        self.bins[bin].1.push(clear_tag(node));
    }

    /// Nodes retired but not yet freed.
    pub fn limbo(&self) -> usize {
        self.bins.iter().map(|b| b.1.len()).sum()
    }

    fn collect(&mut self) -> usize {
        let g = self.domain.epoch.load(Acquire);
        let mut freed = 0;
        for bin in 0..3 {
            if self.bins[bin].0 + 2 <= g {
                freed += self.free_bin(bin);
            }
        }
        freed
    }

    fn free_bin(&mut self, bin: usize) -> usize {
        let nodes = std::mem::take(&mut self.bins[bin].1);
        for &n in &nodes {
            self.arena.release(n);
        }
        self.domain.reclaimed.fetch_add(nodes.len() as u64, Relaxed);
        let n = nodes.len();
        self.bins[bin].1 = nodes;
        self.bins[bin].1.clear();
        n
    }

    /// Pops a node, trying to advance the epoch while the pool is empty.
    pub fn alloc(&mut self) -> Result<u64> {
        let deadline = std::time::Instant::now() + super::ALLOC_PATIENCE;
        while std::time::Instant::now() < deadline {
            if let Some(n) = self.arena.pop_free(0) {
                return Ok(n.raw());
            }
            let e = self.domain.epoch();
            self.domain.try_advance(e);
            if self.collect() == 0 {
                std::thread::yield_now();
            }
        }
        Err(Error::Exhausted {
            capacity: self.arena.capacity(),
        })
    }
}

impl Drop for EbrThread {
    fn drop(&mut self) {
        if self.active {
            self.ebr_exit();
        }
    }
}
