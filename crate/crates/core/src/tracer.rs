//! Phase driver: signal, trace, sweep.
//!
//! A phase moves through four statuses packed with its index in
//! `Runtime::state`. Any thread may push it forward, and no status waits on
//! a particular thread:
//!
//! * signalling sets the dirty flag of every registered thread;
//! * tracing: each helper gathers the roots itself and marks their closure
//!   with a private work stack, so a helper that stalls anywhere leaves
//!   nothing half-done behind. The first helper to finish advances the
//!   status, and late helpers notice and stop;
//! * sweeping is split into chunks that any helper may claim, and every
//!   node is freed by a compare-and-swap on its mark word, so overlapping
//!   sweepers never free a node twice.

use std::sync::atomic::Ordering::{Acquire, Relaxed, SeqCst};
use std::sync::Arc;

use crate::arena::{Arena, NodeRef};
use crate::runtime::Runtime;

/// The logical-deletion bit of a link word.
pub const TAG: u64 = 1;

#[inline]
pub const fn clear_tag(v: u64) -> u64 {
    v & !TAG
}

#[inline]
pub const fn is_tagged(v: u64) -> bool {
    v & TAG != 0
}

pub(crate) const SIGNALING: u64 = 0;
pub(crate) const TRACING: u64 = 1;
pub(crate) const SWEEPING: u64 = 2;
pub(crate) const DONE: u64 = 3;

pub(crate) const PHASE_RING: usize = 16;
const CHECK_EVERY: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Signaling,
    Tracing,
    Sweeping,
    Done,
}

impl Status {
    fn from_bits(bits: u64) -> Self {
        match bits & 3 {
            SIGNALING => Status::Signaling,
            TRACING => Status::Tracing,
            SWEEPING => Status::Sweeping,
            _ => Status::Done,
        }
    }
}

const fn state(phase: u64, status: u64) -> u64 {
    (phase << 2) | status
}

impl Runtime {
    /// Most recent phase and its status.
    pub fn phase_status(&self) -> (u64, Status) {
        let s = self.state.load(SeqCst);
        (s >> 2, Status::from_bits(s))
    }

    /// Starts a phase (or joins the one in flight) and helps it to
    /// completion. Returns the number of nodes that phase reclaimed.
    pub fn reclamation_phase(&self) -> u64 {
        let phase = self.init_reclamation();
        self.help(phase);
        self.reclaimed_in(phase)
    }

    /// Drives `phase` until it is done. Returns at once if it already is.
    pub fn help(&self, phase: u64) {
        self.help_with(phase, || true);
    }

    pub(crate) fn help_with(&self, phase: u64, mut proceed: impl FnMut() -> bool) {
        loop {
            let s = self.state.load(SeqCst);
            let (q, status) = (s >> 2, s & 3);
            if q != phase || status == DONE {
                return;
            }
            match status {
                SIGNALING => {
                    self.signal_all(q);
                    let _ = self.state.compare_exchange(s, state(q, TRACING), SeqCst, SeqCst);
                }
                TRACING => {
                    let mut stopped = false;
                    let done = self.trace_phase(q, &mut || {
                        let go = proceed();
                        stopped |= !go;
                        go
                    });
                    if stopped {
                        return;
                    }
                    if done {
                        let _ = self.state.compare_exchange(s, state(q, SWEEPING), SeqCst, SeqCst);
                    }
                }
                _ => {
                    if self.sweep_phase(q)
                        && self
                            .state
                            .compare_exchange(s, state(q, DONE), SeqCst, SeqCst)
                            .is_ok()
                    {
                        self.phases_completed.fetch_add(1, SeqCst);
                    }
                }
            }
        }
    }

    fn trace_phase(&self, phase: u64, proceed: &mut impl FnMut() -> bool) -> bool {
        let arenas = self.arenas();
        let mut roots = self.gather_local_roots();
        for arena in &arenas {
            roots.extend(arena.gather_global_roots());
        }
        let current = state(phase, TRACING);
        trace_in(&arenas, &roots, phase, || {
            proceed() && self.state.load(Acquire) == current
        })
    }

    /// Marks, in `phase`, every node reachable from `roots` through the
    /// arenas' link words. Tags are cleared on every link followed and
    /// values that resolve in no arena are skipped.
    pub fn trace(&self, roots: &[u64], phase: u64) {
        trace_in(&self.arenas(), roots, phase, || true);
    }

    fn sweep_phase(&self, phase: u64) -> bool {
        let arenas = self.arenas();
        let total: usize = arenas.iter().map(|a| a.chunk_count()).sum();
        if total == 0 {
            return true;
        }
        let current = state(phase, SWEEPING);
        let ticket = self.sweep_ticket.fetch_add(1, Relaxed);
        let start = ticket.wrapping_mul(total / 4 + 1) % total;
        for k in 0..total {
            let (arena, chunk) = locate(&arenas, (start + k) % total);
            if arena.chunk_swept(chunk) < phase {
                let n = arena.sweep_chunk(chunk, phase);
                self.add_reclaimed(phase, n as u64);
            }
            if k % 8 == 7 && self.state.load(Acquire) != current {
                return false;
            }
        }
        true
    }

    fn add_reclaimed(&self, phase: u64, n: u64) {
        if n == 0 {
            return;
        }
        self.total_reclaimed.fetch_add(n, Relaxed);
        let slot = &self.phase_reclaimed[phase as usize % PHASE_RING];
        let _ = slot.fetch_update(SeqCst, SeqCst, |w| match (w >> 32).cmp(&phase) {
            std::cmp::Ordering::Equal => Some(w + n),
            std::cmp::Ordering::Less => Some((phase << 32) | n),
            std::cmp::Ordering::Greater => None,
        });
    }

    /// Nodes reclaimed by `phase`, if it is recent enough to be remembered.
    pub fn reclaimed_in(&self, phase: u64) -> u64 {
        let w = self.phase_reclaimed[phase as usize % PHASE_RING].load(SeqCst);
        if w >> 32 == phase {
            w & 0xFFFF_FFFF
        } else {
            0
        }
    }
}

fn locate(arenas: &[Arc<Arena>], mut chunk: usize) -> (&Arena, usize) {
    for arena in arenas {
        if chunk < arena.chunk_count() {
            return (arena, chunk);
        }
        chunk -= arena.chunk_count();
    }
    unreachable!("chunk index out of range")
}

fn trace_in(arenas: &[Arc<Arena>], roots: &[u64], phase: u64, mut proceed: impl FnMut() -> bool) -> bool {
    let mut seen: Vec<Vec<u64>> = arenas
        .iter()
        .map(|a| vec![0; a.capacity().div_ceil(64)])
        .collect();
    let mut stack = Vec::new();
    let mut visit = |raw: u64, stack: &mut Vec<(usize, usize)>| {
        let Some((aid, index)) = NodeRef::split(clear_tag(raw)) else {
            return;
        };
        if aid >= arenas.len() || index >= arenas[aid].capacity() {
            return;
        }
        let (word, bit) = (index / 64, 1u64 << (index % 64));
        if seen[aid][word] & bit == 0 {
            seen[aid][word] |= bit;
            stack.push((aid, index));
        }
    };
    for &r in roots {
        visit(r, &mut stack);
    }
    let mut steps = 0u64;
    while let Some((aid, index)) = stack.pop() {
        let arena = &arenas[aid];
        arena.marks().mark(index, phase);
        for &w in arena.link_words() {
            visit(arena.word_at(index, w).load(Acquire), &mut stack);
        }
        steps += 1;
        if steps % CHECK_EVERY == 0 && !proceed() {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::{NodeLayout, NULL};
    use crate::runtime::RuntimeConfig;
    use std::sync::atomic::AtomicU64;
    use std::sync::Barrier;

    fn setup(capacity: usize) -> (Arc<Runtime>, Arc<Arena>) {
        let rt = Runtime::new(RuntimeConfig::default()).unwrap();
        let arena = rt.add_arena(capacity, NodeLayout::list_node()).unwrap();
        (rt, arena)
    }

    fn link(arena: &Arena, from: NodeRef, to: u64) {
        arena.cell(from.raw(), 1).unwrap().store(to, SeqCst);
    }

    #[test]
    fn clear_tag_table() {
        let a = 0x0000_1000_0000_0040;
        assert_eq!(clear_tag(a | 1), a);
        assert_eq!(clear_tag(a), a);
        for x in [0, 1, a, a | 1, u64::MAX] {
            assert_eq!(clear_tag(clear_tag(x)), clear_tag(x));
        }
        assert!(is_tagged(a | 1));
        assert!(!is_tagged(a));
    }

    #[test]
    fn chain_cycle_and_tagged_link() {
        let (rt, arena) = setup(8);
        let n: Vec<_> = (0..6).map(|_| arena.pop_free(0).unwrap()).collect();
        // chain 0 -> 1 -> 2
        link(&arena, n[0], n[1].raw());
        link(&arena, n[1], n[2].raw());
        rt.trace(&[n[0].raw()], 1);
        let marked: Vec<_> = (0..6).filter(|&i| arena.marks().mark_word(n[i].index()) == 1).collect();
        assert_eq!(marked, vec![0, 1, 2]);
        // cycle 3 <-> 4
        link(&arena, n[3], n[4].raw());
        link(&arena, n[4], n[3].raw());
        rt.trace(&[n[3].raw()], 2);
        assert_eq!(arena.marks().mark_word(n[3].index()), 2);
        assert_eq!(arena.marks().mark_word(n[4].index()), 2);
        // tagged link 5 -> 0|1
        link(&arena, n[5], n[0].raw() | 1);
        rt.trace(&[n[5].raw()], 3);
        assert_eq!(arena.marks().mark_word(n[0].index()), 3);
        assert_eq!(arena.marks().mark_word(n[1].index()), 3);
    }

    #[test]
    fn arbitrary_link_values_are_skipped() {
        let (rt, arena) = setup(4);
        let a = arena.pop_free(0).unwrap();
        link(&arena, a, crate::arena::POISON);
        rt.trace(&[a.raw(), 0xDEAD_0000, u64::MAX, 3], 1);
        assert_eq!(arena.marks().mark_word(a.index()), 1);
    }

    #[test]
    fn single_thread_phase_reclaims_floating_nodes() {
        let (rt, arena) = setup(8);
        let _h = rt.register().unwrap();
        let n: Vec<_> = (0..5).map(|_| arena.pop_free(0).unwrap()).collect();
        link(&arena, n[0], n[1].raw());
        link(&arena, n[1], n[2].raw());
        link(&arena, n[2], NULL);
        arena.register_global_root(Arc::new(AtomicU64::new(n[0].raw())));
        assert_eq!(rt.reclamation_phase(), 2);
        assert_eq!(rt.phase_status(), (1, Status::Done));
        assert_eq!(rt.phases_completed(), 1);
        assert_eq!(arena.free_count(), 8 - 3);
    }

    #[test]
    fn empty_root_set_reclaims_everything() {
        let (rt, arena) = setup(8);
        let _h = rt.register().unwrap();
        for _ in 0..6 {
            arena.pop_free(0).unwrap();
        }
        arena.register_global_root(Arc::new(AtomicU64::new(NULL)));
        assert_eq!(rt.reclamation_phase(), 6);
        assert_eq!(arena.allocated_count(), 0);
    }

    #[test]
    fn help_without_phase_is_noop() {
        let (rt, _arena) = setup(4);
        rt.help(0);
        rt.help(7);
        assert_eq!(rt.phase_status(), (0, Status::Done));
        assert_eq!(rt.phases_completed(), 0);
    }

    #[test]
    fn stale_marker_changes_nothing() {
        let (rt, arena) = setup(4);
        let a = arena.pop_free(0).unwrap();
        arena.marks().mark(a.index(), 2);
        rt.trace(&[a.raw()], 1);
        assert!(!arena.marks().mark(a.index(), 1));
        assert_eq!(arena.marks().mark_word(a.index()), 2);
    }

    #[test]
    fn stalled_tracer_does_not_block_the_phase() {
        let (rt, arena) = setup(512);
        let _h = rt.register().unwrap();
        // a 300-node chain and 100 floating nodes
        let chain: Vec<_> = (0..300).map(|_| arena.pop_free(0).unwrap()).collect();
        for w in chain.windows(2) {
            link(&arena, w[0], w[1].raw());
        }
        for _ in 0..100 {
            arena.pop_free(0).unwrap();
        }
        arena.register_global_root(Arc::new(AtomicU64::new(chain[0].raw())));
        let phase = rt.init_reclamation();
        rt.help_with(phase, || false); // signalling only, tracing gives up
        assert_eq!(rt.phase_status(), (phase, Status::Tracing));

        let stalled = Barrier::new(2);
        let resume = Barrier::new(2);
        std::thread::scope(|s| {
            s.spawn(|| {
                let mut first = true;
                rt.help_with(phase, || {
                    if first {
                        first = false;
                        stalled.wait();
                        resume.wait();
                    }
                    true
                });
            });
            stalled.wait();
            rt.help(phase);
            assert_eq!(rt.phase_status(), (phase, Status::Done));
            resume.wait();
        });
        assert_eq!(rt.reclaimed_in(phase), 100);
        assert_eq!(arena.allocated_count(), 300);
        assert_eq!(rt.phases_completed(), 1);
    }
}
