//! Fixed-capacity node pool.
//!
//! An [`Arena`] owns one contiguous block of node storage that is allocated
//! when the arena is created and released only when the arena itself is
//! dropped. Reads through a reference to a node that has been reclaimed (and
//! possibly handed out again) therefore return arbitrary words but never
//! fault. Reclamation schemes rely on exactly this property.
//!
//! Node references are plain 64-bit words. The arena id lives in bits 44..52,
//! the node index in bits 4..44, and the low four bits are zero for an
//! untagged reference. Bit 0 is the logical-deletion tag used by the
//! lock-free lists; every other pattern with non-zero low bits, or with an
//! unknown arena id, does not resolve to a node.

use std::sync::atomic::Ordering::{AcqRel, Acquire, Relaxed, Release};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{Error, Result};
use crate::tracer::clear_tag;

/// Machine word size in bytes.
pub const WORD: usize = 8;

/// Value written into every word of a node swept while poison mode is on.
///
/// It is not a valid reference (wrong low bits, no such arena) and, read as
/// a signed key, lies far above any benchmark key range.
pub const POISON: u64 = 0x7EAD_BEEF_DEAD_BEEE;

/// The null reference.
pub const NULL: u64 = 0;

pub(crate) const MAX_ARENAS: usize = 255;
const ARENA_SHIFT: u32 = 44;
const INDEX_SHIFT: u32 = 4;
const INDEX_MASK: u64 = (1 << (ARENA_SHIFT - INDEX_SHIFT)) - 1;
const LOW_MASK: u64 = (1 << INDEX_SHIFT) - 1;

/// Nodes per sweep chunk.
pub(crate) const SWEEP_CHUNK: usize = 256;

/// Shape of the nodes stored in one arena.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeLayout {
    node_size: usize,
    link_offsets: Vec<usize>,
}

impl NodeLayout {
    /// `node_size` and every entry of `link_offsets` are in bytes.
    pub fn new(node_size: usize, link_offsets: &[usize]) -> Result<Self> {
        if node_size == 0 || node_size % WORD != 0 {
            return Err(Error::InvalidLayout(format!(
                "node size {node_size} is not a positive multiple of {WORD}"
            )));
        }
        for &off in link_offsets {
            if off % WORD != 0 || off >= node_size {
                return Err(Error::InvalidLayout(format!(
                    "link offset {off} is misaligned or outside a {node_size}-byte node"
                )));
            }
        }
        let mut link_offsets = link_offsets.to_vec();
        link_offsets.sort_unstable();
        link_offsets.dedup();
        Ok(Self {
            node_size,
            link_offsets,
        })
    }

    /// Layout used by the list nodes: a key word followed by a link word.
    pub fn list_node() -> Self {
        Self::new(2 * WORD, &[WORD]).expect("static layout")
    }

    pub fn node_size(&self) -> usize {
        self.node_size
    }

    pub fn link_offsets(&self) -> &[usize] {
        &self.link_offsets
    }

    pub fn words(&self) -> usize {
        self.node_size / WORD
    }
}

/// A resolved, untagged reference to one node slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef(u64);

impl NodeRef {
    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn index(self) -> usize {
        ((self.0 >> INDEX_SHIFT) & INDEX_MASK) as usize
    }

    pub fn arena_id(self) -> usize {
        (self.0 >> ARENA_SHIFT) as usize - 1
    }

    pub(crate) fn encode(arena_id: usize, index: usize) -> Self {
        NodeRef(((arena_id as u64 + 1) << ARENA_SHIFT) | ((index as u64) << INDEX_SHIFT))
    }

    /// Decodes a raw word into `(arena id, index)` without bounds checks
    /// against any particular arena. The tag bit must already be cleared.
    pub(crate) fn split(raw: u64) -> Option<(usize, usize)> {
        if raw & LOW_MASK != 0 {
            return None;
        }
        let aid = raw >> ARENA_SHIFT;
        if aid == 0 || aid as usize > MAX_ARENAS {
            return None;
        }
        Some((aid as usize - 1, ((raw >> INDEX_SHIFT) & INDEX_MASK) as usize))
    }
}

/// Per-node mark words.
///
/// Each word packs the phase in which the node was last marked (high bits)
/// with an allocated flag (bit 0). Mark phases only grow; a marker carrying a
/// stale phase index cannot lower them.
pub struct MarkTable {
    words: Box<[AtomicU64]>,
}

const ALLOCATED: u64 = 1;

impl MarkTable {
    fn new(capacity: usize) -> Self {
        Self {
            words: (0..capacity).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    /// Phase in which `index` was last marked.
    pub fn mark_word(&self, index: usize) -> u64 {
        self.words[index].load(Acquire) >> 1
    }

    pub fn is_allocated(&self, index: usize) -> bool {
        self.words[index].load(Acquire) & ALLOCATED != 0
    }

    /// Marks `index` in `phase`. Returns `true` iff this call advanced the
    /// mark to `phase`.
    pub fn mark(&self, index: usize, phase: u64) -> bool {
        let cell = &self.words[index];
        let mut cur = cell.load(Relaxed);
        loop {
            if cur >> 1 >= phase {
                return false;
            }
            let new = (phase << 1) | (cur & ALLOCATED);
            match cell.compare_exchange_weak(cur, new, AcqRel, Relaxed) {
                Ok(_) => return true,
                Err(actual) => cur = actual,
            }
        }
    }

    /// Sets the allocated flag and raises the mark to at least `phase`.
    fn set_allocated(&self, index: usize, phase: u64) {
        let cell = &self.words[index];
        let mut cur = cell.load(Relaxed);
        loop {
            let new = ((cur >> 1).max(phase) << 1) | ALLOCATED;
            match cell.compare_exchange_weak(cur, new, AcqRel, Relaxed) {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    /// Clears the allocated flag if the word still equals `seen`.
    fn try_free(&self, index: usize, seen: u64) -> bool {
        self.words[index]
            .compare_exchange(seen, seen & !ALLOCATED, AcqRel, Relaxed)
            .is_ok()
    }

    fn raw(&self, index: usize) -> u64 {
        self.words[index].load(Acquire)
    }
}

/// Treiber stack of node indices. The head packs a version counter (high 32
/// bits) with `index + 1` (low 32 bits, zero meaning empty).
struct FreeList {
    head: AtomicU64,
    next: Box<[AtomicU32]>,
}

const EMPTY: u32 = 0;

impl FreeList {
    fn full(capacity: usize) -> Self {
        // Chain 0 -> 1 -> ... -> capacity - 1.
        let next = (0..capacity)
            .map(|i| AtomicU32::new(if i + 1 < capacity { i as u32 + 2 } else { EMPTY }))
            .collect();
        Self {
            head: AtomicU64::new(1),
            next,
        }
    }

    fn pop(&self) -> Option<usize> {
        let mut head = self.head.load(Acquire);
        loop {
            let top = head as u32;
            if top == EMPTY {
                return None;
            }
            let index = (top - 1) as usize;
            let next = self.next[index].load(Relaxed) as u64;
            let new = ((head >> 32).wrapping_add(1) << 32) | next;
            match self.head.compare_exchange_weak(head, new, AcqRel, Acquire) {
                Ok(_) => return Some(index),
                Err(actual) => head = actual,
            }
        }
    }

    fn push(&self, index: usize) {
        let mut head = self.head.load(Relaxed);
        loop {
            self.next[index].store(head as u32, Relaxed);
            let new = ((head >> 32).wrapping_add(1) << 32) | (index as u64 + 1);
            match self.head.compare_exchange_weak(head, new, Release, Relaxed) {
                Ok(_) => return,
                Err(actual) => head = actual,
            }
        }
    }

    /// Walks the stack. Only meaningful at quiescence.
    fn len(&self) -> usize {
        let mut n = 0;
        let mut cur = self.head.load(Acquire) as u32;
        while cur != EMPTY && n <= self.next.len() {
            n += 1;
            cur = self.next[(cur - 1) as usize].load(Relaxed);
        }
        n
    }
}

/// A shared location holding a node reference, e.g. the head of a list.
pub type RootCell = Arc<AtomicU64>;

/// Fixed-capacity pool of equally shaped nodes with a side mark table.
pub struct Arena {
    id: usize,
    capacity: usize,
    layout: NodeLayout,
    words_per_node: usize,
    link_words: Box<[usize]>,
    storage: Box<[AtomicU64]>,
    marks: MarkTable,
    free: FreeList,
    roots: RwLock<Vec<RootCell>>,
    poison: AtomicBool,
    chunk_swept: Box<[AtomicU64]>,
}

impl std::fmt::Debug for Arena {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Arena")
            .field("id", &self.id)
            .field("capacity", &self.capacity)
            .field("layout", &self.layout)
            .finish_non_exhaustive()
    }
}

impl Arena {
    /// A standalone arena (id 0). Arenas traced by a [`crate::Runtime`] are
    /// created through [`crate::Runtime::add_arena`] instead.
    pub fn new(capacity: usize, layout: NodeLayout) -> Result<Self> {
        Self::with_id(0, capacity, layout)
    }

    pub(crate) fn with_id(id: usize, capacity: usize, layout: NodeLayout) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::ZeroCapacity);
        }
        if capacity as u64 >= u32::MAX as u64 || capacity as u64 > INDEX_MASK {
            return Err(Error::Config(format!("arena capacity {capacity} is too large")));
        }
        if id >= MAX_ARENAS {
            return Err(Error::TooManyArenas);
        }
        let words_per_node = layout.words();
        let link_words = layout.link_offsets().iter().map(|o| o / WORD).collect();
        let storage = (0..capacity * words_per_node)
            .map(|_| AtomicU64::new(0))
            .collect();
        let chunks = capacity.div_ceil(SWEEP_CHUNK);
        Ok(Self {
            id,
            capacity,
            layout,
            words_per_node,
            link_words,
            storage,
            marks: MarkTable::new(capacity),
            free: FreeList::full(capacity),
            roots: RwLock::new(Vec::new()),
            poison: AtomicBool::new(false),
            chunk_swept: (0..chunks).map(|_| AtomicU64::new(0)).collect(),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn layout(&self) -> &NodeLayout {
        &self.layout
    }

    pub fn marks(&self) -> &MarkTable {
        &self.marks
    }

    pub(crate) fn link_words(&self) -> &[usize] {
        &self.link_words
    }

    pub fn set_poison(&self, on: bool) {
        self.poison.store(on, Relaxed);
    }

    pub fn poison_enabled(&self) -> bool {
        self.poison.load(Relaxed)
    }

    /// Reference to node `index` of this arena.
    pub fn node_ref(&self, index: usize) -> NodeRef {
        assert!(index < self.capacity, "node index out of range");
        NodeRef::encode(self.id, index)
    }

    /// Resolves an untagged raw reference into a node index of this arena.
    #[inline]
    pub fn resolve(&self, raw: u64) -> Option<usize> {
        match NodeRef::split(raw) {
            Some((aid, index)) if aid == self.id && index < self.capacity => Some(index),
            _ => None,
        }
    }

    /// The atomic word `word` of the node referenced by `raw`, if `raw`
    /// resolves in this arena.
    #[inline]
    pub fn cell(&self, raw: u64, word: usize) -> Option<&AtomicU64> {
        let index = self.resolve(raw)?;
        debug_assert!(word < self.words_per_node);
        self.storage.get(index * self.words_per_node + word)
    }

    /// Loads a node word. A reference that does not resolve yields
    /// [`POISON`]: reads are allowed to return arbitrary values, never to
    /// fault.
    #[inline]
    pub fn load(&self, raw: u64, word: usize, order: std::sync::atomic::Ordering) -> u64 {
        match self.cell(raw, word) {
            Some(cell) => cell.load(order),
            None => POISON,
        }
    }

    #[inline]
    pub(crate) fn word_at(&self, index: usize, word: usize) -> &AtomicU64 {
        &self.storage[index * self.words_per_node + word]
    }

    /// Registers a shared cell whose value is a root in every reclamation
    /// phase. Registering the same cell twice has no further effect.
    pub fn register_global_root(&self, cell: RootCell) {
        let mut roots = self.roots.write();
        if !roots.iter().any(|c| Arc::ptr_eq(c, &cell)) {
            roots.push(cell);
        }
    }

    /// Current values of every registered root cell, untagged, nulls dropped.
    pub fn gather_global_roots(&self) -> Vec<u64> {
        self.roots
            .read()
            .iter()
            .map(|c| clear_tag(c.load(Acquire)))
            .filter(|&v| v != NULL)
            .collect()
    }

    /// Pops a free node and flags it allocated, raising its mark to `phase`
    /// so that a sweep of `phase` leaves it alone.
    pub fn pop_free(&self, phase: u64) -> Option<NodeRef> {
        self.pop_then(|| phase)
    }

    /// Like [`Arena::pop_free`], but the phase is read only after the pop.
    pub(crate) fn pop_then(&self, phase: impl FnOnce() -> u64) -> Option<NodeRef> {
        let index = self.free.pop()?;
        self.marks.set_allocated(index, phase());
        Some(NodeRef::encode(self.id, index))
    }

    /// Returns an allocated node to the free list. Returns `false` if the
    /// node was already free (for example, swept concurrently).
    pub fn release(&self, raw: u64) -> bool {
        let Some(index) = self.resolve(clear_tag(raw)) else {
            return false;
        };
        loop {
            let seen = self.marks.raw(index);
            if seen & ALLOCATED == 0 {
                return false;
            }
            if self.marks.try_free(index, seen) {
                self.recycle(index);
                return true;
            }
        }
    }

    fn recycle(&self, index: usize) {
        if self.poison_enabled() {
            for w in 0..self.words_per_node {
                self.word_at(index, w).store(POISON, Relaxed);
            }
        }
        self.free.push(index);
    }

    /// Reclaims every allocated node whose mark is older than `phase`.
    pub fn sweep(&self, phase: u64) -> usize {
        (0..self.chunk_count()).map(|c| self.sweep_chunk(c, phase)).sum()
    }

    pub(crate) fn chunk_count(&self) -> usize {
        self.chunk_swept.len()
    }

    pub(crate) fn chunk_swept(&self, chunk: usize) -> u64 {
        self.chunk_swept[chunk].load(Acquire)
    }

    pub(crate) fn sweep_chunk(&self, chunk: usize, phase: u64) -> usize {
        let start = chunk * SWEEP_CHUNK;
        let end = (start + SWEEP_CHUNK).min(self.capacity);
        let mut reclaimed = 0;
        for index in start..end {
            let seen = self.marks.raw(index);
            if seen & ALLOCATED != 0 && seen >> 1 < phase && self.marks.try_free(index, seen) {
                self.recycle(index);
                reclaimed += 1;
            }
        }
        self.chunk_swept[chunk].fetch_max(phase, AcqRel);
        reclaimed
    }

    /// Free nodes. Exact only at quiescence.
    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    /// Allocated nodes. Exact only at quiescence.
    pub fn allocated_count(&self) -> usize {
        (0..self.capacity).filter(|&i| self.marks.is_allocated(i)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list_arena(capacity: usize) -> Arena {
        Arena::new(capacity, NodeLayout::list_node()).unwrap()
    }

    #[test]
    fn pool_of_fifty_thousand() {
        let arena = list_arena(50_000);
        assert_eq!(arena.free_count(), 50_000);
        assert_eq!(arena.allocated_count(), 0);
    }

    #[test]
    fn minimal_arena() {
        let arena = list_arena(1);
        assert_eq!(arena.free_count(), 1);
        assert!(arena.pop_free(0).is_some());
        assert!(arena.pop_free(0).is_none());
    }

    #[test]
    fn rejects_bad_configuration() {
        assert_eq!(
            Arena::new(0, NodeLayout::list_node()).unwrap_err(),
            Error::ZeroCapacity
        );
        assert!(NodeLayout::new(12, &[0]).is_err());
        assert!(NodeLayout::new(16, &[4]).is_err());
        assert!(NodeLayout::new(16, &[16]).is_err());
        assert!(NodeLayout::new(0, &[]).is_err());
    }

    #[test]
    fn four_allocations_drain_four_nodes() {
        let arena = list_arena(4);
        for _ in 0..4 {
            assert!(arena.pop_free(0).is_some());
        }
        assert_eq!(arena.free_count(), 0);
        assert!(arena.pop_free(0).is_none());
    }

    #[test]
    fn refs_round_trip_through_index() {
        let arena = Arena::with_id(3, 100, NodeLayout::list_node()).unwrap();
        for i in [0, 1, 57, 99] {
            let r = arena.node_ref(i);
            assert_eq!(r.index(), i);
            assert_eq!(r.arena_id(), 3);
            assert_eq!(arena.resolve(r.raw()), Some(i));
            assert_eq!(r.raw() & 1, 0);
        }
        assert_eq!(arena.resolve(POISON), None);
        assert_eq!(arena.resolve(u64::MAX), None);
        assert_eq!(arena.resolve(NULL), None);
        assert_eq!(arena.resolve(arena.node_ref(5).raw() | 1), None);
        // wrong arena id
        assert_eq!(list_arena(100).resolve(arena.node_ref(5).raw()), None);
    }

    #[test]
    fn mark_examples() {
        let arena = list_arena(4);
        let m = arena.marks();
        assert!(m.mark(0, 1));
        assert_eq!(m.mark_word(0), 1);
        assert!(!m.mark(0, 1));
        assert!(m.mark(1, 2));
        assert!(!m.mark(1, 1), "stale phase must not mark");
        assert_eq!(m.mark_word(1), 2);
    }

    #[test]
    fn sweep_reclaims_unmarked_allocated_nodes() {
        let arena = list_arena(4);
        let nodes: Vec<_> = (0..4).map(|_| arena.pop_free(0).unwrap()).collect();
        for n in &nodes[..3] {
            arena.marks().mark(n.index(), 1);
        }
        assert_eq!(arena.sweep(1), 1);
        assert_eq!(arena.free_count(), 1);
        assert!(!arena.marks().is_allocated(nodes[3].index()));
        // all remaining marked in the next phase: nothing to do
        for n in &nodes[..3] {
            arena.marks().mark(n.index(), 2);
        }
        assert_eq!(arena.sweep(2), 0);
    }

    #[test]
    fn sweep_skips_free_nodes_and_reclaims_once() {
        let arena = list_arena(8);
        let a = arena.pop_free(0).unwrap();
        assert_eq!(arena.sweep(1), 1);
        assert_eq!(arena.sweep(1), 0);
        assert_eq!(arena.free_count(), 8);
        assert!(!arena.release(a.raw()));
    }

    #[test]
    fn poison_fills_swept_nodes() {
        let arena = list_arena(2);
        arena.set_poison(true);
        let a = arena.pop_free(0).unwrap();
        arena.cell(a.raw(), 0).unwrap().store(7, Relaxed);
        arena.cell(a.raw(), 1).unwrap().store(NULL, Relaxed);
        assert_eq!(arena.sweep(1), 1);
        assert_eq!(arena.load(a.raw(), 0, Relaxed), POISON);
        assert_eq!(arena.load(a.raw(), 1, Relaxed), POISON);
    }

    #[test]
    fn allocation_after_sweep_is_protected_from_that_sweep() {
        let arena = list_arena(2);
        let a = arena.pop_free(0).unwrap();
        arena.sweep(3);
        let b = arena.pop_free(3).unwrap();
        assert_eq!(a, b);
        assert_eq!(arena.sweep(3), 0);
        assert_eq!(arena.sweep(4), 1);
    }

    #[test]
    fn global_roots_registration() {
        let arena = list_arena(4);
        let head: RootCell = Arc::new(AtomicU64::new(arena.node_ref(2).raw()));
        let null: RootCell = Arc::new(AtomicU64::new(NULL));
        arena.register_global_root(head.clone());
        arena.register_global_root(head.clone());
        arena.register_global_root(null);
        assert_eq!(arena.gather_global_roots(), vec![arena.node_ref(2).raw()]);
        let other: RootCell = Arc::new(AtomicU64::new(arena.node_ref(3).raw() | 1));
        arena.register_global_root(other);
        let mut roots = arena.gather_global_roots();
        roots.sort();
        assert_eq!(roots, vec![arena.node_ref(2).raw(), arena.node_ref(3).raw()]);
    }

    #[test]
    fn concurrent_pop_push_conserves_nodes() {
        let arena = Arc::new(list_arena(64));
        std::thread::scope(|s| {
            for _ in 0..4 {
                let arena = &arena;
                s.spawn(move || {
                    for _ in 0..10_000 {
                        if let Some(n) = arena.pop_free(0) {
                            assert!(arena.release(n.raw()));
                        }
                    }
                });
            }
        });
        assert_eq!(arena.free_count(), 64);
        assert_eq!(arena.allocated_count(), 0);
    }
}
