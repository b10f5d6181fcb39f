//! How the set algorithms touch shared memory under each scheme.
//!
//! The list code is written once against [`Access`]. Each scheme decides
//! what a protected read costs, whether a read can abort the current
//! read-only period, and what happens to unlinked nodes.

use std::sync::atomic::Ordering::{Acquire, Relaxed, SeqCst};
use std::sync::Arc;

use crate::arena::{Arena, NULL};
use crate::error::{Error, Result};
use crate::runtime::{Abort, HookPoint, Label, OpSpec, ThreadHandle, LOCALS};
use crate::schemes::{EbrThread, HpThread, NoReclaim};

pub const KEY: usize = 0;
pub const NEXT: usize = 1;
/// Reference variables of every set operation: prev, cur, next, node.
pub const REFS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Fa,
    Hp,
    Ebr,
    Nr,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Fa, Scheme::Hp, Scheme::Ebr, Scheme::Nr];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Fa => "fa",
            Scheme::Hp => "hp",
            Scheme::Ebr => "ebr",
            Scheme::Nr => "nr",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

/// Per-thread memory access for the set algorithms.
pub trait Access {
    const SCHEME: Scheme;

    fn tid(&self) -> usize;

    fn arena(&self) -> &Arc<Arena>;

    /// Runs one operation. `body` is re-entered at the checkpointed label
    /// whenever it returns [`Abort::Restart`].
    fn run<T>(
        &mut self,
        entry: Label,
        locals: [u64; LOCALS],
        body: impl FnMut(&mut Self, Label) -> Result<T, Abort>,
    ) -> Result<T>;

    /// References as of the last write-only period (or restart).
    fn resume_refs(&self) -> [u64; REFS];

    fn resume_locals(&self) -> [u64; LOCALS];

    /// The link word of `node`; the target is protected in hazard slot
    /// `slot` where that means anything.
    fn read_next(&mut self, node: u64, slot: usize) -> Result<u64, Abort>;

    /// Key and link word of `node`, target protected as in `read_next`.
    fn read_node(&mut self, node: u64, slot: usize) -> Result<(i64, u64), Abort>;

    /// Whether `prev` still links to `cur`. Only schemes that protect one
    /// node at a time need to ask.
    fn still_linked(&mut self, prev: u64, cur: u64) -> bool;

    fn begin_write(&mut self, refs: [u64; REFS]) -> Result<(), Abort>;

    fn end_write(&mut self, resume: Label, locals: [u64; LOCALS]);

    fn init_node(&mut self, node: u64, key: i64, next: u64);

    fn cas_next(&mut self, node: u64, old: u64, new: u64) -> bool;

    fn alloc(&mut self) -> Result<u64, Abort>;

    /// Returns a node that was never published.
    fn release(&mut self, node: u64);

    /// Hands over a node this thread unlinked.
    fn retire(&mut self, node: u64);

    /// Restarts taken so far by this thread.
    fn restarts(&self) -> u64 {
        0
    }
}

fn cas(arena: &Arena, node: u64, old: u64, new: u64) -> bool {
    arena
        .cell(node, NEXT)
        .is_some_and(|c| c.compare_exchange(old, new, SeqCst, Acquire).is_ok())
}

fn init(arena: &Arena, node: u64, key: i64, next: u64) {
    if let (Some(k), Some(n)) = (arena.cell(node, KEY), arena.cell(node, NEXT)) {
        k.store(key as u64, Relaxed);
        n.store(next, Relaxed);
    }
}

fn refs4(refs: &[u64]) -> [u64; REFS] {
    let mut out = [NULL; REFS];
    let n = refs.len().min(REFS);
    out[..n].copy_from_slice(&refs[..n]);
    out
}

/// The tracing scheme: guarded reads, published write-only periods.
pub struct FaAccess {
    h: ThreadHandle,
    arena: Arc<Arena>,
}

impl FaAccess {
    pub fn new(h: ThreadHandle, arena: Arc<Arena>) -> Self {
        Self { h, arena }
    }

    pub fn handle(&mut self) -> &mut ThreadHandle {
        &mut self.h
    }
}

impl Access for FaAccess {
    const SCHEME: Scheme = Scheme::Fa;

    fn tid(&self) -> usize {
        self.h.tid()
    }

    fn arena(&self) -> &Arc<Arena> {
        &self.arena
    }

    fn run<T>(
        &mut self,
        entry: Label,
        locals: [u64; LOCALS],
        mut body: impl FnMut(&mut Self, Label) -> Result<T, Abort>,
    ) -> Result<T> {
        let spec = OpSpec::new(entry, REFS)?;
        self.h.op_begin(&spec, &[], locals)?;
        let mut label = entry;
        loop {
            match body(self, label) {
                Ok(v) => {
                    self.h.op_end();
                    return Ok(v);
                }
                Err(Abort::Restart) => label = self.h.restart(),
                Err(Abort::Failed(e)) => {
                    self.h.op_end();
                    return Err(e);
                }
            }
        }
    }

    fn resume_refs(&self) -> [u64; REFS] {
        refs4(self.h.resume_refs())
    }

    fn resume_locals(&self) -> [u64; LOCALS] {
        self.h.resume_locals()
    }

    #[inline]
    fn read_next(&mut self, node: u64, _slot: usize) -> Result<u64, Abort> {
        self.h.guarded_word(&self.arena, node, NEXT)
    }

    #[inline]
    fn read_node(&mut self, node: u64, _slot: usize) -> Result<(i64, u64), Abort> {
        let (k, n) = self.h.guarded_words(&self.arena, node, KEY, NEXT)?;
        Ok((k as i64, n))
    }

    #[inline]
    fn still_linked(&mut self, _prev: u64, _cur: u64) -> bool {
        true
    }

    fn begin_write(&mut self, refs: [u64; REFS]) -> Result<(), Abort> {
        self.h.begin_write_only(&refs)
    }

    fn end_write(&mut self, resume: Label, locals: [u64; LOCALS]) {
        self.h.end_write_only(resume, locals);
    }

    fn init_node(&mut self, node: u64, key: i64, next: u64) {
        self.h.note_write();
        init(&self.arena, node, key, next);
    }

    fn cas_next(&mut self, node: u64, old: u64, new: u64) -> bool {
        self.h.note_write();
        cas(&self.arena, node, old, new)
    }

    fn alloc(&mut self) -> Result<u64, Abort> {
        self.h.alloc(&self.arena).map(|n| n.raw())
    }

    fn release(&mut self, node: u64) {
        self.arena.release(node);
    }

    fn retire(&mut self, _node: u64) {}

    fn restarts(&self) -> u64 {
        self.h.restarts()
    }
}

/// Shared bookkeeping of the schemes whose operations never restart.
#[derive(Debug, Default)]
struct Straight {
    entry: Label,
    label: Label,
    refs: [u64; REFS],
    locals: [u64; LOCALS],
    ops: u64,
}

impl Straight {
    fn start(&mut self, entry: Label, locals: [u64; LOCALS]) {
        *self = Straight {
            entry,
            label: entry,
            refs: [NULL; REFS],
            locals,
            ops: self.ops,
        };
    }

    fn drive<A, T>(
        acc: &mut A,
        entry: Label,
        mut body: impl FnMut(&mut A, Label) -> Result<T, Abort>,
        label_of: impl Fn(&A) -> Label,
    ) -> Result<T> {
        let mut label = entry;
        loop {
            match body(acc, label) {
                Ok(v) => return Ok(v),
                Err(Abort::Restart) => label = label_of(acc),
                Err(Abort::Failed(e)) => return Err(e),
            }
        }
    }
}

/// Hazard pointers: every traversed node is protected before use.
pub struct HpAccess {
    t: HpThread,
    s: Straight,
}

impl HpAccess {
    pub fn new(t: HpThread) -> Self {
        Self {
            t,
            s: Straight::default(),
        }
    }

    pub fn thread(&mut self) -> &mut HpThread {
        &mut self.t
    }

    fn hook(&self) {
        if let Some(hook) = &self.t.domain().hook {
            hook(&HookPoint {
                tid: self.t.tid(),
                label: self.s.label,
                ops: self.s.ops,
            });
        }
    }
}

impl Access for HpAccess {
    const SCHEME: Scheme = Scheme::Hp;

    fn tid(&self) -> usize {
        self.t.tid()
    }

    fn arena(&self) -> &Arc<Arena> {
        self.t.arena()
    }

    fn run<T>(
        &mut self,
        entry: Label,
        locals: [u64; LOCALS],
        body: impl FnMut(&mut Self, Label) -> Result<T, Abort>,
    ) -> Result<T> {
        self.s.start(entry, locals);
        let out = Straight::drive(self, entry, body, |a| a.s.label);
        self.t.clear();
        self.s.ops += 1;
        out
    }

    fn resume_refs(&self) -> [u64; REFS] {
        self.s.refs
    }

    fn resume_locals(&self) -> [u64; LOCALS] {
        self.s.locals
    }

    fn read_next(&mut self, node: u64, slot: usize) -> Result<u64, Abort> {
        let arena = self.t.arena().clone();
        let cell = arena.cell(node, NEXT).expect("protected node");
        let v = self.t.hp_read(cell, slot);
        self.hook();
        Ok(v)
    }

    fn read_node(&mut self, node: u64, slot: usize) -> Result<(i64, u64), Abort> {
        let key = self.t.arena().load(node, KEY, Acquire) as i64;
        let next = self.read_next(node, slot)?;
        Ok((key, next))
    }

    fn still_linked(&mut self, prev: u64, cur: u64) -> bool {
        self.t.arena().load(prev, NEXT, SeqCst) == cur
    }

    fn begin_write(&mut self, refs: [u64; REFS]) -> Result<(), Abort> {
        self.s.refs = refs;
        Ok(())
    }

    fn end_write(&mut self, resume: Label, locals: [u64; LOCALS]) {
        self.s.label = resume;
        self.s.locals = locals;
    }

    fn init_node(&mut self, node: u64, key: i64, next: u64) {
        init(self.t.arena(), node, key, next);
    }

    fn cas_next(&mut self, node: u64, old: u64, new: u64) -> bool {
        cas(self.t.arena(), node, old, new)
    }

    fn alloc(&mut self) -> Result<u64, Abort> {
        self.t.alloc().map_err(Abort::Failed)
    }

    fn release(&mut self, node: u64) {
        self.t.arena().release(node);
    }

    fn retire(&mut self, node: u64) {
        self.t.retire(node);
    }
}

/// Epoch-based reclamation: plain reads inside an announced epoch.
pub struct EbrAccess {
    t: EbrThread,
    s: Straight,
}

impl EbrAccess {
    pub fn new(t: EbrThread) -> Self {
        Self {
            t,
            s: Straight::default(),
        }
    }

    pub fn thread(&mut self) -> &mut EbrThread {
        &mut self.t
    }
}

impl Access for EbrAccess {
    const SCHEME: Scheme = Scheme::Ebr;

    fn tid(&self) -> usize {
        self.t.tid()
    }

    fn arena(&self) -> &Arc<Arena> {
        self.t.arena()
    }

    fn run<T>(
        &mut self,
        entry: Label,
        locals: [u64; LOCALS],
        body: impl FnMut(&mut Self, Label) -> Result<T, Abort>,
    ) -> Result<T> {
        self.s.start(entry, locals);
        self.t.ebr_enter();
        let out = Straight::drive(self, entry, body, |a| a.s.label);
        self.t.ebr_exit();
        self.s.ops += 1;
        out
    }

    fn resume_refs(&self) -> [u64; REFS] {
        self.s.refs
    }

    fn resume_locals(&self) -> [u64; LOCALS] {
        self.s.locals
    }

    fn read_next(&mut self, node: u64, _slot: usize) -> Result<u64, Abort> {
        let v = self.t.arena().load(node, NEXT, Acquire);
        if let Some(hook) = &self.t.domain().hook {
            hook(&HookPoint {
                tid: self.t.tid(),
                label: self.s.label,
                ops: self.s.ops,
            });
        }
        Ok(v)
    }

    fn read_node(&mut self, node: u64, slot: usize) -> Result<(i64, u64), Abort> {
        let key = self.t.arena().load(node, KEY, Acquire) as i64;
        Ok((key, self.read_next(node, slot)?))
    }

    fn still_linked(&mut self, _prev: u64, _cur: u64) -> bool {
        true
    }

    fn begin_write(&mut self, refs: [u64; REFS]) -> Result<(), Abort> {
        self.s.refs = refs;
        Ok(())
    }

    fn end_write(&mut self, resume: Label, locals: [u64; LOCALS]) {
        self.s.label = resume;
        self.s.locals = locals;
    }

    fn init_node(&mut self, node: u64, key: i64, next: u64) {
        init(self.t.arena(), node, key, next);
    }

    fn cas_next(&mut self, node: u64, old: u64, new: u64) -> bool {
        cas(self.t.arena(), node, old, new)
    }

    /// On an empty pool the thread unpins while it waits for epochs to
    /// pass (its own announcement would otherwise hold back everything it
    /// retired this epoch), then searches again carrying the new node.
    fn alloc(&mut self) -> Result<u64, Abort> {
        if let Some(n) = self.t.arena().pop_free(0) {
            return Ok(n.raw());
        }
        self.t.ebr_exit();
        let node = self.t.alloc();
        self.t.ebr_enter();
        self.s.refs = [NULL, NULL, NULL, node.map_err(Abort::Failed)?];
        self.s.label = self.s.entry;
        Err(Abort::Restart)
    }

    fn release(&mut self, node: u64) {
        self.t.arena().release(node);
    }

    fn retire(&mut self, node: u64) {
        self.t.ebr_retire(node);
    }
}

/// No reclamation at all.
pub struct NrAccess {
    nr: NoReclaim,
    tid: usize,
    s: Straight,
}

impl NrAccess {
    pub fn new(nr: NoReclaim, tid: usize) -> Self {
        Self {
            nr,
            tid,
            s: Straight::default(),
        }
    }
}

impl Access for NrAccess {
    const SCHEME: Scheme = Scheme::Nr;

    fn tid(&self) -> usize {
        self.tid
    }

    fn arena(&self) -> &Arc<Arena> {
        self.nr.arena()
    }

    fn run<T>(
        &mut self,
        entry: Label,
        locals: [u64; LOCALS],
        body: impl FnMut(&mut Self, Label) -> Result<T, Abort>,
    ) -> Result<T> {
        self.s.start(entry, locals);
        let out = Straight::drive(self, entry, body, |a| a.s.label);
        self.s.ops += 1;
        out
    }

    fn resume_refs(&self) -> [u64; REFS] {
        self.s.refs
    }

    fn resume_locals(&self) -> [u64; LOCALS] {
        self.s.locals
    }

    #[inline]
    fn read_next(&mut self, node: u64, _slot: usize) -> Result<u64, Abort> {
        Ok(self.nr.arena().load(node, NEXT, Acquire))
    }

    #[inline]
    fn read_node(&mut self, node: u64, _slot: usize) -> Result<(i64, u64), Abort> {
        let a = self.nr.arena();
        Ok((a.load(node, KEY, Acquire) as i64, a.load(node, NEXT, Acquire)))
    }

    fn still_linked(&mut self, _prev: u64, _cur: u64) -> bool {
        true
    }

    fn begin_write(&mut self, refs: [u64; REFS]) -> Result<(), Abort> {
        self.s.refs = refs;
        Ok(())
    }

    fn end_write(&mut self, resume: Label, locals: [u64; LOCALS]) {
        self.s.label = resume;
        self.s.locals = locals;
    }

    fn init_node(&mut self, node: u64, key: i64, next: u64) {
        init(self.nr.arena(), node, key, next);
    }

    fn cas_next(&mut self, node: u64, old: u64, new: u64) -> bool {
        cas(self.nr.arena(), node, old, new)
    }

    fn alloc(&mut self) -> Result<u64, Abort> {
        self.nr.nr_alloc().map_err(Abort::Failed)
    }

    fn release(&mut self, node: u64) {
        self.nr.nr_free(node);
    }

    fn retire(&mut self, node: u64) {
        self.nr.nr_free(node);
    }
}
