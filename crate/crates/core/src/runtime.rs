//! Per-thread protocol of the tracing reclaimer.
//!
//! Every registered thread owns a [`ThreadRecord`]: one dirty/phase word and
//! two frames of seven reference slots, laid out over two cache lines. An
//! operation alternates between read-only periods, in which it loads shared
//! memory without writing it, and write-only periods, in which it writes
//! shared memory without loading new references.
//!
//! * Reads are certified by [`ThreadHandle::validate_read`]. If a
//!   reclamation phase has signalled the thread in the meantime the read
//!   might have come from a reclaimed node, so the operation restarts from
//!   its last checkpoint instead of using the value.
//! * [`ThreadHandle::begin_write_only`] publishes the operation's live
//!   references into the inactive frame before any shared write happens.
//!   Those references are the roots the tracer gathers from this thread,
//!   and the references the operation resumes with after a restart.
//!
//! Restarts are ordinary control flow: the operation body returns
//! [`Abort::Restart`] and [`ThreadHandle::run_operation`] re-dispatches it
//! at the checkpointed [`Label`].

use std::fmt;
use std::sync::atomic::Ordering::{AcqRel, Acquire, Relaxed, Release, SeqCst};
use std::sync::atomic::{fence, AtomicU64, AtomicUsize};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::arena::{Arena, NodeLayout, NodeRef, MAX_ARENAS, NULL, POISON};
use crate::error::{Error, Result};
use crate::tracer::{clear_tag, DONE, PHASE_RING};

/// Reference slots per frame.
pub const SLOTS: usize = 7;
/// Non-reference locals kept in a checkpoint.
pub const LOCALS: usize = 4;
/// Frame 1, slot 0 holds this value while the thread is between operations.
pub const MARKER: u64 = u64::MAX;
/// Arbiter value selecting frame 0; the other value is `FRAME0 ^ 8`.
pub const FRAME0: usize = 1;

const DIRTY: usize = 0;
const MARKER_WORD: usize = 9;
const PHASE_MAX: u64 = (1 << 56) - 1;

/// Packs a dirty flag and a phase index into one word.
#[inline]
pub const fn encode(dirty: bool, phase: u64) -> u64 {
    (phase << 8) | dirty as u64
}

/// Inverse of [`encode`].
#[inline]
pub const fn decode(word: u64) -> (bool, u64) {
    (word & 1 != 0, word >> 8)
}

/// Frame index (0 or 1) named by an arbiter value.
#[inline]
pub const fn frame_index(arbiter: usize) -> usize {
    arbiter >> 3
}

/// Shared per-thread state: word 0 is the dirty/phase word, words 1..=7 are
/// frame 0 and words 9..=15 are frame 1. Slot `i` of the frame selected by
/// arbiter `a` is word `a + i`.
#[repr(C, align(64))]
pub struct ThreadRecord {
    words: [AtomicU64; 16],
}

impl ThreadRecord {
    fn new() -> Self {
        Self {
            words: std::array::from_fn(|i| AtomicU64::new(if i == MARKER_WORD { MARKER } else { 0 })),
        }
    }

    pub fn dirty_phase(&self) -> (bool, u64) {
        decode(self.words[DIRTY].load(Acquire))
    }

    /// Slot `i` of the frame selected by `arbiter`.
    pub fn slot(&self, arbiter: usize, i: usize) -> u64 {
        self.words[arbiter + i].load(Acquire)
    }

    pub fn holds_marker(&self) -> bool {
        self.words[MARKER_WORD].load(Acquire) == MARKER
    }

    /// Sets the dirty flag for `phase` unless the word already carries that
    /// phase or a later one. Returns `true` if this call wrote the word.
    fn signal(&self, phase: u64) -> bool {
        let word = &self.words[DIRTY];
        let mut cur = word.load(SeqCst);
        while decode(cur).1 < phase {
            match word.compare_exchange(cur, encode(true, phase), SeqCst, SeqCst) {
                Ok(_) => return true,
                Err(actual) => cur = actual,
            }
        }
        false
    }

    fn roots_into(&self, out: &mut Vec<u64>) {
        if self.holds_marker() {
            return;
        }
        for w in (1..=SLOTS).chain(9..9 + SLOTS) {
            let v = self.words[w].load(Acquire);
            if v != NULL && v != MARKER {
                out.push(clear_tag(v));
            }
        }
    }
}

/// Resume point of an operation body.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Label(pub u16);

/// Static description of a restartable operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpSpec {
    entry: Label,
    refs: usize,
}

impl OpSpec {
    /// An operation entering at `entry` with `refs` reference variables.
    pub fn new(entry: Label, refs: usize) -> Result<Self> {
        if refs > SLOTS {
            return Err(Error::TooManyRefs(refs));
        }
        Ok(Self { entry, refs })
    }

    pub fn entry(&self) -> Label {
        self.entry
    }

    pub fn refs(&self) -> usize {
        self.refs
    }
}

/// The dirty flag was observed set: the current read-only period must be
/// abandoned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Restart;

/// Early exit from an operation body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Abort {
    Restart,
    Failed(Error),
}

impl From<Restart> for Abort {
    fn from(_: Restart) -> Self {
        Abort::Restart
    }
}

impl From<Error> for Abort {
    fn from(e: Error) -> Self {
        Abort::Failed(e)
    }
}

/// Where an instrumented thread stands when the hook fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookPoint {
    pub tid: usize,
    pub label: Label,
    /// Operations this thread has completed so far.
    pub ops: u64,
}

pub type Hook = Arc<dyn Fn(&HookPoint) + Send + Sync>;

/// Deliberately broken protocol steps, used to check that the verification
/// harness notices them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    /// `validate_read` never looks at the dirty flag.
    pub skip_validate: bool,
    /// Frame stores are left in an emulated store buffer past the dirty
    /// check and only become visible at the next publication.
    pub skip_fence: bool,
    /// `op_end` leaves the previous frames visible.
    pub skip_marker: bool,
}

/// Test instrumentation. Costs nothing when absent from the configuration.
#[derive(Clone, Default)]
pub struct Instrumentation {
    /// Labels at which restarts are injected, one label per operation in
    /// rotation. Empty disables injection.
    pub inject: Vec<Label>,
    /// Called after every successful `validate_read`.
    pub hook: Option<Hook>,
    pub faults: Faults,
    /// Upper bound on certified reads per operation.
    pub step_budget: Option<u64>,
    /// Count certified values equal to [`POISON`].
    pub audit: bool,
}

impl fmt::Debug for Instrumentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Instrumentation")
            .field("inject", &self.inject)
            .field("hook", &self.hook.is_some())
            .field("faults", &self.faults)
            .field("step_budget", &self.step_budget)
            .field("audit", &self.audit)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub max_threads: usize,
    /// Fill swept nodes with [`POISON`].
    pub poison: bool,
    pub instrument: Option<Instrumentation>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            max_threads: 64,
            poison: false,
            instrument: None,
        }
    }
}

/// Counters maintained by instrumented runtimes.
#[derive(Debug, Default)]
pub(crate) struct Counters {
    poison_certified: AtomicU64,
    frame_violations: AtomicU64,
    readonly_writes: AtomicU64,
    writes: AtomicU64,
    injected: AtomicU64,
    restarts: AtomicU64,
    budget_exceeded: AtomicU64,
    pub(crate) signals: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CounterSnapshot {
    /// Certified reads that returned the poison pattern.
    pub poison_certified: u64,
    /// Publications after which the shared frame did not match the
    /// references a restart would resume with.
    pub frame_violations: u64,
    /// Shared writes issued outside a write-only period.
    pub readonly_writes: u64,
    pub writes: u64,
    pub injected_restarts: u64,
    pub restarts: u64,
    pub budget_exceeded: u64,
    /// Successful dirty-flag updates by phase initiators.
    pub signals: u64,
}

/// Global state of the reclaimer: thread registry, arenas and phase word.
pub struct Runtime {
    max_threads: usize,
    poison: bool,
    records: Box<[ThreadRecord]>,
    registered: AtomicUsize,
    arenas: RwLock<Vec<Arc<Arena>>>,
    /// `(phase << 2) | status`.
    pub(crate) state: AtomicU64,
    pub(crate) phases_completed: AtomicU64,
    /// `(phase << 32) | reclaimed`, indexed by `phase % PHASE_RING`.
    pub(crate) phase_reclaimed: [AtomicU64; PHASE_RING],
    pub(crate) total_reclaimed: AtomicU64,
    pub(crate) sweep_ticket: AtomicUsize,
    instrument: Option<Instrumentation>,
    pub(crate) counters: Counters,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("max_threads", &self.max_threads)
            .field("registered", &self.registered())
            .field("phase", &self.phase())
            .finish_non_exhaustive()
    }
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Result<Arc<Self>> {
        if config.max_threads == 0 {
            return Err(Error::Config("max_threads must be at least 1".into()));
        }
        Ok(Arc::new(Self {
            max_threads: config.max_threads,
            poison: config.poison,
            records: (0..config.max_threads).map(|_| ThreadRecord::new()).collect(),
            registered: AtomicUsize::new(0),
            arenas: RwLock::new(Vec::new()),
            state: AtomicU64::new(DONE),
            phases_completed: AtomicU64::new(0),
            phase_reclaimed: std::array::from_fn(|_| AtomicU64::new(0)),
            total_reclaimed: AtomicU64::new(0),
            sweep_ticket: AtomicUsize::new(0),
            instrument: config.instrument,
            counters: Counters::default(),
        }))
    }

    /// Creates an arena whose nodes are traced by this runtime. Intended for
    /// the setup period, before worker threads start.
    pub fn add_arena(&self, capacity: usize, layout: NodeLayout) -> Result<Arc<Arena>> {
        let mut arenas = self.arenas.write();
        if arenas.len() >= MAX_ARENAS {
            return Err(Error::TooManyArenas);
        }
        let arena = Arc::new(Arena::with_id(arenas.len(), capacity, layout)?);
        arena.set_poison(self.poison);
        arenas.push(arena.clone());
        Ok(arena)
    }

    pub(crate) fn arenas(&self) -> Vec<Arc<Arena>> {
        self.arenas.read().clone()
    }

    pub fn max_threads(&self) -> usize {
        self.max_threads
    }

    pub fn registered(&self) -> usize {
        self.registered.load(SeqCst).min(self.max_threads)
    }

    pub fn record(&self, tid: usize) -> &ThreadRecord {
        &self.records[tid]
    }

    /// Index of the most recently started phase.
    pub fn phase(&self) -> u64 {
        self.state.load(SeqCst) >> 2
    }

    pub fn phases_completed(&self) -> u64 {
        self.phases_completed.load(Acquire)
    }

    pub fn total_reclaimed(&self) -> u64 {
        self.total_reclaimed.load(Acquire)
    }

    pub fn counters(&self) -> CounterSnapshot {
        let c = &self.counters;
        CounterSnapshot {
            poison_certified: c.poison_certified.load(Relaxed),
            frame_violations: c.frame_violations.load(Relaxed),
            readonly_writes: c.readonly_writes.load(Relaxed),
            writes: c.writes.load(Relaxed),
            injected_restarts: c.injected.load(Relaxed),
            restarts: c.restarts.load(Relaxed),
            budget_exceeded: c.budget_exceeded.load(Relaxed),
            signals: c.signals.load(Relaxed),
        }
    }

    /// Registers the calling thread. Threads never unregister.
    pub fn register(self: &Arc<Self>) -> Result<ThreadHandle> {
        let tid = self
            .registered
            .fetch_update(SeqCst, SeqCst, |n| (n < self.max_threads).then_some(n + 1))
            .map_err(|_| Error::RegistryFull(self.max_threads))?;
        // A phase started after this load sees the new registration and
        // signals it; one already under way may have missed it.
        let state = self.state.load(SeqCst);
        let (phase, status) = (state >> 2, state & 3);
        let rec = &self.records[tid];
        if status != DONE {
            rec.signal(phase);
        } else {
            let _ = rec.words[DIRTY].fetch_max(encode(false, phase), SeqCst);
        }
        Ok(ThreadHandle::new(self.clone(), tid))
    }

    /// Starts a new phase unless one is already in flight, and signals every
    /// registered thread. Returns the index of the phase in flight.
    pub fn init_reclamation(&self) -> u64 {
        let mut cur = self.state.load(SeqCst);
        loop {
            let (phase, status) = (cur >> 2, cur & 3);
            if status != DONE {
                return phase;
            }
            assert!(phase < PHASE_MAX, "phase index overflow");
            let next = (phase + 1) << 2;
            match self.state.compare_exchange(cur, next, SeqCst, SeqCst) {
                Ok(_) => {
                    self.signal_all(phase + 1);
                    return phase + 1;
                }
                Err(actual) => cur = actual,
            }
        }
    }

    pub(crate) fn signal_all(&self, phase: u64) {
        for rec in &self.records[..self.registered()] {
            if rec.signal(phase) {
                self.counters.signals.fetch_add(1, Relaxed);
            }
        }
    }

    /// Untagged, non-null references published by threads that are inside
    /// an operation.
    pub fn gather_local_roots(&self) -> Vec<u64> {
        fence(SeqCst);
        let mut roots = Vec::new();
        for rec in &self.records[..self.registered()] {
            rec.roots_into(&mut roots);
        }
        roots
    }

    fn instrumented(&self) -> Option<&Instrumentation> {
        self.instrument.as_ref()
    }
}

#[derive(Debug, Default)]
struct Injector {
    target: Option<Label>,
    nth: u32,
    countdown: u32,
    fired: bool,
}

/// A registered thread. Not `Sync`: all methods take `&mut self`.
pub struct ThreadHandle {
    rt: Arc<Runtime>,
    tid: usize,
    arbiter: usize,
    nrefs: usize,
    live: [u64; SLOTS],
    inputs: [u64; SLOTS],
    locals: [u64; LOCALS],
    resume: Label,
    in_op: bool,
    published: bool,
    write_only: bool,
    zero_phases: u32,
    ops: u64,
    restarts: u64,
    instrumented: bool,
    steps: u64,
    injector: Injector,
    /// Frame stores held back by the `skip_fence` fault: (arbiter, slots).
    buffered: Option<(usize, [u64; SLOTS])>,
}

impl fmt::Debug for ThreadHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ThreadHandle")
            .field("tid", &self.tid)
            .field("arbiter", &self.arbiter)
            .field("in_op", &self.in_op)
            .field("resume", &self.resume)
            .finish_non_exhaustive()
    }
}

impl ThreadHandle {
    fn new(rt: Arc<Runtime>, tid: usize) -> Self {
        let instrumented = rt.instrument.is_some();
        Self {
            rt,
            tid,
            arbiter: FRAME0,
            nrefs: 0,
            live: [NULL; SLOTS],
            inputs: [NULL; SLOTS],
            locals: [0; LOCALS],
            resume: Label(0),
            in_op: false,
            published: false,
            write_only: false,
            zero_phases: 0,
            ops: 0,
            restarts: 0,
            instrumented,
            steps: 0,
            injector: Injector::default(),
            buffered: None,
        }
    }

    pub fn tid(&self) -> usize {
        self.tid
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.rt
    }

    pub fn arbiter(&self) -> usize {
        self.arbiter
    }

    pub fn in_operation(&self) -> bool {
        self.in_op
    }

    pub fn in_write_only(&self) -> bool {
        self.write_only
    }

    pub fn ops(&self) -> u64 {
        self.ops
    }

    pub fn restarts(&self) -> u64 {
        self.restarts
    }

    /// Reference variables as of the last publication or restart.
    pub fn resume_refs(&self) -> &[u64] {
        &self.live[..self.nrefs]
    }

    /// Non-reference locals of the current checkpoint.
    pub fn resume_locals(&self) -> [u64; LOCALS] {
        self.locals
    }

    pub fn checkpoint(&self) -> ([u64; LOCALS], Label) {
        (self.locals, self.resume)
    }

    #[inline]
    fn rec(&self) -> &ThreadRecord {
        &self.rt.records[self.tid]
    }

    #[inline]
    fn dirty(&self) -> bool {
        self.rec().words[DIRTY].load(Acquire) & 1 != 0
    }

    /// Opens an operation: resets the arbiter, publishes the reference
    /// inputs in a dummy write-only period and checkpoints `(locals, entry)`.
    pub fn op_begin(&mut self, spec: &OpSpec, inputs: &[u64], locals: [u64; LOCALS]) -> Result<()> {
        if self.in_op {
            return Err(Error::NestedOperation);
        }
        if inputs.len() > spec.refs {
            return Err(Error::TooManyRefs(inputs.len()));
        }
        self.in_op = true;
        self.arbiter = FRAME0;
        self.nrefs = spec.refs;
        self.inputs = [NULL; SLOTS];
        self.inputs[..inputs.len()].copy_from_slice(inputs);
        self.live = [NULL; SLOTS];
        self.published = false;
        self.write_only = false;
        self.steps = 0;
        self.locals = locals;
        self.resume = spec.entry;
        self.arm_injector();
        if inputs.iter().any(|&r| r != NULL) {
            let inputs = self.inputs;
            while self.begin_write_only(&inputs[..self.nrefs]).is_err() {
                self.help_and_clear();
            }
            self.write_only = false;
            self.published = true;
        }
        self.live = self.inputs;
        Ok(())
    }

    /// Closes the operation and hides this thread's frames from the tracer.
    pub fn op_end(&mut self) {
        debug_assert!(self.in_op, "op_end outside an operation");
        self.flush_buffered();
        let skip = self.rt.instrumented().is_some_and(|i| i.faults.skip_marker);
        if !skip {
            self.rec().words[MARKER_WORD].store(MARKER, Release);
        }
        self.in_op = false;
        self.write_only = false;
        self.ops += 1;
    }

    /// Publishes `refs` (at most [`SLOTS`]) into the inactive frame, then
    /// checks the dirty flag. On success the arbiter flips and a write-only
    /// period begins.
    pub fn begin_write_only(&mut self, refs: &[u64]) -> Result<(), Abort> {
        debug_assert!(self.in_op, "begin_write_only outside an operation");
        assert!(refs.len() <= SLOTS, "too many references");
        let mut frame = [NULL; SLOTS];
        frame[..refs.len()].copy_from_slice(refs);
        let next = self.arbiter ^ 8;
        if self.instrumented && self.rt.instrument.as_ref().is_some_and(|i| i.faults.skip_fence) {
            self.flush_buffered();
            self.buffered = Some((next, frame));
        } else {
            let rec = &self.rt.records[self.tid];
            for (i, &v) in frame.iter().enumerate() {
                rec.words[next + i].store(v, Relaxed);
            }
            fence(SeqCst);
        }
        if self.dirty() || (self.instrumented && self.inject_now()) {
            return Err(Abort::Restart);
        }
        self.arbiter = next;
        self.live = frame;
        self.write_only = true;
        self.published = true;
        if self.instrumented {
            self.check_frame();
        }
        Ok(())
    }

    /// Ends a write-only period and checkpoints `(locals, resume)`.
    pub fn end_write_only(&mut self, resume: Label, locals: [u64; LOCALS]) {
        self.locals = locals;
        self.resume = resume;
        self.write_only = false;
        if self.instrumented && self.injector.target == Some(resume) && !self.injector.fired {
            self.injector.countdown = self.injector.nth;
        }
    }

    /// Certifies all values loaded since the previous certification.
    #[inline]
    pub fn validate_read(&mut self) -> Result<(), Abort> {
        fence(Acquire);
        if self.instrumented {
            return self.validate_instrumented();
        }
        if self.dirty() {
            return Err(Abort::Restart);
        }
        Ok(())
    }

    #[cold]
    fn validate_instrumented(&mut self) -> Result<(), Abort> {
        let rt = self.rt.clone();
        let instr = rt.instrumented().expect("instrumented runtime");
        if !instr.faults.skip_validate && (self.dirty() || self.inject_now()) {
            return Err(Abort::Restart);
        }
        self.steps += 1;
        if let Some(budget) = instr.step_budget {
            if self.steps > budget {
                rt.counters.budget_exceeded.fetch_add(1, Relaxed);
                return Err(Abort::Failed(Error::StepBudget));
            }
        }
        if let Some(hook) = &instr.hook {
            hook(&HookPoint {
                tid: self.tid,
                label: self.resume,
                ops: self.ops,
            });
        }
        Ok(())
    }

    #[inline]
    fn certified(&self, v: u64) -> u64 {
        if self.instrumented && v == POISON && self.rt.instrumented().is_some_and(|i| i.audit) {
            self.rt.counters.poison_certified.fetch_add(1, Relaxed);
        }
        v
    }

    /// Relaxed load of `cell` followed by [`ThreadHandle::validate_read`].
    #[inline]
    pub fn guarded_load(&mut self, cell: &AtomicU64) -> Result<u64, Abort> {
        let v = cell.load(Relaxed);
        self.validate_read()?;
        Ok(self.certified(v))
    }

    /// Two loads certified by a single validation.
    #[inline]
    pub fn guarded_load_pair(&mut self, a: &AtomicU64, b: &AtomicU64) -> Result<(u64, u64), Abort> {
        let x = a.load(Relaxed);
        let y = b.load(Relaxed);
        self.validate_read()?;
        Ok((self.certified(x), self.certified(y)))
    }

    /// Guarded load of word `word` of node `raw`. References that do not
    /// resolve read as [`POISON`].
    #[inline]
    pub fn guarded_word(&mut self, arena: &Arena, raw: u64, word: usize) -> Result<u64, Abort> {
        let v = arena.load(raw, word, Relaxed);
        self.validate_read()?;
        Ok(self.certified(v))
    }

    /// Guarded load of two words of the same node.
    #[inline]
    pub fn guarded_words(
        &mut self,
        arena: &Arena,
        raw: u64,
        a: usize,
        b: usize,
    ) -> Result<(u64, u64), Abort> {
        let x = arena.load(raw, a, Relaxed);
        let y = arena.load(raw, b, Relaxed);
        self.validate_read()?;
        Ok((self.certified(x), self.certified(y)))
    }

    /// Abandons the current read-only period: helps the signalled phase,
    /// clears the dirty flag and restores the checkpointed state. Returns
    /// the label to resume at.
    pub fn restart(&mut self) -> Label {
        self.help_and_clear();
        self.restarts += 1;
        if self.instrumented {
            self.rt.counters.restarts.fetch_add(1, Relaxed);
        }
        self.write_only = false;
        if self.published {
            for i in 0..SLOTS {
                self.live[i] = self.own_slot(self.arbiter, i);
            }
        } else {
            self.live = self.inputs;
        }
        self.resume
    }

    fn help_and_clear(&mut self) {
        let rt = self.rt.clone();
        let word = &rt.records[self.tid].words[DIRTY];
        let mut cur = word.load(Acquire);
        loop {
            let (dirty, phase) = decode(cur);
            if !dirty {
                return;
            }
            rt.help(phase);
            match word.compare_exchange(cur, encode(false, phase), AcqRel, Acquire) {
                Ok(_) => return,
                Err(actual) => cur = actual,
            }
        }
    }

    /// What this thread sees in its own frame, store buffer included.
    fn own_slot(&self, arbiter: usize, i: usize) -> u64 {
        match self.buffered {
            Some((a, frame)) if a == arbiter => frame[i],
            _ => self.rec().words[arbiter + i].load(Relaxed),
        }
    }

    fn flush_buffered(&mut self) {
        if let Some((arbiter, frame)) = self.buffered.take() {
            let rec = &self.rt.records[self.tid];
            for (i, &v) in frame.iter().enumerate() {
                rec.words[arbiter + i].store(v, Relaxed);
            }
        }
    }

    /// The shared frame must hold exactly what a restart would restore.
    fn check_frame(&self) {
        let rec = self.rec();
        let ok = (0..SLOTS).all(|i| rec.words[self.arbiter + i].load(Relaxed) == self.live[i]);
        if !ok {
            self.rt.counters.frame_violations.fetch_add(1, Relaxed);
        }
    }

    fn arm_injector(&mut self) {
        if !self.instrumented {
            return;
        }
        let labels = match self.rt.instrumented() {
            Some(i) if !i.inject.is_empty() => &i.inject,
            _ => return,
        };
        let n = labels.len() as u64;
        let target = labels[(self.ops % n) as usize];
        let nth = 1 + ((self.ops / n) % 3) as u32;
        self.injector = Injector {
            target: Some(target),
            nth,
            countdown: if target == self.resume { nth } else { 0 },
            fired: false,
        };
    }

    fn inject_now(&mut self) -> bool {
        let inj = &mut self.injector;
        if inj.fired || inj.countdown == 0 {
            return false;
        }
        inj.countdown -= 1;
        if inj.countdown == 0 {
            inj.fired = true;
            self.rt.counters.injected.fetch_add(1, Relaxed);
            return true;
        }
        false
    }

    /// Records a shared write issued by a data structure.
    #[inline]
    pub fn note_write(&self) {
        if self.instrumented {
            self.rt.counters.writes.fetch_add(1, Relaxed);
            if !self.write_only {
                self.rt.counters.readonly_writes.fetch_add(1, Relaxed);
            }
        }
    }

    /// Drives `body` from `spec.entry()` to completion, re-entering it at
    /// the checkpointed label after every restart.
    pub fn run_operation<T>(
        &mut self,
        spec: &OpSpec,
        inputs: &[u64],
        locals: [u64; LOCALS],
        mut body: impl FnMut(&mut Self, Label) -> Result<T, Abort>,
    ) -> Result<T> {
        self.op_begin(spec, inputs, locals)?;
        let mut label = spec.entry;
        loop {
            match body(self, label) {
                Ok(v) => {
                    self.op_end();
                    return Ok(v);
                }
                Err(Abort::Restart) => label = self.restart(),
                Err(Abort::Failed(e)) => {
                    self.op_end();
                    return Err(e);
                }
            }
        }
    }

    /// Allocates a node from `arena` inside a read-only period. When the
    /// pool is empty a reclamation phase runs and the period restarts, so
    /// the retry happens with fresh references.
    pub fn alloc(&mut self, arena: &Arena) -> Result<NodeRef, Abort> {
        let rt = &self.rt;
        if let Some(node) = arena.pop_then(|| rt.phase()) {
            self.zero_phases = 0;
            return Ok(node);
        }
        if !self.in_op {
            return self.alloc_outside(arena).map_err(Abort::Failed);
        }
        self.note_phase(arena)?;
        Err(Abort::Restart)
    }

    fn note_phase(&mut self, arena: &Arena) -> Result<(), Abort> {
        let reclaimed = self.rt.reclamation_phase();
        if reclaimed == 0 {
            self.zero_phases += 1;
            if self.zero_phases >= 2 {
                self.zero_phases = 0;
                return Err(Abort::Failed(Error::Exhausted {
                    capacity: arena.capacity(),
                }));
            }
        } else {
            self.zero_phases = 0;
        }
        Ok(())
    }

    fn alloc_outside(&mut self, arena: &Arena) -> Result<NodeRef> {
        loop {
            let rt = &self.rt;
            if let Some(node) = arena.pop_then(|| rt.phase()) {
                self.zero_phases = 0;
                return Ok(node);
            }
            match self.note_phase(arena) {
                Ok(()) => {}
                Err(Abort::Failed(e)) => return Err(e),
                Err(Abort::Restart) => unreachable!(),
            }
        }
    }

    /// Replaces the value of `cell` with `new` and returns the previous
    /// value, built from a certified read and a compare-and-swap.
    pub fn emulated_swap(&mut self, cell: &AtomicU64, new: u64) -> Result<u64> {
        const ENTRY: Label = Label(0);
        const AFTER_CAS: Label = Label(1);
        let spec = OpSpec::new(ENTRY, 2)?;
        self.run_operation(&spec, &[new], [0; LOCALS], |h, mut label| loop {
            match label {
                AFTER_CAS => {
                    if h.resume_locals()[0] == 1 {
                        return Ok(h.resume_refs()[1]);
                    }
                    label = ENTRY;
                }
                _ => {
                    let new = h.resume_refs()[0];
                    let cur = h.guarded_load(cell)?;
                    h.begin_write_only(&[new, cur])?;
                    let ok = cell.compare_exchange(cur, new, AcqRel, Acquire).is_ok();
                    h.note_write();
                    h.end_write_only(AFTER_CAS, [ok as u64, 0, 0, 0]);
                    label = AFTER_CAS;
                }
            }
        })
    }
}

impl Drop for ThreadHandle {
    fn drop(&mut self) {
        if self.in_op {
            self.op_end();
        }
    }
}
