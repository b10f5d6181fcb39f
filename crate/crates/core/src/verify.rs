//! Correctness and progress checks.
//!
//! * [`alternation_check`] replays per-key insert/remove results against
//!   their real-time intervals.
//! * [`stuck_thread_progress`] parks one worker inside an operation and
//!   watches whether reclamation keeps going without it.
//! * [`poison_audit`] runs the tracing scheme with swept nodes poisoned and
//!   counts certified reads that saw the pattern.
//! * [`swap_chain_check`] and [`trace_oracle`] check the swap helper and
//!   the tracer against brute-force models.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::{Relaxed, SeqCst}};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arena::{Arena, NodeLayout, NULL, WORD};
use crate::error::{Error, Result};
use crate::harness::{prefill, with_rig, Mix, OpKind, Rig, RigOptions, RigUser, SetUnderTest, Setup, Structure, Workload};
use crate::runtime::{Faults, Hook, HookPoint, Instrumentation, Label, OpSpec, Runtime, RuntimeConfig, LOCALS};
use crate::sets::list::{self, LABELS};
use crate::sets::{Access, ListSet, Scheme, Variant};
use crate::tracer::{clear_tag, TAG};

/// Global ticket clock for event timestamps.
#[derive(Debug, Default)]
pub struct Clock(AtomicU64);

impl Clock {
    pub fn tick(&self) -> u64 {
        self.0.fetch_add(1, SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub tid: usize,
    pub op: OpKind,
    pub key: i64,
    pub result: bool,
    pub start: u64,
    pub end: u64,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            OpKind::Contains => "contains",
            OpKind::Insert => "insert",
            OpKind::Remove => "remove",
        };
        write!(
            f,
            "t{} {op}({}) = {} @[{}, {}]",
            self.tid, self.key, self.result, self.start, self.end
        )
    }
}

/// Per-thread, program-ordered event lists.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EventLog {
    pub threads: Vec<Vec<Event>>,
}

impl EventLog {
    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.threads.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.threads.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub key: i64,
    pub earlier: Option<Event>,
    pub later: Option<Event>,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "key {}: {}", self.key, self.reason)?;
        if let Some(e) = &self.earlier {
            write!(f, "; earlier {e}")?;
        }
        if let Some(e) = &self.later {
            write!(f, "; later {e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlternationVerdict {
    pub pass: bool,
    pub keys: usize,
    /// Successful inserts and removes examined.
    pub updates: usize,
    pub violation: Option<Violation>,
}

/// Checks that, per key, successful inserts and removes can be ordered
/// consistently with their intervals so that they alternate, starting
/// from `initial` membership and ending at `fin`.
pub fn alternation_check(log: &EventLog, initial: &BTreeSet<i64>, fin: &BTreeSet<i64>) -> AlternationVerdict {
    let mut per_key: std::collections::BTreeMap<i64, Vec<Event>> = Default::default();
    for e in log.events().filter(|e| e.result && e.op != OpKind::Contains) {
        per_key.entry(e.key).or_default().push(*e);
    }
    for &k in initial.union(fin) {
        per_key.entry(k).or_default();
    }
    let keys = per_key.len();
    let mut updates = 0;
    for (key, evs) in per_key {
        updates += evs.len();
        if let Err(v) = check_key(key, evs, initial.contains(&key), fin.contains(&key)) {
            return AlternationVerdict {
                pass: false,
                keys,
                updates,
                violation: Some(v),
            };
        }
    }
    AlternationVerdict {
        pass: true,
        keys,
        updates,
        violation: None,
    }
}

fn check_key(key: i64, mut evs: Vec<Event>, mut present: bool, fin: bool) -> Result<(), Violation> {
    evs.sort_by_key(|e| (e.start, e.end));
    let mut rem: VecDeque<Event> = evs.into();
    let mut last: Option<Event> = None;
    while !rem.is_empty() {
        // Events that may take effect next: those starting before the
        // earliest remaining end.
        let mut min_end = u64::MAX;
        let mut min_at = 0;
        let mut window = 0;
        for (i, e) in rem.iter().enumerate() {
            if e.start >= min_end {
                break;
            }
            if e.end < min_end {
                min_end = e.end;
                min_at = i;
            }
            window = i + 1;
        }
        let want = if present { OpKind::Remove } else { OpKind::Insert };
        let pick = (0..window).filter(|&i| rem[i].op == want).min_by_key(|&i| rem[i].end);
        match pick {
            Some(i) => {
                last = rem.remove(i);
                present = !present;
            }
            None => {
                let later = rem[min_at];
                let reason = match (later.op, &last) {
                    (OpKind::Insert, Some(_)) => "insert follows an insert with no remove between",
                    (OpKind::Insert, None) => "insert of a key that was already present",
                    (_, Some(_)) => "remove follows a remove with no insert between",
                    (_, None) => "remove of a key that was never inserted",
                };
                return Err(Violation {
                    key,
                    earlier: last,
                    later: Some(later),
                    reason: reason.into(),
                });
            }
        }
    }
    if present != fin {
        return Err(Violation {
            key,
            earlier: last,
            later: None,
            reason: format!(
                "final membership is {fin} but the updates leave it {present}"
            ),
        });
    }
    Ok(())
}

/// Shared settings of the multi-threaded checks.
#[derive(Debug, Clone, PartialEq)]
pub struct StressConfig {
    pub ds: Structure,
    pub variant: Variant,
    pub scheme: Scheme,
    pub threads: usize,
    pub ops_per_thread: u64,
    pub keys: u64,
    pub mix: Mix,
    pub seed: u64,
    pub pool: usize,
    pub buckets: usize,
    /// Inject restarts at every resume label in rotation (tracing scheme).
    pub inject: bool,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            ds: Structure::List,
            variant: Variant::Hhs,
            scheme: Scheme::Fa,
            threads: 4,
            ops_per_thread: 100_000,
            keys: 16,
            mix: Mix::new(20, 40, 40),
            seed: 1,
            pool: 64,
            buckets: 4,
            inject: true,
        }
    }
}

impl StressConfig {
    fn setup(&self) -> Setup {
        Setup {
            ds: self.ds,
            variant: self.variant,
            scheme: self.scheme,
            threads: self.threads,
            pool: self.pool,
            buckets: self.buckets,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StressReport {
    pub verdict: AlternationVerdict,
    pub ops: u64,
    pub restarts: u64,
    pub injected: u64,
    pub phases: u64,
    pub errors: Vec<String>,
}

impl StressReport {
    pub fn pass(&self) -> bool {
        self.verdict.pass && self.errors.is_empty()
    }
}

struct Logged {
    events: Vec<Event>,
    restarts: u64,
    error: Option<Error>,
}

fn logged_op<A: Access>(set: &SetUnderTest, acc: &mut A, clock: &Clock, op: OpKind, key: i64) -> Result<Event> {
    let start = clock.tick();
    let result = set.apply(acc, op, key)?;
    let end = clock.tick();
    Ok(Event {
        tid: acc.tid(),
        op,
        key,
        result,
        start,
        end,
    })
}

struct Alternation<'a>(&'a StressConfig);

impl RigUser for Alternation<'_> {
    type Out = StressReport;

    fn run<A: Access + Send>(self, rig: Rig<A>) -> Result<StressReport> {
        let cfg = self.0;
        let clock = Clock::default();
        let set = &*rig.set;
        let outs: Vec<Logged> = std::thread::scope(|s| {
            let joins: Vec<_> = rig
                .accs
                .into_iter()
                .enumerate()
                .map(|(tid, mut acc)| {
                    let clock = &clock;
                    let wl = Workload::new(cfg.seed, tid, cfg.mix, cfg.keys);
                    s.spawn(move || {
                        let mut events = Vec::with_capacity(cfg.ops_per_thread as usize);
                        let mut error = None;
                        for (op, key) in wl.take(cfg.ops_per_thread as usize) {
                            match logged_op(set, &mut acc, clock, op, key) {
                                Ok(e) => events.push(e),
                                Err(e) => {
                                    error = Some(e);
                                    break;
                                }
                            }
                        }
                        Logged {
                            events,
                            restarts: acc.restarts(),
                            error,
                        }
                    })
                })
                .collect();
            joins.into_iter().map(|j| j.join().expect("worker panicked")).collect()
        });
        let fin: BTreeSet<i64> = set.keys().into_iter().collect();
        let errors = outs.iter().filter_map(|o| o.error.as_ref().map(Error::to_string)).collect();
        let restarts = outs.iter().map(|o| o.restarts).sum();
        let log = EventLog {
            threads: outs.into_iter().map(|o| o.events).collect(),
        };
        let verdict = alternation_check(&log, &BTreeSet::new(), &fin);
        Ok(StressReport {
            verdict,
            ops: log.len() as u64,
            restarts,
            injected: rig.probe.counters().map_or(0, |c| c.injected_restarts),
            phases: rig.probe.phases(),
            errors,
        })
    }
}

/// Runs `threads` workers over a small key space from an empty set and
/// checks the combined log with [`alternation_check`].
pub fn alternation_run(cfg: &StressConfig) -> Result<StressReport> {
    let mut opts = RigOptions {
        // small pools: retired backlogs must not starve the other threads
        hp_threshold: Some((cfg.pool / (4 * cfg.threads.max(1))).max(1)),
        ..Default::default()
    };
    if cfg.inject && cfg.scheme == Scheme::Fa {
        opts.instrument = Some(Instrumentation {
            inject: LABELS.to_vec(),
            ..Default::default()
        });
    }
    with_rig(&cfg.setup(), opts, Alternation(cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resume {
    /// After this many phases (or scans, or epoch advances) have completed
    /// since the thread parked.
    Phases(u64),
    /// When the run is over.
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuspendPoint {
    pub thread: usize,
    pub label: Label,
    pub resume: Resume,
}

/// Where workers park: one `thread:label:resume` entry per line, `resume`
/// being `phases=N` or `manual`. Labels are names such as `entry` or
/// `after_tag`, or their numbers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuspensionScript {
    pub points: Vec<SuspendPoint>,
}

impl FromStr for SuspensionScript {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut points: Vec<SuspendPoint> = Vec::new();
        for line in s.split(['\n', ';']).map(|l| l.split('#').next().unwrap_or("").trim()) {
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::Config(format!("suspension `{line}`: {why}"));
            let f: Vec<&str> = line.split(':').map(str::trim).collect();
            let [thread, label, resume] = f[..] else {
                return Err(bad("expected thread:label:resume"));
            };
            let thread = thread.parse().map_err(|_| bad("bad thread index"))?;
            let label = list::parse_label(label).ok_or_else(|| bad("unknown label"))?;
            let resume = if resume.eq_ignore_ascii_case("manual") {
                Resume::Manual
            } else {
                let n = resume
                    .strip_prefix("phases=")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| bad("resume must be phases=N or manual"))?;
                Resume::Phases(n)
            };
            if points.iter().any(|p| p.thread == thread) {
                return Err(bad("a thread can be suspended at most once"));
            }
            points.push(SuspendPoint { thread, label, resume });
        }
        Ok(Self { points })
    }
}

struct Parking {
    parked: Vec<bool>,
    released: Vec<bool>,
}

/// Cooperative suspension driven by the read hooks.
struct Suspender {
    points: Vec<Option<SuspendPoint>>,
    warmup: u64,
    fired: Vec<AtomicBool>,
    resumed: Vec<AtomicBool>,
    state: Mutex<Parking>,
    cv: Condvar,
}

impl Suspender {
    fn new(script: &SuspensionScript, threads: usize, warmup: u64) -> Result<Arc<Self>> {
        let mut points = vec![None; threads];
        for p in &script.points {
            *points.get_mut(p.thread).ok_or_else(|| {
                Error::Config(format!("suspended thread {} is not among {threads}", p.thread))
            })? = Some(*p);
        }
        Ok(Arc::new(Self {
            points,
            warmup,
            fired: (0..threads).map(|_| AtomicBool::new(false)).collect(),
            resumed: (0..threads).map(|_| AtomicBool::new(false)).collect(),
            state: Mutex::new(Parking {
                parked: vec![false; threads],
                released: vec![false; threads],
            }),
            cv: Condvar::new(),
        }))
    }

    fn hook(self: &Arc<Self>) -> Hook {
        let me = self.clone();
        Arc::new(move |p: &HookPoint| me.at(p))
    }

    fn at(&self, p: &HookPoint) {
        let Some(Some(point)) = self.points.get(p.tid) else {
            return;
        };
        if p.label != point.label || p.ops < self.warmup || self.fired[p.tid].swap(true, SeqCst) {
            return;
        }
        let mut st = self.state.lock();
        st.parked[p.tid] = true;
        while !st.released[p.tid] {
            self.cv.wait(&mut st);
        }
        st.parked[p.tid] = false;
        self.resumed[p.tid].store(true, SeqCst);
    }

    fn parked(&self) -> Vec<usize> {
        let st = self.state.lock();
        (0..st.parked.len()).filter(|&t| st.parked[t]).collect()
    }

    fn release(&self, tid: usize) {
        self.state.lock().released[tid] = true;
        self.cv.notify_all();
    }

    fn release_all(&self) {
        self.state.lock().released.iter_mut().for_each(|r| *r = true);
        self.cv.notify_all();
    }
}

#[derive(Debug, Clone)]
pub struct StuckConfig {
    pub scheme: Scheme,
    pub variant: Variant,
    pub ds: Structure,
    pub threads: usize,
    pub range: u64,
    pub pool: usize,
    pub buckets: usize,
    pub mix: Mix,
    pub seed: u64,
    pub script: SuspensionScript,
    /// Phases that must complete while a thread is parked.
    pub min_phases: u64,
    pub timeout: Duration,
    /// Operations a worker completes before it may park.
    pub warmup_ops: u64,
}

impl StuckConfig {
    /// Four threads over 256 keys with thread 1 parked during a search.
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            variant: if scheme == Scheme::Fa { Variant::Hhs } else { Variant::Hm },
            ds: Structure::List,
            threads: 4,
            range: 256,
            pool: 1000,
            buckets: 16,
            mix: Mix::new(50, 25, 25),
            seed: 1,
            script: "1:entry:phases=12".parse().expect("static script"),
            min_phases: 10,
            timeout: Duration::from_secs(30),
            warmup_ops: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StuckVerdict {
    pub scheme: Scheme,
    pub pass: bool,
    pub suspended: Vec<usize>,
    /// Phases (scans, epoch advances) completed while a thread was parked,
    /// not counting the first two after it parked.
    pub phases_while_suspended: u64,
    pub reclaimed_while_suspended: u64,
    pub errors: Vec<String>,
    pub timed_out: bool,
    /// Restarts taken by the operation each parked thread was in.
    pub restarts_on_resume: Vec<u64>,
    pub alternation: AlternationVerdict,
    pub detail: String,
}

struct Stuck<'a> {
    cfg: &'a StuckConfig,
    sus: Arc<Suspender>,
}

struct StuckWorker {
    events: Vec<Event>,
    error: Option<Error>,
    resume_restarts: Option<u64>,
}

impl RigUser for Stuck<'_> {
    type Out = StuckVerdict;

    fn run<A: Access + Send>(self, mut rig: Rig<A>) -> Result<StuckVerdict> {
        let cfg = self.cfg;
        let sus = &*self.sus;
        prefill(&rig.set, &mut rig.accs[0], cfg.range, cfg.seed)?;
        let initial: BTreeSet<i64> = rig.set.keys().into_iter().collect();
        let probe = rig.probe.clone();
        let clock = Clock::default();
        let stop = AtomicBool::new(false);
        let post_ops: Vec<AtomicU64> = (0..cfg.threads).map(|_| AtomicU64::new(0)).collect();
        let set = &*rig.set;
        let deadline = Instant::now() + cfg.timeout;

        let (outs, watch) = std::thread::scope(|s| {
            let joins: Vec<_> = rig
                .accs
                .into_iter()
                .enumerate()
                .map(|(tid, mut acc)| {
                    let (clock, stop, post_ops) = (&clock, &stop, &post_ops);
                    let mut wl = Workload::new(cfg.seed, tid, cfg.mix, cfg.range);
                    s.spawn(move || {
                        let mut out = StuckWorker {
                            events: Vec::new(),
                            error: None,
                            resume_restarts: None,
                        };
                        while !stop.load(Relaxed) {
                            let (op, key) = wl.next_op();
                            let before = acc.restarts();
                            match logged_op(set, &mut acc, clock, op, key) {
                                Ok(e) => out.events.push(e),
                                Err(e) => {
                                    out.error = Some(e);
                                    stop.store(true, Relaxed);
                                    break;
                                }
                            }
                            if sus.resumed[tid].load(Relaxed) {
                                if out.resume_restarts.is_none() {
                                    out.resume_restarts = Some(acc.restarts() - before);
                                }
                                post_ops[tid].fetch_add(1, Relaxed);
                            }
                        }
                        out
                    })
                })
                .collect();
            let watch = watch(cfg, sus, &probe, &stop, &post_ops, deadline);
            stop.store(true, Relaxed);
            sus.release_all();
            let outs: Vec<StuckWorker> = joins.into_iter().map(|j| j.join().expect("worker panicked")).collect();
            (outs, watch)
        });

        let fin: BTreeSet<i64> = set.keys().into_iter().collect();
        let errors: Vec<String> = outs.iter().filter_map(|o| o.error.as_ref().map(Error::to_string)).collect();
        let restarts_on_resume: Vec<u64> = watch.suspended.iter().filter_map(|&t| outs[t].resume_restarts).collect();
        let log = EventLog {
            threads: outs.into_iter().map(|o| o.events).collect(),
        };
        let alternation = alternation_check(&log, &initial, &fin);
        let resumed_ok = cfg.scheme != Scheme::Fa || restarts_on_resume.iter().all(|&r| r > 0);
        let enough = watch.phases >= cfg.min_phases && watch.reclaimed > 0;
        let pass = !watch.suspended.is_empty()
            && enough
            && errors.is_empty()
            && !watch.timed_out
            && alternation.pass
            && resumed_ok;
        let detail = if watch.suspended.is_empty() {
            "no thread reached its suspension point".to_string()
        } else if !errors.is_empty() {
            format!("workers failed while a thread was parked: {}", errors[0])
        } else if !enough {
            format!(
                "only {} phases and {} reclaimed nodes while a thread was parked",
                watch.phases, watch.reclaimed
            )
        } else if watch.timed_out {
            "timed out after the phases completed".to_string()
        } else if !alternation.pass {
            format!("alternation failed: {}", alternation.violation.as_ref().expect("violation"))
        } else if !resumed_ok {
            "a parked thread resumed without restarting".to_string()
        } else {
            format!(
                "{} phases and {} reclaimed nodes while a thread was parked",
                watch.phases, watch.reclaimed
            )
        };
        Ok(StuckVerdict {
            scheme: cfg.scheme,
            pass,
            suspended: watch.suspended,
            phases_while_suspended: watch.phases,
            reclaimed_while_suspended: watch.reclaimed,
            errors,
            timed_out: watch.timed_out,
            restarts_on_resume,
            alternation,
            detail,
        })
    }
}

struct Watch {
    suspended: Vec<usize>,
    phases: u64,
    reclaimed: u64,
    timed_out: bool,
}

fn watch(
    cfg: &StuckConfig,
    sus: &Suspender,
    probe: &crate::harness::Probe,
    stop: &AtomicBool,
    post_ops: &[AtomicU64],
    deadline: Instant,
) -> Watch {
    const SETTLE: u64 = 2;
    const POST_OPS: u64 = 20;
    let tick = || std::thread::sleep(Duration::from_micros(200));
    let mut w = Watch {
        suspended: Vec::new(),
        phases: 0,
        reclaimed: 0,
        timed_out: false,
    };
    let expected = cfg.script.points.len();
    // Wait for every scripted thread to park.
    let mut parked_at: Vec<(usize, u64)> = Vec::new();
    while parked_at.len() < expected {
        for t in sus.parked() {
            if !parked_at.iter().any(|&(u, _)| u == t) {
                parked_at.push((t, probe.phases()));
            }
        }
        if stop.load(Relaxed) || Instant::now() >= deadline {
            w.timed_out = Instant::now() >= deadline;
            w.suspended = parked_at.iter().map(|&(t, _)| t).collect();
            return w;
        }
        tick();
    }
    w.suspended = parked_at.iter().map(|&(t, _)| t).collect();
    // counted from the first park as observed, the same reference the
    // scripted resumes use
    let settled = parked_at.iter().map(|&(_, at)| at).min().unwrap_or(0) + SETTLE;
    let (mut base, mut r1) = (None, 0);
    let mut released = false;
    loop {
        let p = probe.phases();
        if base.is_none() && p >= settled {
            base = Some(settled);
            r1 = probe.reclaimed();
        }
        if let Some(b) = base {
            if !released {
                w.phases = p - b;
                w.reclaimed = probe.reclaimed() - r1;
            }
        }
        for &(t, at) in &parked_at {
            if let Some(SuspendPoint {
                resume: Resume::Phases(n),
                ..
            }) = sus.points[t]
            {
                if p >= at + n {
                    released = true;
                    sus.release(t);
                }
            }
        }
        let target = w.phases >= cfg.min_phases && w.reclaimed > 0;
        if target && !released {
            released = true;
            sus.release_all();
        }
        if released && parked_at.iter().all(|&(t, _)| post_ops[t].load(Relaxed) >= POST_OPS) {
            return w;
        }
        if stop.load(Relaxed) {
            return w;
        }
        if Instant::now() >= deadline {
            w.timed_out = true;
            return w;
        }
        tick();
    }
}

/// Parks the scripted threads and checks that reclamation keeps making
/// progress without them.
pub fn stuck_thread_progress(cfg: &StuckConfig) -> Result<StuckVerdict> {
    if cfg.scheme == Scheme::Nr {
        return Err(Error::Config("the leaky scheme has nothing to make progress on".into()));
    }
    if cfg.script.points.is_empty() {
        return Err(Error::Config("the suspension script is empty".into()));
    }
    let sus = Suspender::new(&cfg.script, cfg.threads, cfg.warmup_ops)?;
    let hook = sus.hook();
    let opts = RigOptions {
        instrument: (cfg.scheme == Scheme::Fa).then(|| Instrumentation {
            hook: Some(hook.clone()),
            ..Default::default()
        }),
        hook: Some(hook),
        hp_threshold: Some((cfg.pool / (4 * cfg.threads)).max(1)),
        ..Default::default()
    };
    let setup = Setup {
        ds: cfg.ds,
        variant: cfg.variant,
        scheme: cfg.scheme,
        threads: cfg.threads,
        pool: cfg.pool,
        buckets: cfg.buckets,
    };
    with_rig(&setup, opts, Stuck { cfg, sus })
}

/// A protocol step deliberately left out, to show a detector notices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    None,
    SkipValidate,
    SkipFence,
    SkipMarker,
}

impl Mutation {
    pub const ALL: [Mutation; 4] = [
        Mutation::None,
        Mutation::SkipValidate,
        Mutation::SkipFence,
        Mutation::SkipMarker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::None => "none",
            Mutation::SkipValidate => "skip-validate",
            Mutation::SkipFence => "skip-fence",
            Mutation::SkipMarker => "skip-marker",
        }
    }

    pub fn faults(self) -> Faults {
        Faults {
            skip_validate: self == Mutation::SkipValidate,
            skip_fence: self == Mutation::SkipFence,
            skip_marker: self == Mutation::SkipMarker,
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mutation::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mutation `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct PoisonConfig {
    pub ds: Structure,
    pub variant: Variant,
    pub threads: usize,
    pub total_ops: u64,
    pub range: u64,
    pub pool: usize,
    pub buckets: usize,
    pub mix: Mix,
    pub seed: u64,
    pub mutation: Mutation,
    /// Certified reads allowed per operation; keeps broken builds from
    /// looping on corrupted links.
    pub step_budget: Option<u64>,
    /// End the run as soon as a violation is counted.
    pub stop_on_violation: bool,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        Self {
            ds: Structure::List,
            variant: Variant::Hhs,
            threads: 4,
            total_ops: 1_000_000,
            range: 256,
            pool: 2000,
            buckets: 16,
            mix: Mix::new(50, 25, 25),
            seed: 1,
            mutation: Mutation::None,
            step_budget: Some(1_000_000),
            stop_on_violation: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonVerdict {
    pub mutation: Mutation,
    pub pass: bool,
    pub ops: u64,
    pub phases: u64,
    pub poison_certified: u64,
    pub frame_violations: u64,
    pub budget_aborts: u64,
    pub errors: Vec<String>,
}

struct Poison<'a>(&'a PoisonConfig);

impl RigUser for Poison<'_> {
    type Out = PoisonVerdict;

    fn run<A: Access + Send>(self, mut rig: Rig<A>) -> Result<PoisonVerdict> {
        let cfg = self.0;
        prefill(&rig.set, &mut rig.accs[0], cfg.range, cfg.seed)?;
        let rt = rig.probe.runtime.clone().expect("tracing scheme");
        let stop = AtomicBool::new(false);
        let set = &*rig.set;
        let per_thread = cfg.total_ops / cfg.threads as u64;
        let outs: Vec<(u64, u64, Option<Error>)> = std::thread::scope(|s| {
            let joins: Vec<_> = rig
                .accs
                .into_iter()
                .enumerate()
                .map(|(tid, mut acc)| {
                    let (stop, rt) = (&stop, &rt);
                    let wl = Workload::new(cfg.seed, tid, cfg.mix, cfg.range);
                    s.spawn(move || {
                        let (mut ops, mut aborts) = (0, 0);
                        for (op, key) in wl.take(per_thread as usize) {
                            if stop.load(Relaxed) {
                                break;
                            }
                            match set.apply(&mut acc, op, key) {
                                Ok(_) => ops += 1,
                                Err(Error::StepBudget) => aborts += 1,
                                Err(e) => {
                                    stop.store(true, Relaxed);
                                    return (ops, aborts, Some(e));
                                }
                            }
                            if cfg.stop_on_violation && ops % 256 == 0 {
                                let c = rt.counters();
                                if c.poison_certified + c.frame_violations > 0 {
                                    stop.store(true, Relaxed);
                                }
                            }
                        }
                        (ops, aborts, None)
                    })
                })
                .collect();
            joins.into_iter().map(|j| j.join().expect("worker panicked")).collect()
        });
        let c = rt.counters();
        let errors: Vec<String> = outs.iter().filter_map(|o| o.2.as_ref().map(Error::to_string)).collect();
        Ok(PoisonVerdict {
            mutation: cfg.mutation,
            pass: c.poison_certified == 0 && c.frame_violations == 0 && errors.is_empty(),
            ops: outs.iter().map(|o| o.0).sum(),
            phases: rt.phases_completed(),
            poison_certified: c.poison_certified,
            frame_violations: c.frame_violations,
            budget_aborts: outs.iter().map(|o| o.1).sum(),
            errors,
        })
    }
}

/// Runs the tracing scheme with poisoned sweeps and audited reads. The
/// verdict passes iff no certified read returned the poison pattern and
/// every publication was visible before its dirty check.
pub fn poison_audit(cfg: &PoisonConfig) -> Result<PoisonVerdict> {
    if cfg.threads == 0 {
        return Err(Error::Config("at least one thread is required".into()));
    }
    let setup = Setup {
        ds: cfg.ds,
        variant: cfg.variant,
        scheme: Scheme::Fa,
        threads: cfg.threads,
        pool: cfg.pool,
        buckets: cfg.buckets,
    };
    let opts = RigOptions {
        poison: true,
        instrument: Some(Instrumentation {
            audit: true,
            faults: cfg.mutation.faults(),
            step_budget: cfg.step_budget,
            ..Default::default()
        }),
        ..Default::default()
    };
    with_rig(&setup, opts, Poison(cfg))
}

/// Leaves a removed node in the last operation's frame, then runs a phase
/// at quiescence. A sound marker lets the node go; without it the stale
/// frame keeps it alive.
pub fn marker_leak_check(mutation: Mutation) -> Result<crate::harness::LeakReport> {
    let rt = Runtime::new(RuntimeConfig {
        max_threads: 1,
        poison: false,
        instrument: Some(Instrumentation {
            faults: mutation.faults(),
            ..Default::default()
        }),
    })?;
    let arena = rt.add_arena(64, NodeLayout::list_node())?;
    let set = ListSet::new(arena.clone(), Variant::Hm)?;
    let mut acc = crate::sets::FaAccess::new(rt.register()?, arena.clone());
    for k in 1..=5 {
        set.insert(&mut acc, k)?;
    }
    set.remove(&mut acc, 3)?;
    rt.reclamation_phase();
    Ok(crate::harness::LeakReport {
        capacity: arena.capacity(),
        free: arena.free_count(),
        live: set.reachable_nodes(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwapVerdict {
    pub n: usize,
    pub trials: u64,
    pub pass: bool,
    pub violations: u64,
    /// Different swap orders observed.
    pub distinct_chains: usize,
    pub restarts: u64,
    pub first_violation: Option<String>,
}

/// Checks one trial: `placed[i]` was swapped in by swap `i`, which returned
/// `returned[i]`. Returns the order the swaps took effect in.
pub fn swap_chain(v0: u64, placed: &[u64], returned: &[u64], fin: u64) -> Result<Vec<usize>, String> {
    let n = placed.len();
    let mut all: Vec<u64> = returned.to_vec();
    all.push(fin);
    all.sort_unstable();
    let mut want: Vec<u64> = placed.to_vec();
    want.push(v0);
    want.sort_unstable();
    if all != want {
        return Err(format!("returned {returned:?} and final {fin:#x} are not a permutation of the swapped values"));
    }
    let mut order = Vec::with_capacity(n);
    let mut cur = v0;
    for _ in 0..n {
        let Some(i) = (0..n).find(|&i| returned[i] == cur && !order.contains(&i)) else {
            return Err(format!("no swap returned {cur:#x}; chain breaks after {order:?}"));
        };
        order.push(i);
        cur = placed[i];
    }
    if cur != fin {
        return Err(format!("chain ends at {cur:#x}, cell holds {fin:#x}"));
    }
    Ok(order)
}

/// Runs `trials` rounds of `n` concurrent swaps on one cell, with restarts
/// injected at both resume points.
pub fn swap_chain_check(n: usize, trials: u64, seed: u64) -> Result<SwapVerdict> {
    if n == 0 {
        return Err(Error::Config("at least one swap is required".into()));
    }
    let rt = Runtime::new(RuntimeConfig {
        max_threads: n,
        poison: false,
        instrument: Some(Instrumentation {
            inject: vec![Label(0), Label(1)],
            ..Default::default()
        }),
    })?;
    let cell = AtomicU64::new(0);
    let returned: Vec<AtomicU64> = (0..n).map(|_| AtomicU64::new(0)).collect();
    let gate = Barrier::new(n + 1);
    let value = |trial: u64, who: u64| ((trial + 1) << 16) | (who << 4);
    let mut verdict = SwapVerdict {
        n,
        trials,
        pass: true,
        violations: 0,
        distinct_chains: 0,
        restarts: 0,
        first_violation: None,
    };
    let mut chains = HashSet::new();
    let handles = (0..n).map(|_| rt.register()).collect::<Result<Vec<_>>>()?;
    let restarts: u64 = std::thread::scope(|s| {
        let joins: Vec<_> = handles
            .into_iter()
            .enumerate()
            .map(|(i, mut h)| {
                let (cell, returned, gate) = (&cell, &returned, &gate);
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    for t in 0..trials {
                        gate.wait();
                        for _ in 0..rng.gen_range(0..64) {
                            std::hint::spin_loop();
                        }
                        if rng.gen_bool(0.1) {
                            std::thread::yield_now();
                        }
                        let old = h.emulated_swap(cell, value(t, i as u64 + 1)).expect("swap");
                        returned[i].store(old, SeqCst);
                        gate.wait();
                    }
                    h.restarts()
                })
            })
            .collect();
        for t in 0..trials {
            cell.store(value(t, 0), SeqCst);
            gate.wait();
            gate.wait();
            let placed: Vec<u64> = (0..n).map(|i| value(t, i as u64 + 1)).collect();
            let got: Vec<u64> = returned.iter().map(|r| r.load(SeqCst)).collect();
            match swap_chain(value(t, 0), &placed, &got, cell.load(SeqCst)) {
                Ok(order) => {
                    chains.insert(order);
                }
                Err(e) => {
                    verdict.violations += 1;
                    verdict.first_violation.get_or_insert(format!("trial {t}: {e}"));
                }
            }
        }
        joins.into_iter().map(|j| j.join().expect("swapper panicked")).sum()
    });
    verdict.pass = verdict.violations == 0;
    verdict.distinct_chains = chains.len();
    verdict.restarts = restarts;
    Ok(verdict)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceVerdict {
    pub heaps: usize,
    pub helpers: usize,
    pub pass: bool,
    pub mismatches: usize,
    pub first_mismatch: Option<String>,
}

/// Builds random frozen heaps (two links per node, tagged, null and
/// garbage link values, global and published local roots, plus a stale
/// frame hidden by a marker) and checks that one phase run by `helpers`
/// threads frees exactly the nodes unreachable from the roots.
pub fn trace_oracle(heaps: usize, max_nodes: usize, helpers: usize, seed: u64) -> Result<TraceVerdict> {
    if helpers == 0 || max_nodes == 0 {
        return Err(Error::Config("need at least one helper and one node".into()));
    }
    let layout = NodeLayout::new(3 * WORD, &[WORD, 2 * WORD])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut verdict = TraceVerdict {
        heaps,
        helpers,
        pass: true,
        mismatches: 0,
        first_mismatch: None,
    };
    for heap in 0..heaps {
        let rt = Runtime::new(RuntimeConfig {
            max_threads: 2,
            ..Default::default()
        })?;
        let cap = rng.gen_range(1..=max_nodes);
        let arena = rt.add_arena(cap, layout.clone())?;
        let used = rng.gen_range(0..=cap);
        let nodes: Vec<u64> = (0..used).map(|_| arena.pop_free(0).expect("fresh arena").raw()).collect();
        let pick = |rng: &mut ChaCha8Rng| -> u64 {
            match rng.gen_range(0..10) {
                0..=1 => NULL,
                2 => rng.gen::<u64>() | 1 << 63,
                _ if nodes.is_empty() => NULL,
                r => nodes[rng.gen_range(0..nodes.len())] | if r == 3 { TAG } else { 0 },
            }
        };
        for &n in &nodes {
            arena.cell(n, 0).expect("node").store(rng.gen(), Relaxed);
            for w in 1..3 {
                let v = pick(&mut rng);
                arena.cell(n, w).expect("node").store(v, Relaxed);
            }
        }
        let mut roots = Vec::new();
        for _ in 0..rng.gen_range(0..3) {
            let v = pick(&mut rng);
            let cell = Arc::new(AtomicU64::new(v));
            arena.register_global_root(cell.clone());
            roots.push(v);
        }
        // a thread inside an operation with a published frame
        let mut active = rt.register()?;
        let published: Vec<u64> = (0..rng.gen_range(0..4)).map(|_| pick(&mut rng)).collect();
        active.op_begin(&OpSpec::new(Label(0), published.len())?, &[], [0; LOCALS])?;
        active.begin_write_only(&published).map_err(|_| Error::Config("unexpected restart".into()))?;
        roots.extend(&published);
        // a finished operation whose frame is hidden by the marker
        let mut idle = rt.register()?;
        let stale: Vec<u64> = (0..rng.gen_range(0..3)).map(|_| pick(&mut rng)).collect();
        idle.op_begin(&OpSpec::new(Label(0), stale.len())?, &[], [0; LOCALS])?;
        idle.begin_write_only(&stale).map_err(|_| Error::Config("unexpected restart".into()))?;
        idle.op_end();

        let reachable = reachable(&arena, &roots);
        let phase = rt.init_reclamation();
        let gate = Barrier::new(helpers);
        std::thread::scope(|s| {
            for _ in 0..helpers {
                s.spawn(|| {
                    gate.wait();
                    rt.help(phase);
                });
            }
        });
        let freed = used - reachable.len();
        let kept: BTreeSet<usize> = (0..cap).filter(|&i| arena.marks().is_allocated(i)).collect();
        let want: BTreeSet<usize> = reachable.iter().map(|&r| arena.resolve(r).expect("node")).collect();
        if kept != want || rt.reclaimed_in(phase) != freed as u64 || arena.free_count() != cap - want.len() {
            verdict.mismatches += 1;
            verdict.first_mismatch.get_or_insert(format!(
                "heap {heap}: kept {kept:?}, reachable {want:?}, reclaimed {} of {used}",
                rt.reclaimed_in(phase)
            ));
        }
        drop(active);
    }
    verdict.pass = verdict.mismatches == 0;
    Ok(verdict)
}

/// Sequential reachability over every link word of allocated nodes.
fn reachable(arena: &Arena, roots: &[u64]) -> BTreeSet<u64> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<u64> = roots.iter().map(|&r| clear_tag(r)).collect();
    while let Some(r) = stack.pop() {
        let Some(i) = arena.resolve(r) else { continue };
        if !arena.marks().is_allocated(i) || !seen.insert(r) {
            continue;
        }
        for &off in arena.layout().link_offsets() {
            stack.push(clear_tag(arena.load(r, off / WORD, Relaxed)));
        }
    }
    seen
}
