//! Throughput benchmarks over the sets, one configuration at a time.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering::Relaxed};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::arena::{Arena, NodeLayout};
use crate::error::{Error, Result};
use crate::runtime::{CounterSnapshot, Hook, Instrumentation, Runtime, RuntimeConfig};
use crate::schemes::{EbrDomain, HpDomain, NoReclaim};
use crate::sets::{Access, EbrAccess, FaAccess, HashSet, HpAccess, ListSet, NrAccess, Scheme, Variant};

/// Hazard slots each list operation needs: prev, cur and next.
const HP_SLOTS: usize = 3;
const PREFILL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    List,
    Hash,
}

impl Structure {
    pub fn name(self) -> &'static str {
        match self {
            Structure::List => "list",
            Structure::Hash => "hash",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "list" => Ok(Structure::List),
            "hash" => Ok(Structure::Hash),
            _ => Err(Error::Config(format!("unknown structure `{s}`"))),
        }
    }
}

/// Operation percentages, written `contains:insert:remove`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mix {
    pub contains: u8,
    pub insert: u8,
    pub remove: u8,
}

impl Mix {
    pub const fn new(contains: u8, insert: u8, remove: u8) -> Self {
        Self {
            contains,
            insert,
            remove,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.contains as u32 + self.insert as u32 + self.remove as u32;
        if sum != 100 {
            return Err(Error::Config(format!("mix {self} sums to {sum}, not 100")));
        }
        Ok(())
    }
}

impl Default for Mix {
    fn default() -> Self {
        Mix::new(50, 25, 25)
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.contains, self.insert, self.remove)
    }
}

impl FromStr for Mix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("mix `{s}` is not of the form c:i:r"));
        let parts: Vec<u8> = s
            .split(':')
            .map(|p| p.trim().parse::<u8>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [c, i, r] = parts[..] else {
            return Err(bad());
        };
        let mix = Mix::new(c, i, r);
        mix.validate()?;
        Ok(mix)
    }
}

impl Serialize for Mix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Contains,
    Insert,
    Remove,
}

/// Per-thread operation stream. The same seed, thread and mix always give
/// the same sequence.
#[derive(Debug, Clone)]
pub struct Workload {
    rng: ChaCha8Rng,
    mix: Mix,
    range: u64,
}

impl Workload {
    pub fn new(seed: u64, tid: usize, mix: Mix, range: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(tid as u64);
        Self {
            rng,
            mix,
            range: range.max(1),
        }
    }

    pub fn next_op(&mut self) -> (OpKind, i64) {
        let roll = self.rng.gen_range(0..100u8);
        let key = self.rng.gen_range(0..self.range) as i64;
        let op = if roll < self.mix.contains {
            OpKind::Contains
        } else if roll < self.mix.contains + self.mix.insert {
            OpKind::Insert
        } else {
            OpKind::Remove
        };
        (op, key)
    }
}

impl Iterator for Workload {
    type Item = (OpKind, i64);

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_op())
    }
}

/// A list or hash set, whichever the configuration asks for.
#[derive(Debug)]
pub enum SetUnderTest {
    List(ListSet),
    Hash(HashSet),
}

impl SetUnderTest {
    pub fn build(ds: Structure, arena: Arc<Arena>, variant: Variant, buckets: usize) -> Result<Self> {
        Ok(match ds {
            Structure::List => SetUnderTest::List(ListSet::new(arena, variant)?),
            Structure::Hash => SetUnderTest::Hash(HashSet::new(arena, variant, buckets)?),
        })
    }

    pub fn apply<A: Access>(&self, acc: &mut A, op: OpKind, key: i64) -> Result<bool> {
        match (self, op) {
            (SetUnderTest::List(s), OpKind::Contains) => s.contains(acc, key),
            (SetUnderTest::List(s), OpKind::Insert) => s.insert(acc, key),
            (SetUnderTest::List(s), OpKind::Remove) => s.remove(acc, key),
            (SetUnderTest::Hash(s), OpKind::Contains) => s.contains(acc, key),
            (SetUnderTest::Hash(s), OpKind::Insert) => s.insert(acc, key),
            (SetUnderTest::Hash(s), OpKind::Remove) => s.remove(acc, key),
        }
    }

    /// Quiescent use only.
    pub fn keys(&self) -> Vec<i64> {
        match self {
            SetUnderTest::List(s) => s.keys(),
            SetUnderTest::Hash(s) => s.keys(),
        }
    }

    /// Quiescent use only.
    pub fn reachable_nodes(&self) -> usize {
        match self {
            SetUnderTest::List(s) => s.reachable_nodes(),
            SetUnderTest::Hash(s) => s.reachable_nodes(),
        }
    }
}

/// Free-list accounting after a quiescent reclamation phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakReport {
    pub capacity: usize,
    pub free: usize,
    /// Nodes reachable from the structure's roots, sentinels included.
    pub live: usize,
}

impl LeakReport {
    /// Nodes neither free nor live.
    pub fn leaked(&self) -> i64 {
        self.capacity as i64 - self.live as i64 - self.free as i64
    }

    pub fn ok(&self) -> bool {
        self.leaked() == 0
    }
}

/// What a structure is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Setup {
    pub ds: Structure,
    pub variant: Variant,
    pub scheme: Scheme,
    pub threads: usize,
    pub pool: usize,
    pub buckets: usize,
}

/// Test-only knobs applied when building a rig.
#[derive(Clone, Default)]
pub struct RigOptions {
    /// Instrumentation of the tracing runtime.
    pub instrument: Option<Instrumentation>,
    pub poison: bool,
    /// Read hook for the hazard-pointer and epoch schemes.
    pub hook: Option<Hook>,
    pub hp_threshold: Option<usize>,
}

/// Progress counters of whichever scheme a rig runs.
#[derive(Clone)]
pub struct Probe {
    pub arena: Arc<Arena>,
    pub runtime: Option<Arc<Runtime>>,
    pub hp: Option<Arc<HpDomain>>,
    pub ebr: Option<Arc<EbrDomain>>,
}

impl Probe {
    /// Completed phases, reclaiming scans or epoch advances.
    pub fn phases(&self) -> u64 {
        if let Some(rt) = &self.runtime {
            rt.phases_completed()
        } else if let Some(hp) = &self.hp {
            hp.reclaiming_scans()
        } else if let Some(ebr) = &self.ebr {
            ebr.advances()
        } else {
            0
        }
    }

    pub fn reclaimed(&self) -> u64 {
        if let Some(rt) = &self.runtime {
            rt.total_reclaimed()
        } else if let Some(hp) = &self.hp {
            hp.reclaimed()
        } else if let Some(ebr) = &self.ebr {
            ebr.reclaimed()
        } else {
            0
        }
    }

    pub fn counters(&self) -> Option<CounterSnapshot> {
        self.runtime.as_ref().map(|rt| rt.counters())
    }

    /// Runs one phase at quiescence and compares the free list against the
    /// live structure. Only the tracing scheme can account for every node.
    pub fn leak_check(&self, set: &SetUnderTest) -> Option<LeakReport> {
        let rt = self.runtime.as_ref()?;
        rt.reclamation_phase();
        Some(LeakReport {
            capacity: self.arena.capacity(),
            free: self.arena.free_count(),
            live: set.reachable_nodes(),
        })
    }
}

/// A structure plus one access handle per worker.
pub struct Rig<A> {
    pub set: Arc<SetUnderTest>,
    pub accs: Vec<A>,
    pub probe: Probe,
}

/// Something to do with a rig of any scheme.
pub trait RigUser {
    type Out;

    fn run<A: Access + Send>(self, rig: Rig<A>) -> Result<Self::Out>;
}

/// Builds the structure for `setup` and hands it to `user`. Worker `i`
/// gets `accs[i]`, registered as thread `i` of its scheme.
pub fn with_rig<U: RigUser>(setup: &Setup, opts: RigOptions, user: U) -> Result<U::Out> {
    if !setup.variant.supports(setup.scheme) {
        return Err(Error::Config(format!(
            "the {} list cannot run under {}",
            setup.variant, setup.scheme
        )));
    }
    let threads = setup.threads;
    let layout = NodeLayout::list_node();
    let plain_arena = || -> Result<Arc<Arena>> {
        let a = Arena::new(setup.pool, layout.clone())?;
        a.set_poison(opts.poison);
        Ok(Arc::new(a))
    };
    let set_in = |arena: &Arc<Arena>| -> Result<Arc<SetUnderTest>> {
        Ok(Arc::new(SetUnderTest::build(setup.ds, arena.clone(), setup.variant, setup.buckets)?))
    };
    let probe = |arena: &Arc<Arena>| Probe {
        arena: arena.clone(),
        runtime: None,
        hp: None,
        ebr: None,
    };
    match setup.scheme {
        Scheme::Fa => {
            let rt = Runtime::new(RuntimeConfig {
                max_threads: threads,
                poison: opts.poison,
                instrument: opts.instrument,
            })?;
            let arena = rt.add_arena(setup.pool, layout)?;
            let set = set_in(&arena)?;
            let accs = (0..threads)
                .map(|_| Ok(FaAccess::new(rt.register()?, arena.clone())))
                .collect::<Result<_>>()?;
            let probe = Probe {
                runtime: Some(rt),
                ..probe(&arena)
            };
            user.run(Rig { set, accs, probe })
        }
        Scheme::Hp => {
            let arena = plain_arena()?;
            let set = set_in(&arena)?;
            let threshold = opts.hp_threshold.unwrap_or_else(|| HpDomain::default_threshold(threads));
            let d = HpDomain::with_hook(threads, HP_SLOTS, threshold, opts.hook)?;
            let accs = (0..threads)
                .map(|_| Ok(HpAccess::new(d.register(arena.clone())?)))
                .collect::<Result<_>>()?;
            let probe = Probe {
                hp: Some(d),
                ..probe(&arena)
            };
            user.run(Rig { set, accs, probe })
        }
        Scheme::Ebr => {
            let arena = plain_arena()?;
            let set = set_in(&arena)?;
            let d = EbrDomain::with_hook(threads, opts.hook)?;
            let accs = (0..threads)
                .map(|_| Ok(EbrAccess::new(d.register(arena.clone())?)))
                .collect::<Result<_>>()?;
            let probe = Probe {
                ebr: Some(d),
                ..probe(&arena)
            };
            user.run(Rig { set, accs, probe })
        }
        Scheme::Nr => {
            let arena = plain_arena()?;
            let set = set_in(&arena)?;
            let nr = NoReclaim::new(arena.clone());
            let accs = (0..threads).map(|t| NrAccess::new(nr.clone(), t)).collect();
            user.run(Rig {
                set,
                accs,
                probe: probe(&arena),
            })
        }
    }
}

/// Inserts a random half of `[0, range)`.
pub fn prefill<A: Access>(set: &SetUnderTest, acc: &mut A, range: u64, seed: u64) -> Result<usize> {
    let mut keys: Vec<i64> = (0..range as i64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PREFILL_STREAM);
    keys.shuffle(&mut rng);
    keys.truncate(range as usize / 2);
    for &k in &keys {
        set.apply(acc, OpKind::Insert, k)?;
    }
    Ok(keys.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ds: Structure,
    pub variant: Variant,
    pub scheme: Scheme,
    pub range: u64,
    pub threads: usize,
    pub duration_secs: f64,
    pub repeats: usize,
    pub mix: Mix,
    /// Node pool; `None` picks a per-scheme default.
    pub pool: Option<usize>,
    pub seed: u64,
    pub buckets: usize,
    pub poison: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ds: Structure::List,
            variant: Variant::Hhs,
            scheme: Scheme::Fa,
            range: 256,
            threads: 1,
            duration_secs: 1.0,
            repeats: 1,
            mix: Mix::default(),
            pool: None,
            seed: 1,
            buckets: 10_000,
            poison: false,
        }
    }
}

impl BenchConfig {
    /// Smallest pool that can hold the prefilled structure plus one
    /// in-flight node per thread.
    pub fn min_pool(&self) -> usize {
        let sentinels = match self.ds {
            Structure::List => 2,
            Structure::Hash => self.buckets + 1,
        };
        sentinels + self.range as usize / 2 + 2 * self.threads + 16
    }

    pub fn pool(&self) -> usize {
        self.pool.unwrap_or_else(|| {
            let steady = self.min_pool();
            match self.scheme {
                Scheme::Fa => steady.max(50_000),
                Scheme::Hp | Scheme::Ebr => steady.max(200_000) + 2 * HpDomain::default_threshold(self.threads) * self.threads,
                Scheme::Nr => {
                    let budget = 2_000_000.0 * self.duration_secs * self.threads as f64;
                    steady + (budget as usize).clamp(1_000_000, 16_000_000)
                }
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        if self.range == 0 || self.range >= i64::MAX as u64 {
            return Err(Error::Config("key range must be in 1..i64::MAX".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("at least one thread is required".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("at least one repeat is required".into()));
        }
        if !(self.duration_secs > 0.0 && self.duration_secs.is_finite()) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if self.ds == Structure::Hash && self.buckets == 0 {
            return Err(Error::Config("a hash set needs at least one bucket".into()));
        }
        if !self.variant.supports(self.scheme) {
            return Err(Error::Config(format!(
                "{} requires the hm list variant, got {}",
                self.scheme, self.variant
            )));
        }
        if self.pool() < self.min_pool() {
            return Err(Error::Config(format!(
                "pool of {} nodes is below the minimum of {} for this structure",
                self.pool(),
                self.min_pool()
            )));
        }
        Ok(())
    }

    pub fn setup(&self) -> Setup {
        Setup {
            ds: self.ds,
            variant: self.variant,
            scheme: self.scheme,
            threads: self.threads,
            pool: self.pool(),
            buckets: self.buckets,
        }
    }

    /// Whether `nr` is a leaky run comparable with this one.
    pub fn pairs_with(&self, nr: &BenchConfig) -> bool {
        nr.scheme == Scheme::Nr
            && nr.ds == self.ds
            && nr.range == self.range
            && nr.threads == self.threads
            && nr.mix == self.mix
            && nr.seed == self.seed
            && (self.ds == Structure::List || nr.buckets == self.buckets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config: BenchConfig,
    /// Operations per second, one entry per repeat.
    pub throughput: Vec<f64>,
    pub mean_ops: f64,
    /// Half-width of the 95% confidence interval of the mean.
    pub ci95: f64,
    pub ratio_nr: Option<f64>,
    /// Reclamation phases, reclaiming scans or epoch advances, summed.
    pub phases: u64,
    pub diagnostics: Vec<String>,
    pub leaks: Vec<LeakReport>,
}

/// Mean and 95% confidence half-width (Student t over the samples).
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(f64::NAN);
    (mean, t * (var / n as f64).sqrt())
}

struct Repeat<'a> {
    cfg: &'a BenchConfig,
    repeat: usize,
}

struct RepeatOut {
    throughput: f64,
    phases: u64,
    diagnostic: Option<String>,
    leak: Option<LeakReport>,
}

impl RigUser for Repeat<'_> {
    type Out = RepeatOut;

    fn run<A: Access + Send>(self, mut rig: Rig<A>) -> Result<RepeatOut> {
        let cfg = self.cfg;
        let seed = cfg.seed.wrapping_add(self.repeat as u64);
        prefill(&rig.set, &mut rig.accs[0], cfg.range, seed)?;
        let phases0 = rig.probe.phases();
        let stop = AtomicBool::new(false);
        let start = Barrier::new(cfg.threads + 1);
        let set = &*rig.set;
        let (outs, elapsed) = std::thread::scope(|s| {
            let joins: Vec<_> = rig
                .accs
                .iter_mut()
                .enumerate()
                .map(|(tid, acc)| {
                    let (stop, start) = (&stop, &start);
                    let wl = Workload::new(seed, tid, cfg.mix, cfg.range);
                    s.spawn(move || {
                        start.wait();
                        timed_worker(set, acc, wl, stop)
                    })
                })
                .collect();
            start.wait();
            let t0 = Instant::now();
            let deadline = t0 + Duration::from_secs_f64(cfg.duration_secs);
            while Instant::now() < deadline && !stop.load(Relaxed) {
                std::thread::sleep((deadline - Instant::now()).min(Duration::from_millis(5)));
            }
            stop.store(true, Relaxed);
            let elapsed = t0.elapsed();
            let outs: Vec<_> = joins.into_iter().map(|j| j.join().expect("worker panicked")).collect();
            (outs, elapsed)
        });
        let ops: u64 = outs.iter().map(|o| o.0).sum();
        let diagnostic = outs.iter().find_map(|o| o.1.clone()).map(|e| {
            format!(
                "{} {} repeat {}: {e} after {ops} operations",
                cfg.scheme, cfg.variant, self.repeat
            )
        });
        let phases = rig.probe.phases() - phases0;
        drop(rig.accs);
        let leak = rig.probe.leak_check(&rig.set);
        Ok(RepeatOut {
            throughput: ops as f64 / elapsed.as_secs_f64(),
            phases,
            diagnostic,
            leak,
        })
    }
}

fn timed_worker<A: Access>(set: &SetUnderTest, acc: &mut A, mut wl: Workload, stop: &AtomicBool) -> (u64, Option<Error>) {
    let mut ops = 0u64;
    while !stop.load(Relaxed) {
        let (op, key) = wl.next_op();
        if let Err(e) = set.apply(acc, op, key) {
            stop.store(true, Relaxed);
            return (ops, Some(e));
        }
        ops += 1;
    }
    (ops, None)
}

/// Runs every repeat of `cfg`. An exhausted pool ends that repeat early
/// and is reported in `diagnostics`.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchResult> {
    cfg.validate()?;
    let setup = cfg.setup();
    let opts = RigOptions {
        poison: cfg.poison,
        ..Default::default()
    };
    let mut result = BenchResult {
        config: cfg.clone(),
        throughput: Vec::with_capacity(cfg.repeats),
        mean_ops: 0.0,
        ci95: 0.0,
        ratio_nr: None,
        phases: 0,
        diagnostics: Vec::new(),
        leaks: Vec::new(),
    };
    for repeat in 0..cfg.repeats {
        let out = with_rig(&setup, opts.clone(), Repeat { cfg, repeat })?;
        result.throughput.push(out.throughput);
        result.phases += out.phases;
        result.diagnostics.extend(out.diagnostic);
        result.leaks.extend(out.leak);
    }
    (result.mean_ops, result.ci95) = mean_ci95(&result.throughput);
    Ok(result)
}

/// Fills in `ratio_nr` for every result that has a paired leaky run.
pub fn attach_ratios(results: &mut [BenchResult]) {
    let nr: Vec<(BenchConfig, f64)> = results
        .iter()
        .filter(|r| r.config.scheme == Scheme::Nr)
        .map(|r| (r.config.clone(), r.mean_ops))
        .collect();
    for r in results.iter_mut() {
        r.ratio_nr = nr
            .iter()
            .find(|(c, m)| r.config.pairs_with(c) && *m > 0.0)
            .map(|(_, m)| r.mean_ops / m);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Table,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "table" => Ok(Format::Table),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

pub const CSV_HEADER: &str = "ds,variant,scheme,range,threads,mix,repeats,mean_ops,ci95,ratio_nr";

/// One output row per configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub ds: Structure,
    pub variant: Variant,
    pub scheme: Scheme,
    pub range: u64,
    pub threads: usize,
    pub mix: Mix,
    pub repeats: usize,
    pub mean_ops: f64,
    pub ci95: f64,
    pub ratio_nr: Option<f64>,
}

impl From<&BenchResult> for Record {
    fn from(r: &BenchResult) -> Self {
        let c = &r.config;
        Record {
            ds: c.ds,
            variant: c.variant,
            scheme: c.scheme,
            range: c.range,
            threads: c.threads,
            mix: c.mix,
            repeats: c.repeats,
            mean_ops: r.mean_ops,
            ci95: r.ci95,
            ratio_nr: r.ratio_nr,
        }
    }
}

pub fn report(results: &[BenchResult], format: Format) -> Result<String> {
    if results.is_empty() {
        return Err(Error::Config("nothing to report".into()));
    }
    let records: Vec<Record> = results.iter().map(Record::from).collect();
    let ratio = |r: &Record| r.ratio_nr.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in &records {
                // the mix contains no commas, so nothing needs quoting
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{:.1},{:.1},{}",
                    r.ds, r.variant, r.scheme, r.range, r.threads, r.mix, r.repeats, r.mean_ops, r.ci95,
                    ratio(r)
                );
            }
        }
        Format::Json => {
            out = serde_json::to_string_pretty(&records).map_err(|e| Error::Config(e.to_string()))?;
            out.push('\n');
        }
        Format::Table => {
            let rows: Vec<[String; 10]> = records
                .iter()
                .map(|r| {
                    [
                        r.ds.to_string(),
                        r.variant.to_string(),
                        r.scheme.to_string(),
                        r.range.to_string(),
                        r.threads.to_string(),
                        r.mix.to_string(),
                        r.repeats.to_string(),
                        format!("{:.0}", r.mean_ops),
                        format!("{:.0}", r.ci95),
                        ratio(r),
                    ]
                })
                .collect();
            let header: Vec<&str> = CSV_HEADER.split(',').collect();
            let widths: Vec<usize> = (0..header.len())
                .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0).max(header[i].len()))
                .collect();
            let line = |cells: &mut dyn Iterator<Item = &str>, out: &mut String| {
                let cells: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
                let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            };
            line(&mut header.iter().copied(), &mut out);
            for r in &rows {
                line(&mut r.iter().map(String::as_str), &mut out);
            }
        }
    }
    Ok(out)
}

/// Parses records written by [`report`] in CSV form.
pub fn parse_csv(text: &str) -> Result<Vec<Record>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config("missing csv header".into()));
    }
    let bad = |l: &str| Error::Config(format!("malformed csv line `{l}`"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 10 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            Ok(Record {
                ds: f[0].parse()?,
                variant: f[1].parse()?,
                scheme: f[2].parse()?,
                range: f[3].parse().map_err(|_| bad(l))?,
                threads: f[4].parse().map_err(|_| bad(l))?,
                mix: f[5].parse()?,
                repeats: f[6].parse().map_err(|_| bad(l))?,
                mean_ops: num(f[7])?,
                ci95: num(f[8])?,
                ratio_nr: if f[9].is_empty() { None } else { Some(num(f[9])?) },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(scheme: Scheme, variant: Variant) -> BenchConfig {
        BenchConfig {
            scheme,
            variant,
            range: 64,
            threads: 2,
            duration_secs: 0.05,
            repeats: 2,
            pool: Some(if scheme == Scheme::Nr { 400_000 } else { 2_000 }),
            ..Default::default()
        }
    }

    #[test]
    fn mix_parse_and_validate() {
        assert_eq!("50:25:25".parse::<Mix>().unwrap(), Mix::new(50, 25, 25));
        assert!("50:25:20".parse::<Mix>().is_err());
        assert!("50:50".parse::<Mix>().is_err());
        assert!("a:b:c".parse::<Mix>().is_err());
    }

    #[test]
    fn workload_is_deterministic_per_thread() {
        let mix = Mix::new(20, 40, 40);
        let a: Vec<_> = Workload::new(7, 1, mix, 100).take(1000).collect();
        let b: Vec<_> = Workload::new(7, 1, mix, 100).take(1000).collect();
        let c: Vec<_> = Workload::new(7, 2, mix, 100).take(1000).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&(_, k)| (0..100).contains(&k)));
    }

    #[test]
    fn workload_mix_fidelity() {
        for mix in [Mix::new(50, 25, 25), Mix::new(90, 5, 5), Mix::new(0, 50, 50)] {
            let n = 200_000;
            let mut counts = [0usize; 3];
            for (op, _) in Workload::new(3, 0, mix, 1000).take(n) {
                counts[op as usize] += 1;
            }
            let want = [mix.contains, mix.insert, mix.remove];
            for i in 0..3 {
                let got = counts[i] as f64 * 100.0 / n as f64;
                assert!((got - want[i] as f64).abs() < 1.0, "{mix}: {got} vs {}", want[i]);
            }
        }
    }

    #[test]
    fn config_rejects_bad_pairings() {
        let mut c = quick(Scheme::Hp, Variant::Hhs);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.variant = Variant::Hm;
        c.validate().unwrap();
        c.pool = Some(10);
        assert!(c.validate().is_err());
        c.pool = None;
        c.mix = Mix::new(50, 50, 50);
        assert!(c.validate().is_err());
    }

    #[test]
    fn prefill_reaches_half_the_range() {
        for (ds, range) in [(Structure::List, 256u64), (Structure::Hash, 1000)] {
            let setup = Setup {
                ds,
                variant: Variant::Hhs,
                scheme: Scheme::Nr,
                threads: 1,
                pool: 5000,
                buckets: 100,
            };
            struct Fill(u64);
            impl RigUser for Fill {
                type Out = usize;
                fn run<A: Access + Send>(self, mut rig: Rig<A>) -> Result<usize> {
                    prefill(&rig.set, &mut rig.accs[0], self.0, 9)?;
                    Ok(rig.set.keys().len())
                }
            }
            assert_eq!(with_rig(&setup, RigOptions::default(), Fill(range)).unwrap(), range as usize / 2);
        }
    }

    #[test]
    fn every_scheme_runs_and_reports() {
        let mut results = Vec::new();
        for (s, v) in [
            (Scheme::Nr, Variant::Hhs),
            (Scheme::Fa, Variant::Hhs),
            (Scheme::Fa, Variant::Harris),
            (Scheme::Hp, Variant::Hm),
            (Scheme::Ebr, Variant::Hm),
        ] {
            let r = run_benchmark(&quick(s, v)).unwrap();
            assert_eq!(r.throughput.len(), 2);
            assert!(r.mean_ops > 0.0, "{s}");
            assert!(r.diagnostics.is_empty(), "{:?}", r.diagnostics);
            if s == Scheme::Fa {
                assert!(r.leaks.iter().all(LeakReport::ok), "{:?}", r.leaks);
            }
            results.push(r);
        }
        attach_ratios(&mut results);
        assert_eq!(results[0].ratio_nr, Some(1.0));
        let fa = &results[1];
        assert!((fa.ratio_nr.unwrap() - fa.mean_ops / results[0].mean_ops).abs() < 1e-9);

        let csv = report(&results, Format::Csv).unwrap();
        assert_eq!(csv.lines().count(), results.len() + 1);
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        assert_eq!(parse_csv(&csv).unwrap().len(), results.len());

        let json = report(&results, Format::Json).unwrap();
        let back: Vec<Record> = serde_json::from_str(&json).unwrap();
        let want: Vec<Record> = results.iter().map(Record::from).collect();
        assert_eq!(back, want);

        let table = report(&results, Format::Table).unwrap();
        assert_eq!(table.lines().count(), results.len() + 1);
        assert!("yaml".parse::<Format>().is_err());
    }

    #[test]
    fn exhaustion_is_a_diagnostic() {
        let mut c = quick(Scheme::Nr, Variant::Hhs);
        c.pool = Some(c.min_pool());
        c.duration_secs = 2.0;
        c.repeats = 1;
        let r = run_benchmark(&c).unwrap();
        assert_eq!(r.diagnostics.len(), 1, "{:?}", r.diagnostics);
        assert!(r.diagnostics[0].contains("exhausted"));
    }

    #[test]
    fn ci_uses_student_t() {
        let (m, h) = mean_ci95(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        // t(0.975, 2) = 4.3027; sd = 1; n = 3
        assert!((h - 4.302_652_7 / 3f64.sqrt()).abs() < 1e-4);
        assert_eq!(mean_ci95(&[5.0]), (5.0, 0.0));
    }
}
