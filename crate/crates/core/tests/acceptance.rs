//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single PASS/FAIL line on stdout, visible even when output is captured.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use freeaccess::harness::{run_benchmark, BenchConfig, Mix, Structure};
use freeaccess::runtime::{decode, encode, FRAME0};
use freeaccess::verify::{
    alternation_run, poison_audit, stuck_thread_progress, swap_chain_check, trace_oracle, Mutation, PoisonConfig,
    StressConfig, StuckConfig,
};
use freeaccess::{
    clear_tag, Arena, Label, NodeLayout, OpSpec, Runtime, RuntimeConfig, Scheme, Variant, LOCALS, MARKER, NULL,
};

/// The checks are heavy and timing-sensitive; run them one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(n: u32, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    let _ = out.flush();
    assert!(pass, "criterion {n}: {detail}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn criterion_1_poison_audit() {
    let _g = serial();
    let t0 = Instant::now();
    let sound = poison_audit(&PoisonConfig::default()).unwrap();
    let elapsed = t0.elapsed();
    let mutants: Vec<_> = [Mutation::SkipValidate, Mutation::SkipFence]
        .into_iter()
        .map(|m| {
            poison_audit(&PoisonConfig {
                mutation: m,
                stop_on_violation: true,
                ..Default::default()
            })
            .unwrap()
        })
        .collect();
    let caught = mutants.iter().all(|v| !v.pass);
    let pass = sound.pass && sound.phases >= 50 && caught && elapsed <= Duration::from_secs(60);
    let detail = format!(
        "{} ops, {} phases, {} poisoned certified reads, {} frame violations in {:.1}s; mutants {}",
        sound.ops,
        sound.phases,
        sound.poison_certified,
        sound.frame_violations,
        elapsed.as_secs_f64(),
        mutants
            .iter()
            .map(|v| format!(
                "{}={}",
                v.mutation,
                if v.pass {
                    "missed".to_string()
                } else {
                    format!("caught({} poison, {} frame)", v.poison_certified, v.frame_violations)
                }
            ))
            .collect::<Vec<_>>()
            .join(" ")
    );
    verdict(1, pass, &detail);
}

#[test]
fn criterion_2_exactly_once_under_restart() {
    let _g = serial();
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let (mut injected, mut ops) = (0, 0);
    for seed in 0..20u64 {
        let variant = Variant::ALL[seed as usize % 3];
        let r = alternation_run(&StressConfig {
            variant,
            seed,
            threads: 4,
            ops_per_thread: 100_000,
            keys: 16,
            inject: true,
            ..Default::default()
        })
        .unwrap();
        injected += r.injected;
        ops += r.ops;
        if !r.pass() {
            failures.push(format!(
                "seed {seed} ({variant}): {:?} {:?}",
                r.verdict.violation.map(|v| v.to_string()),
                r.errors
            ));
        }
    }
    let elapsed = t0.elapsed();
    let pass = failures.is_empty() && injected > 0 && elapsed <= Duration::from_secs(120);
    let detail = if failures.is_empty() {
        format!(
            "20 seeds, {ops} ops, {injected} injected restarts, {:.1}s",
            elapsed.as_secs_f64()
        )
    } else {
        failures.join("; ")
    };
    verdict(2, pass, &detail);
}

#[test]
fn criterion_3_stuck_thread() {
    let _g = serial();
    let mut lines = Vec::new();
    let mut pass = true;
    for (scheme, expect) in [(Scheme::Fa, true), (Scheme::Hp, true), (Scheme::Ebr, false)] {
        let t0 = Instant::now();
        let v = stuck_thread_progress(&StuckConfig::new(scheme)).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        pass &= v.pass == expect && secs <= 30.0;
        lines.push(format!(
            "{scheme} {} ({}; {secs:.1}s)",
            if v.pass { "progressed" } else { "stalled" },
            v.detail
        ));
    }
    verdict(3, pass, &lines.join("; "));
}

#[test]
fn criterion_4_memory_bounded() {
    let _g = serial();
    let r = run_benchmark(&BenchConfig {
        ds: Structure::List,
        variant: Variant::Hhs,
        scheme: Scheme::Fa,
        range: 256,
        threads: 8,
        duration_secs: 60.0,
        repeats: 1,
        mix: Mix::new(50, 25, 25),
        pool: Some(50_000),
        ..Default::default()
    })
    .unwrap();
    let leaks_ok = !r.leaks.is_empty() && r.leaks.iter().all(|l| l.ok());
    let pass = r.diagnostics.is_empty() && leaks_ok;
    let detail = format!(
        "{:.0} ops/s over 60s, {} phases, diagnostics {:?}, leak check {:?}",
        r.mean_ops, r.phases, r.diagnostics, r.leaks
    );
    verdict(4, pass, &detail);
}

/// Table of small runtime and tracer cases; returns (passed, total, failures).
#[allow(clippy::vec_init_then_push)]
fn root_gathering_table() -> (usize, usize, Vec<String>) {
    let mut cases: Vec<(&str, bool)> = Vec::new();

    // dirty/phase word
    cases.push(("encode(false, 0) = 0", encode(false, 0) == 0));
    cases.push(("encode(true, 5) = 0x501", encode(true, 5) == 0x501));
    cases.push((
        "encode(true, 2^56-1) = 0xFFFFFFFFFFFFFF01",
        encode(true, (1 << 56) - 1) == 0xFFFF_FFFF_FFFF_FF01,
    ));
    cases.push(("decode(0) = (false, 0)", decode(0) == (false, 0)));
    cases.push(("decode(0x501) = (true, 5)", decode(0x501) == (true, 5)));
    cases.push((
        "decode(0xFFFFFFFFFFFFFF01) = (true, 2^56-1)",
        decode(0xFFFF_FFFF_FFFF_FF01) == (true, (1 << 56) - 1),
    ));

    // tag clearing
    let addr = 0x0000_1000_0000_0040u64;
    cases.push(("clear_tag(addr|1) = addr", clear_tag(addr | 1) == addr));
    cases.push(("clear_tag(addr) = addr", clear_tag(addr) == addr));
    cases.push(("clear_tag is idempotent", clear_tag(clear_tag(addr | 1)) == clear_tag(addr | 1)));

    let rt = Runtime::new(RuntimeConfig {
        max_threads: 4,
        ..Default::default()
    })
    .unwrap();
    let arena = rt.add_arena(16, NodeLayout::list_node()).unwrap();
    let a = arena.pop_free(0).unwrap().raw();
    let b = arena.pop_free(0).unwrap().raw();
    let spec = OpSpec::new(Label(0), 2).unwrap();
    let roots = |rt: &Runtime| rt.gather_local_roots().into_iter().collect::<BTreeSet<u64>>();

    // marker skip
    let mut t0 = rt.register().unwrap();
    cases.push(("fresh thread holds the marker", rt.record(t0.tid()).holds_marker()));
    cases.push(("thread with marker contributes nothing", roots(&rt).is_empty()));
    t0.op_begin(&spec, &[], [0; LOCALS]).unwrap();
    t0.begin_write_only(&[a | 1]).unwrap();
    cases.push(("arbiter flips 1 -> 9", t0.arbiter() == FRAME0 ^ 8));
    cases.push(("publication erases the marker", !rt.record(t0.tid()).holds_marker()));
    cases.push(("tagged slot contributes the untagged address", roots(&rt) == BTreeSet::from([a])));

    // dual-frame enumeration: both frames stay visible until op_end
    t0.end_write_only(Label(1), [0; LOCALS]);
    t0.begin_write_only(&[b]).unwrap();
    cases.push(("arbiter flips back 9 -> 1", t0.arbiter() == FRAME0));
    cases.push(("both frames are gathered", roots(&rt) == BTreeSet::from([a, b])));
    t0.op_end();
    cases.push(("op_end writes the marker", rt.record(t0.tid()).slot(9, 0) == MARKER));
    cases.push(("after op_end the thread is skipped", roots(&rt).is_empty()));

    // two threads with frames {a}, {b} and one marker thread
    let mut t1 = rt.register().unwrap();
    let mut t2 = rt.register().unwrap();
    let _t3 = rt.register().unwrap();
    t1.op_begin(&spec, &[a], [0; LOCALS]).unwrap();
    t2.op_begin(&spec, &[b], [0; LOCALS]).unwrap();
    cases.push(("frames {a}, {b} and a marker give {a, b}", roots(&rt) == BTreeSet::from([a, b])));
    t1.op_end();
    t2.op_end();

    // a read-only operation contributes nothing and sets no frame
    t1.op_begin(&spec, &[], [5, 0, 0, 0]).unwrap();
    cases.push(("read-only operation checkpoint is (locals, entry)", t1.checkpoint() == ([5, 0, 0, 0], Label(0))));
    cases.push(("read-only operation publishes nothing", roots(&rt).is_empty()));
    t1.op_end();

    // phase initiation
    let p = rt.phase();
    let q = rt.init_reclamation();
    cases.push(("init_reclamation advances the phase by one", q == p + 1));
    cases.push(("own dirty flag set with the new phase", rt.record(t1.tid()).dirty_phase() == (true, q)));
    rt.help(q);
    cases.push(("help drives the phase to completion", rt.phases_completed() == 1));
    rt.help(q);
    cases.push(("help on a finished phase is a no-op", rt.phases_completed() == 1));

    // tracing: list head -> 3 nodes, 2 floating
    let rt = Runtime::new(RuntimeConfig::default()).unwrap();
    let arena: Arc<Arena> = rt.add_arena(8, NodeLayout::list_node()).unwrap();
    let n: Vec<u64> = (0..5).map(|_| arena.pop_free(0).unwrap().raw()).collect();
    arena.cell(n[0], 1).unwrap().store(n[1] | 1, SeqCst);
    arena.cell(n[1], 1).unwrap().store(n[2], SeqCst);
    arena.cell(n[2], 1).unwrap().store(NULL, SeqCst);
    arena.register_global_root(Arc::new(AtomicU64::new(n[0])));
    cases.push(("3 reachable, 2 floating: one phase reclaims 2", rt.reclamation_phase() == 2));
    cases.push(("tagged link followed during tracing", arena.marks().is_allocated(arena.resolve(n[1]).unwrap())));

    let failures: Vec<String> = cases.iter().filter(|c| !c.1).map(|c| c.0.to_string()).collect();
    (cases.len() - failures.len(), cases.len(), failures)
}

#[test]
fn criterion_5_root_gathering_tables() {
    let _g = serial();
    let (ok, total, failures) = root_gathering_table();
    verdict(
        5,
        failures.is_empty(),
        &format!("{ok}/{total} table cases{}", if failures.is_empty() { String::new() } else { format!(", failed: {}", failures.join(", ")) }),
    );
}

#[test]
fn criterion_6_tracing_oracle() {
    let _g = serial();
    let mut parts = Vec::new();
    let mut pass = true;
    for helpers in [1, 2, 4] {
        let v = trace_oracle(1000, 64, helpers, 17 + helpers as u64).unwrap();
        pass &= v.pass;
        parts.push(match &v.first_mismatch {
            None => format!("{helpers} helpers: 1000/1000 heaps"),
            Some(m) => format!("{helpers} helpers: {} mismatches, first {m}", v.mismatches),
        });
    }
    verdict(6, pass, &parts.join("; "));
}

#[test]
fn criterion_7_relative_performance() {
    let _g = serial();
    let base = BenchConfig {
        range: 10_000,
        duration_secs: 1.0,
        repeats: 3,
        mix: Mix::new(50, 25, 25),
        ..Default::default()
    };
    let run = |scheme, variant, threads| {
        run_benchmark(&BenchConfig {
            scheme,
            variant,
            threads,
            ..base.clone()
        })
        .unwrap()
        .mean_ops
    };
    let nr1 = run(Scheme::Nr, Variant::Hhs, 1);
    let fa1 = run(Scheme::Fa, Variant::Hhs, 1);
    let fa4 = run(Scheme::Fa, Variant::Hhs, 4);
    let hp4 = run(Scheme::Hp, Variant::Hm, 4);
    let (r1, r4) = (fa1 / nr1, fa4 / hp4);
    verdict(
        7,
        r1 >= 0.8 && r4 >= 1.2,
        &format!(
            "LL5K 1 thread fa/nr = {r1:.3} (need >= 0.8); 4 threads fa/hp = {r4:.3} (need >= 1.2); \
             ops/s nr1 {nr1:.0} fa1 {fa1:.0} fa4 {fa4:.0} hp4 {hp4:.0}"
        ),
    );
}

#[test]
fn criterion_8_swap_chains() {
    let _g = serial();
    let mut parts = Vec::new();
    let mut pass = true;
    for (n, trials) in [(1usize, 1_000u64), (2, 5_000), (8, 10_000)] {
        let v = swap_chain_check(n, trials, 3).unwrap();
        pass &= v.pass;
        parts.push(format!(
            "n={n}: {} violations in {trials} trials, {} distinct chains, {} restarts",
            v.violations, v.distinct_chains, v.restarts
        ));
        if let Some(f) = v.first_violation {
            parts.push(f);
        }
    }
    verdict(8, pass, &parts.join("; "));
}
