use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use freeaccess::harness::{attach_ratios, report, run_benchmark, BenchConfig, Format, Mix, Structure};
use freeaccess::verify::{
    alternation_run, poison_audit, stuck_thread_progress, swap_chain_check, trace_oracle, Mutation, PoisonConfig,
    StressConfig, StuckConfig, SuspensionScript,
};
use freeaccess::{Scheme, Variant};

#[derive(Parser)]
#[command(name = "freeaccess", version, about = "Benchmark and check lock-free sets under several reclamation schemes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Measure throughput for every scheme and thread count given.
    Bench(BenchArgs),
    /// Run one of the correctness checks and print its verdict as JSON.
    #[command(subcommand)]
    Verify(VerifyCmd),
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "list")]
    ds: Structure,
    /// List variant; schemes that cannot run it fall back to hm.
    #[arg(long, default_value = "hhs")]
    variant: Variant,
    #[arg(long, value_delimiter = ',', default_value = "fa,hp,ebr,nr")]
    scheme: Vec<Scheme>,
    /// Keys are drawn from 0..range.
    #[arg(long, default_value_t = 256)]
    range: u64,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    duration_secs: f64,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// contains:insert:remove percentages.
    #[arg(long, default_value = "50:25:25")]
    mix: Mix,
    /// Node pool size; defaults depend on the scheme.
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// csv, json or table.
    #[arg(long, default_value = "table")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite freed nodes with a poison pattern.
    #[arg(long)]
    poison: bool,
    #[arg(long, default_value_t = 10_000)]
    buckets: usize,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value = "list")]
    ds: Structure,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, default_value = "fa")]
    scheme: Scheme,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long)]
    range: Option<u64>,
    #[arg(long)]
    pool: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    buckets: Option<usize>,
    #[arg(long)]
    mix: Option<Mix>,
}

#[derive(Subcommand)]
enum VerifyCmd {
    /// Random operations with injected restarts, checked for alternation per key.
    Alternation {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        /// Do not inject restarts.
        #[arg(long)]
        no_inject: bool,
    },
    /// Park threads at labels and check that reclamation still progresses.
    Stuck {
        #[command(flatten)]
        common: Common,
        /// Suspension script, one `thread:label:phases=N|manual` per line.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
        #[arg(long, default_value_t = 10)]
        min_phases: u64,
    },
    /// Poison freed nodes and count certified reads of poison.
    Poison {
        #[command(flatten)]
        common: Common,
        /// none, skip-validate, skip-fence or skip-marker.
        #[arg(long, default_value = "none")]
        mutation: Mutation,
        /// Total operations over all threads.
        #[arg(long, default_value_t = 1_000_000)]
        ops: u64,
    },
    /// Concurrent restartable swaps on one cell must form a single chain.
    Swap {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare parallel tracing against a sequential reachability oracle.
    Trace {
        #[arg(long, default_value_t = 1000)]
        heaps: usize,
        #[arg(long, default_value_t = 64)]
        nodes: usize,
        #[arg(long, default_value_t = 4)]
        helpers: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn bench(a: BenchArgs) -> Result<bool> {
    let mut results = Vec::new();
    for &threads in &a.threads {
        for &scheme in &a.scheme {
            let variant = if a.variant.supports(scheme) {
                a.variant
            } else {
                eprintln!("note: {scheme} cannot run the {} variant, using hm", a.variant);
                Variant::Hm
            };
            let cfg = BenchConfig {
                ds: a.ds,
                variant,
                scheme,
                range: a.range,
                threads,
                duration_secs: a.duration_secs,
                repeats: a.repeats,
                mix: a.mix,
                pool: a.pool,
                seed: a.seed,
                buckets: a.buckets,
                poison: a.poison,
            };
            let r = run_benchmark(&cfg).with_context(|| format!("{scheme} with {threads} threads"))?;
            for d in &r.diagnostics {
                eprintln!("{scheme}/{threads}: {d}");
            }
            results.push(r);
        }
    }
    attach_ratios(&mut results);
    let text = report(&results, a.format)?;
    match a.out {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(true)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn verify(cmd: VerifyCmd) -> Result<bool> {
    match cmd {
        VerifyCmd::Alternation { common: c, ops, no_inject } => {
            let d = StressConfig::default();
            let cfg = StressConfig {
                ds: c.ds,
                variant: c.variant.unwrap_or(if c.scheme == Scheme::Fa { d.variant } else { Variant::Hm }),
                scheme: c.scheme,
                threads: c.threads,
                ops_per_thread: ops,
                keys: c.range.unwrap_or(d.keys),
                mix: c.mix.unwrap_or(d.mix),
                seed: c.seed,
                pool: c.pool.unwrap_or(d.pool),
                buckets: c.buckets.unwrap_or(d.buckets),
                inject: !no_inject,
            };
            let r = alternation_run(&cfg)?;
            print_json(&r)?;
            Ok(r.pass())
        }
        VerifyCmd::Stuck { common: c, script, timeout_secs, min_phases } => {
            let mut cfg = StuckConfig::new(c.scheme);
            if let Some(path) = script {
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                cfg.script = text.parse::<SuspensionScript>()?;
            }
            cfg.ds = c.ds;
            cfg.variant = c.variant.unwrap_or(cfg.variant);
            cfg.threads = c.threads;
            cfg.range = c.range.unwrap_or(cfg.range);
            cfg.pool = c.pool.unwrap_or(cfg.pool);
            cfg.buckets = c.buckets.unwrap_or(cfg.buckets);
            cfg.mix = c.mix.unwrap_or(cfg.mix);
            cfg.seed = c.seed;
            cfg.timeout = Duration::from_secs(timeout_secs);
            cfg.min_phases = min_phases;
            let v = stuck_thread_progress(&cfg)?;
            print_json(&v)?;
            Ok(v.pass)
        }
        VerifyCmd::Poison { common: c, mutation, ops } => {
            if c.scheme != Scheme::Fa {
                bail!("the poison audit runs the tracing scheme only");
            }
            let d = PoisonConfig::default();
            let cfg = PoisonConfig {
                ds: c.ds,
                variant: c.variant.unwrap_or(d.variant),
                threads: c.threads,
                total_ops: ops,
                range: c.range.unwrap_or(d.range),
                pool: c.pool.unwrap_or(d.pool),
                buckets: c.buckets.unwrap_or(d.buckets),
                mix: c.mix.unwrap_or(d.mix),
                seed: c.seed,
                mutation,
                stop_on_violation: mutation != Mutation::None,
                ..d
            };
            let v = poison_audit(&cfg)?;
            print_json(&v)?;
            Ok(v.pass)
        }
        VerifyCmd::Swap { n, trials, seed } => {
            let v = swap_chain_check(n, trials, seed)?;
            print_json(&v)?;
            Ok(v.pass)
        }
        VerifyCmd::Trace { heaps, nodes, helpers, seed } => {
            let v = trace_oracle(heaps, nodes, helpers, seed)?;
            print_json(&v)?;
            Ok(v.pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Bench(a) => bench(a),
        Cmd::Verify(v) => verify(v),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
