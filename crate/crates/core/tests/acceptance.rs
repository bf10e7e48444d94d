//! Acceptance gate. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.
//!
//! The SentiHood check reads the dataset from `TABSA_SENTIHOOD` (a file or
//! a directory of JSON files) and is skipped when that is unset or missing.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use tabsa_refine::cli::{cmd_eval, inspect, RunConfig, Source, EVAL_REPORT};
use tabsa_refine::corpus::{load_sentihood_path, Polarity, SyntheticConfig};
use tabsa_refine::refiner::RefinerConfig;
use tabsa_refine::selfcheck;

const SEED: u64 = 20_240_601;

const SENTIHOOD_TOTAL: usize = 5215;
const SENTIHOOD_SINGLE: usize = 3862;
const SENTIHOOD_DOUBLE: usize = 1353;
const SENTIHOOD_BUDGET: Duration = Duration::from_secs(10);

const GRADIENT_INSTANCES: usize = 100;
const GRADIENT_STEP: f64 = 1e-5;
const GRADIENT_REL_TOL: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(30);

const DESCENT_INSTANCES: usize = 100;
const DESCENT_TOL: f64 = 1e-12;

const STEP_VECTORS: usize = 1000;

const METRIC_INSTANCES: usize = 200;
const METRIC_TOL: f64 = 1e-12;

const REPLICATION_SEEDS: usize = 10;
const REPLICATION_MIN_SENTENCES: usize = 500;
const REPLICATION_MIN_F1_GAIN: f64 = 0.01;
const REPLICATION_BUDGET: Duration = Duration::from_secs(300);
const SEPARATION_MIN_WINS: usize = 8;

struct Gate {
    failed: usize,
}

impl Gate {
    fn record(&mut self, passed: bool, criterion: &str, detail: String) {
        if !passed {
            self.failed += 1;
        }
        println!("{} {criterion}: {detail}", if passed { "PASS" } else { "FAIL" });
    }

    fn skip(&self, criterion: &str, why: &str) {
        println!("SKIP {criterion}: {why}");
    }
}

fn dataset_fidelity(gate: &mut Gate) {
    let name = "dataset fidelity (SentiHood 5215/3862/1353, < 10 s)";
    let Some(path) = std::env::var_os("TABSA_SENTIHOOD").map(PathBuf::from) else {
        gate.skip(name, "TABSA_SENTIHOOD not set");
        return;
    };
    if !path.exists() {
        gate.skip(name, &format!("{} not found", path.display()));
        return;
    }
    let start = Instant::now();
    match load_sentihood_path(&path) {
        Ok(outcome) => {
            let elapsed = start.elapsed();
            let counts = (
                outcome.sentences.len(),
                outcome.single_target_count(),
                outcome.two_target_count(),
            );
            gate.record(
                counts == (SENTIHOOD_TOTAL, SENTIHOOD_SINGLE, SENTIHOOD_DOUBLE) && elapsed < SENTIHOOD_BUDGET,
                name,
                format!(
                    "{}/{}/{} sentences, {} rejected records, {:.2}s",
                    counts.0,
                    counts.1,
                    counts.2,
                    outcome.rejected.len(),
                    elapsed.as_secs_f64()
                ),
            );
        }
        Err(e) => gate.record(false, name, format!("load failed: {e}")),
    }
}

fn property_suites(gate: &mut Gate) {
    match selfcheck::gradient_suite(SEED, GRADIENT_INSTANCES, GRADIENT_STEP, GRADIENT_REL_TOL) {
        Ok(r) => gate.record(
            r.passed && r.seconds < GRADIENT_BUDGET.as_secs_f64(),
            "gradient suite (relative error < 1e-4, < 30 s)",
            r.line(),
        ),
        Err(e) => gate.record(false, "gradient suite", e.to_string()),
    }
    match selfcheck::descent_suite(SEED, DESCENT_INSTANCES, &RefinerConfig::default(), DESCENT_TOL) {
        Ok(r) => gate.record(
            r.passed,
            "descent + termination suite (max_iters 200, rise ≤ 1e-12, converged ⇒ k ≤ 4)",
            r.line(),
        ),
        Err(e) => gate.record(false, "descent + termination suite", e.to_string()),
    }
    let r = selfcheck::step_function_suite(SEED, STEP_VECTORS);
    gate.record(r.passed, "step-function suite (1000 vectors, bit-exact)", r.line());
    match selfcheck::metrics_suite(SEED, METRIC_INSTANCES, METRIC_TOL) {
        Ok(r) => gate.record(r.passed, "metrics oracle suite (200 instances, ≤ 1e-12)", r.line()),
        Err(e) => gate.record(false, "metrics oracle suite", e.to_string()),
    }
}

fn synthetic_run(out: PathBuf, seeds: usize, workers: Option<usize>) -> RunConfig {
    let synthetic = SyntheticConfig {
        seed: SEED,
        ..SyntheticConfig::default()
    };
    RunConfig {
        seed: SEED,
        seeds,
        dim: synthetic.dim,
        synthetic: Some(synthetic),
        refine_inline: true,
        workers,
        out,
        refiner: RefinerConfig {
            seed: SEED,
            ..RefinerConfig::default()
        },
        ..RunConfig::default()
    }
}

fn replication(gate: &mut Gate, scratch: &std::path::Path) {
    let cfg = synthetic_run(scratch.join("sweep"), REPLICATION_SEEDS, None);
    let start = Instant::now();
    let outcome = match cmd_eval(&cfg, &mut std::io::sink()) {
        Ok(o) => o,
        Err(e) => {
            gate.record(false, "directional replication", format!("eval failed: {e}"));
            gate.record(false, "separation replication", "eval failed".into());
            return;
        }
    };
    let elapsed = start.elapsed();
    let sentences = cfg.synthetic.as_ref().map_or(0, |s| s.count);
    let f1 = outcome.metric("aspect_macro_f1").and_then(|m| m.delta);
    let per_seed: Vec<String> = outcome
        .runs
        .iter()
        .map(|r| match (r.raw.aspect_macro_f1, r.refined.aspect_macro_f1) {
            (Some(a), Some(b)) => format!("{:+.1}", 100.0 * (b - a)),
            _ => "---".into(),
        })
        .collect();
    let gain = f1.map_or(f64::NEG_INFINITY, |d| d.mean);
    gate.record(
        sentences >= REPLICATION_MIN_SENTENCES
            && f1.is_some_and(|d| d.runs == REPLICATION_SEEDS)
            && gain >= REPLICATION_MIN_F1_GAIN
            && elapsed < REPLICATION_BUDGET,
        "directional replication (refined − raw aspect macro-F1 ≥ 1.0 point over 10 seeds, < 5 min)",
        format!(
            "{sentences} sentences, 4 aspects; mean gain {:+.2} ± {:.2} points (per seed: {}); {:.1}s",
            100.0 * gain,
            f1.map_or(f64::NAN, |d| 100.0 * d.stddev),
            per_seed.join(" "),
            elapsed.as_secs_f64()
        ),
    );

    let ratios: Vec<String> = outcome
        .runs
        .iter()
        .map(|r| {
            let v = |s: &Option<tabsa_refine::harness::Separation>| s.map_or(f64::NAN, |s| s.ratio);
            format!("{:.3}→{:.3}", v(&r.separation.initial), v(&r.separation.refined))
        })
        .collect();
    gate.record(
        outcome.separation_wins >= SEPARATION_MIN_WINS,
        "separation replication (learned ã vs ã at initialization, ≥ 8 of 10 seeds)",
        format!(
            "refined better on {} of {} seeds; ratio initial→refined {}",
            outcome.separation_wins,
            outcome.runs.len(),
            ratios.join(" ")
        ),
    );
    let static_inf = outcome
        .runs
        .iter()
        .filter(|r| r.separation.static_aspect.is_some_and(|s| s.ratio.is_infinite()))
        .count();
    println!(
        "INFO separation against the static aspect vectors a: ratio +inf (zero spread) on {static_inf} of {} seeds, so no refined population can exceed it",
        outcome.runs.len()
    );
}

fn determinism(gate: &mut Gate, scratch: &std::path::Path) {
    let name = "determinism (byte-identical EvalReports across worker counts)";
    let mut reports = Vec::new();
    for workers in [1, 4] {
        let cfg = synthetic_run(scratch.join(format!("det-{workers}")), 1, Some(workers));
        if let Err(e) = cmd_eval(&cfg, &mut std::io::sink()) {
            gate.record(false, name, format!("eval with {workers} workers failed: {e}"));
            return;
        }
        match std::fs::read(cfg.out.join(EVAL_REPORT)) {
            Ok(bytes) => reports.push(bytes),
            Err(e) => {
                gate.record(false, name, format!("report unreadable: {e}"));
                return;
            }
        }
    }
    gate.record(
        reports[0] == reports[1],
        name,
        format!("1 vs 4 workers, {} report bytes", reports[0].len()),
    );
}

/// How often the price cue `expensive` is kept by the aspect path for the
/// price aspect. Reported, not gated.
fn price_cue_rate(scratch: &std::path::Path) {
    let cfg = synthetic_run(scratch.join("inspect"), 1, None);
    let rate = (|| -> tabsa_refine::error::Result<(usize, usize)> {
        let ds = Source::load(&cfg)?.dataset(&cfg, cfg.seed)?;
        let (mut kept, mut total) = (0, 0);
        for s in ds
            .sentences
            .iter()
            .filter(|s| s.tokens().iter().any(|t| t == "expensive"))
        {
            for t in s.targets() {
                if s.gold(t, "price") == Polarity::None {
                    continue;
                }
                total += 1;
                if inspect(&cfg, s.id(), t, "price")?.selected(true).contains(&"expensive") {
                    kept += 1;
                }
            }
        }
        Ok((kept, total))
    })();
    match rate {
        Ok((kept, total)) => println!(
            "INFO price cue selection: `expensive` kept by the aspect path in {kept} of {total} price-labelled traces"
        ),
        Err(e) => println!("INFO price cue selection: could not measure ({e})"),
    }
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut gate = Gate { failed: 0 };
    dataset_fidelity(&mut gate);
    property_suites(&mut gate);
    replication(&mut gate, scratch.path());
    determinism(&mut gate, scratch.path());
    price_cue_rate(scratch.path());
    if gate.failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", gate.failed);
        ExitCode::FAILURE
    }
}
