use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tabsa_refine::cli::Source;
use tabsa_refine::cli::{
    inspect, resolve, Cli, Command as Sub, EvalOutcome, InspectTrace, RunConfig, ERROR_LOG, EVAL_REPORT, EVAL_TABLE,
    REFINED_FILE, REFINE_SUMMARY, RESOLVED_CONFIG,
};
use tabsa_refine::refiner::RefinementResult;

use clap::Parser;

const SMALL_SYNTHETIC: &str = "count = 60\ndim = 16\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tabsa-refine"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_synthetic(dir: &Path) -> PathBuf {
    let p = dir.join("synthetic.toml");
    fs::write(&p, SMALL_SYNTHETIC).unwrap();
    p
}

fn read_records(out: &Path) -> Vec<RefinementResult> {
    fs::read_to_string(out.join(REFINED_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read_report(out: &Path) -> EvalOutcome {
    serde_json::from_str(&fs::read_to_string(out.join(EVAL_REPORT)).unwrap()).unwrap()
}

/// Tiny SentiHood-format corpus and matching embedding file.
fn tiny_sentihood(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("tiny.json");
    fs::write(
        &data,
        r#"[
  {"id": 1, "text": "LOCATION1 is expensive",
   "opinions": [{"target_entity": "LOCATION1", "aspect": "price", "sentiment": "Negative"}]},
  {"id": 2, "text": "LOCATION1 is safe but LOCATION2 is far from the tube",
   "opinions": [{"target_entity": "LOCATION1", "aspect": "safety", "sentiment": "Positive"},
                {"target_entity": "LOCATION2", "aspect": "transit-location", "sentiment": "Negative"}]},
  {"id": 3, "text": "no targets here",
   "opinions": []}
]"#,
    )
    .unwrap();
    let glove = dir.join("vectors.txt");
    let words = [
        ("is", [0.1, 0.0, 0.2, -0.1]),
        ("expensive", [0.9, -0.3, 0.1, 0.4]),
        ("safe", [-0.2, 0.8, 0.0, 0.3]),
        ("but", [0.0, 0.1, 0.0, 0.0]),
        ("far", [0.3, 0.3, -0.6, 0.1]),
        ("from", [0.0, 0.0, 0.1, 0.1]),
        ("the", [0.05, 0.05, 0.05, 0.05]),
        ("tube", [0.2, -0.1, -0.7, 0.5]),
        ("price", [0.8, -0.2, 0.2, 0.3]),
        ("safety", [-0.3, 0.9, 0.1, 0.2]),
        ("transit", [0.1, 0.0, -0.8, 0.4]),
        ("location", [0.0, 0.2, -0.3, 0.1]),
        ("general", [0.1, 0.1, 0.1, -0.4]),
    ];
    let text: String = words
        .iter()
        .map(|(w, v)| format!("{w} {} {} {} {}\n", v[0], v[1], v[2], v[3]))
        .collect();
    fs::write(&glove, text).unwrap();
    (data, glove)
}

fn resolved(args: &[&str]) -> RunConfig {
    let cli = Cli::try_parse_from(std::iter::once("tabsa-refine").chain(args.iter().copied())).unwrap();
    match &cli.command {
        Sub::Refine(c) => resolve(c, None).unwrap(),
        Sub::Eval(e) => resolve(&e.common, Some(e)).unwrap(),
        Sub::Inspect(i) => resolve(&i.common, None).unwrap(),
        Sub::Selfcheck(_) => panic!("selfcheck has no run config"),
    }
}

#[test]
fn refine_writes_one_record_per_work_item() {
    let dir = tempfile::tempdir().unwrap();
    let syn = small_synthetic(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "refine",
        "--synthetic",
        syn.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let cfg = RunConfig::from_toml(&fs::read_to_string(out.join(RESOLVED_CONFIG)).unwrap()).unwrap();
    let ds = Source::load(&cfg).unwrap().dataset(&cfg, cfg.seed).unwrap();
    let mut expected = Vec::new();
    for s in &ds.sentences {
        for t in s.targets() {
            for a in &cfg.aspects {
                expected.push((s.id().to_string(), t.to_string(), a.clone()));
            }
        }
    }
    let records = read_records(&out);
    let got: Vec<(String, String, String)> = records
        .iter()
        .map(|r| (r.sentence_id.clone(), r.target_id.clone(), r.aspect.clone()))
        .collect();
    assert_eq!(got, expected);
    for r in &records {
        assert_eq!(r.t_refined.len(), cfg.dim);
        assert_eq!(r.a_refined.len(), cfg.dim);
        for (it, conv, k) in [
            (r.iterations.target, r.converged.target, r.k.target),
            (r.iterations.aspect, r.converged.aspect, r.k.aspect),
        ] {
            assert!((1..=cfg.refiner.max_iters).contains(&it));
            if conv {
                assert!(k <= cfg.refiner.c);
            }
        }
    }
    assert!(out.join(REFINE_SUMMARY).exists());
    // The error log is only written when some work item failed.
    assert!(!out.join(ERROR_LOG).exists());
}

#[test]
fn missing_embedding_file_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = tiny_sentihood(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "refine",
        "--data",
        data.to_str().unwrap(),
        "--glove",
        dir.path().join("absent.txt").to_str().unwrap(),
        "--dim",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.txt"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn sentihood_without_embeddings_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = tiny_sentihood(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "refine",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn data_and_synthetic_conflict() {
    let o = run(&["refine", "--data", "x.json", "--synthetic", "default"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_iteration_budget_stops_every_record_at_one() {
    let dir = tempfile::tempdir().unwrap();
    let syn = small_synthetic(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "refine",
        "--synthetic",
        syn.to_str().unwrap(),
        "--max-iters",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_records(&out);
    assert!(!records.is_empty());
    for r in &records {
        assert_eq!(r.iterations.target, 1);
        assert_eq!(r.iterations.aspect, 1);
    }
}

#[test]
fn sentihood_refine_skips_sentences_without_opinions() {
    let dir = tempfile::tempdir().unwrap();
    let (data, glove) = tiny_sentihood(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "refine",
        "--data",
        data.to_str().unwrap(),
        "--glove",
        glove.to_str().unwrap(),
        "--dim",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_records(&out);
    // Sentence 1 has one target, sentence 2 has two; four aspects each.
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| r.sentence_id != "3"));
}

#[test]
fn oracle_predictions_leave_every_delta_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let syn = small_synthetic(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "eval",
        "--synthetic",
        syn.to_str().unwrap(),
        "--oracle",
        "--refine-inline",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_report(&out);
    assert_eq!(report.runs.len(), 1);
    let run = &report.runs[0];
    assert_eq!(run.raw.aspect_strict_acc, Some(1.0));
    assert_eq!(run.raw.aspect_macro_f1, Some(1.0));
    for m in &report.summary {
        if let Some(d) = m.delta {
            assert_eq!(d.mean, 0.0, "{}", m.metric);
        }
    }
}

#[test]
fn eval_requires_a_refinement_source() {
    let dir = tempfile::tempdir().unwrap();
    let syn = small_synthetic(dir.path());
    let o = run(&[
        "eval",
        "--synthetic",
        syn.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_reads_refinements_from_a_refine_run() {
    let dir = tempfile::tempdir().unwrap();
    let syn = small_synthetic(dir.path());
    let refined = dir.path().join("refined");
    let o = run(&[
        "refine",
        "--synthetic",
        syn.to_str().unwrap(),
        "--out",
        refined.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let from_file = dir.path().join("from-file");
    let o = run(&[
        "eval",
        "--synthetic",
        syn.to_str().unwrap(),
        "--refined",
        refined.join(REFINED_FILE).to_str().unwrap(),
        "--out",
        from_file.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let inline = dir.path().join("inline");
    let o = run(&[
        "eval",
        "--synthetic",
        syn.to_str().unwrap(),
        "--refine-inline",
        "--out",
        inline.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(from_file.join(EVAL_REPORT)).unwrap(),
        fs::read(inline.join(EVAL_REPORT)).unwrap()
    );
}

#[test]
fn seed_sweep_reports_every_run_and_the_spread() {
    let dir = tempfile::tempdir().unwrap();
    let syn = small_synthetic(dir.path());
    let out = dir.path().join("out");
    let o = run(&[
        "eval",
        "--synthetic",
        syn.to_str().unwrap(),
        "--refine-inline",
        "--seeds",
        "3",
        "--seed",
        "11",
        "--emit-vectors",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_report(&out);
    let seeds: Vec<u64> = report.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![11, 12, 13]);
    let f1 = report.metric("aspect_macro_f1").unwrap();
    let raw: Vec<f64> = report.runs.iter().map(|r| r.raw.aspect_macro_f1.unwrap()).collect();
    let spread = f1.raw.unwrap();
    assert_eq!(spread.runs, 3);
    let mean = raw.iter().sum::<f64>() / 3.0;
    let var = raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0;
    assert!((spread.mean - mean).abs() < 1e-12);
    assert!((spread.stddev - var.sqrt()).abs() < 1e-12);
    let table = fs::read_to_string(out.join(EVAL_TABLE)).unwrap();
    assert!(table.contains("±"), "{table}");
    assert!(out.join(tabsa_refine::cli::VECTORS_CSV).exists());
}

#[test]
fn resolved_config_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let syn = small_synthetic(dir.path());
    let first = dir.path().join("first");
    let o = run(&[
        "eval",
        "--synthetic",
        syn.to_str().unwrap(),
        "--refine-inline",
        "--seed",
        "5",
        "--lr",
        "0.08",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second = dir.path().join("second");
    let o = run(&[
        "eval",
        "--config",
        first.join(RESOLVED_CONFIG).to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(first.join(EVAL_REPORT)).unwrap(),
        fs::read(second.join(EVAL_REPORT)).unwrap()
    );
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    fs::write(
        &cfg_path,
        "seed = 9\n[refiner]\nc = 3\nlearning_rate = 0.1\n[synthetic]\ncount = 30\n",
    )
    .unwrap();
    let cfg = resolved(&["refine", "--config", cfg_path.to_str().unwrap(), "--c", "2"]);
    assert_eq!(cfg.refiner.c, 2);
    assert_eq!(cfg.refiner.learning_rate, 0.1);
    assert_eq!(cfg.refiner.alpha, 1.0);
    assert_eq!(cfg.refiner.max_iters, 200);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.refiner.seed, 9);
    assert_eq!(cfg.synthetic.as_ref().unwrap().count, 30);
    assert_eq!(cfg.synthetic.as_ref().unwrap().seed, 9);

    let cfg = resolved(&["refine", "--config", cfg_path.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.refiner.seed, 4);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, "[refiner]\nlearning_rat = 0.1\n[synthetic]\n").unwrap();
    let o = run(&["refine", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn inspect_args<'a>(data: &'a Path, glove: &'a Path) -> Vec<&'a str> {
    vec![
        "inspect",
        "--data",
        data.to_str().unwrap(),
        "--glove",
        glove.to_str().unwrap(),
        "--dim",
        "4",
    ]
}

#[test]
fn inspect_short_sentence_converges_at_first_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let (data, glove) = tiny_sentihood(dir.path());
    let mut args = inspect_args(&data, &glove);
    args.extend(["1", "LOCATION1", "price"]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("target: converged at iteration 1"), "{text}");
    assert!(text.contains("aspect: converged at iteration 1"), "{text}");

    args.push("--json");
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace: InspectTrace = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(trace.iterations.target, 1);
    assert_eq!(trace.iterations.aspect, 1);
    assert!(trace.converged.target && trace.converged.aspect);
    assert_eq!(trace.tokens.len(), 3);
    assert_eq!(trace.loss_curve.target.len(), 1);
    assert_eq!(trace.render(), text);
}

#[test]
fn inspect_rejects_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (data, glove) = tiny_sentihood(dir.path());
    for tail in [
        ["99", "LOCATION1", "price"],
        ["1", "LOCATION2", "price"],
        ["1", "LOCATION1", "nightlife"],
    ] {
        let mut args = inspect_args(&data, &glove);
        args.extend(tail);
        let o = run(&args);
        assert_eq!(o.status.code(), Some(2), "{tail:?}");
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn selfcheck_passes() {
    let o = run(&["selfcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn help_exits_zero_and_bad_flags_exit_two() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["refine", "--no-such-flag"]).status.code(), Some(2));
}

/// A price cue word in a sentence should be among the tokens the aspect path
/// keeps for the price aspect.
#[test]
#[ignore = "the aspect objective pulls the refined aspect toward the refined target and away from the aspect vector, so cue words aligned with the aspect are rarely kept; measured rate is printed by the acceptance gate"]
fn price_cue_word_is_selected_for_price() {
    let cfg = resolved(&["inspect", "--synthetic", "default", "x", "LOCATION1", "price"]);
    let ds = Source::load(&cfg).unwrap().dataset(&cfg, cfg.seed).unwrap();
    for s in &ds.sentences {
        if !s.tokens().iter().any(|t| t == "expensive") {
            continue;
        }
        for t in s.targets() {
            if s.gold(t, "price") == tabsa_refine::corpus::Polarity::None {
                continue;
            }
            let trace = inspect(&cfg, s.id(), t, "price").unwrap();
            assert!(
                trace.selected(true).contains(&"expensive"),
                "{} {t}: {:?}",
                s.id(),
                trace.selected(true)
            );
        }
    }
}
