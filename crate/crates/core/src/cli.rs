//! Command-line entry point: `refine`, `eval`, `inspect` and `selfcheck`.
//!
//! Settings resolve as flags over config file over built-in defaults. The
//! resolved [`RunConfig`] is written beside every output, and feeding it
//! back through `--config` reproduces the run.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    default_aspects, filter_top_aspects, generate_synthetic, load_sentihood_path, synthetic_embeddings, Polarity,
    Sentence, Split, SyntheticConfig,
};
use crate::embedding::{parse_embedding_file, AspectEmbedding, EmbeddingTable, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::harness::{
    assign_split, build_examples, evaluate, separation_statistic, train, Example, Mode, RefinedIndex, Separation,
    TrainConfig,
};
use crate::metrics::{render_delta_row, render_table, EvalReport, PairPrediction};
use crate::refiner::{
    read_jsonl, refine_corpus, refine_work_item, write_jsonl, PerPath, RefinementResult, RefinerConfig,
};
use crate::selfcheck;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const REFINED_FILE: &str = "refined.jsonl";
pub const REFINE_SUMMARY: &str = "refine_summary.json";
pub const ERROR_LOG: &str = "errors.log";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_TABLE: &str = "eval_table.txt";
pub const VECTORS_CSV: &str = "aspect_vectors.csv";

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Sweep run `i` uses `seed + i` for the refiner, target
    /// embeddings, the split, and the synthetic corpus.
    pub seed: u64,
    /// Number of seeds in an evaluation sweep.
    pub seeds: usize,
    /// GloVe-format embedding file; synthetic runs default to the
    /// generator's own table.
    pub glove: Option<PathBuf>,
    pub dim: usize,
    /// SentiHood JSON file or directory.
    pub data: Option<PathBuf>,
    pub aspects: Vec<String>,
    pub out: PathBuf,
    /// Parallel map width; all available cores when unset.
    pub workers: Option<usize>,
    pub json: bool,
    /// Refine inside `eval` instead of reading `refined`.
    pub refine_inline: bool,
    /// Refined-embedding file consumed by `eval`.
    pub refined: Option<PathBuf>,
    /// Replace both classifiers with gold predictions.
    pub oracle: bool,
    /// Write per-aspect vectors as CSV next to the report.
    pub emit_vectors: bool,
    pub synthetic: Option<SyntheticConfig>,
    pub refiner: RefinerConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 1,
            glove: None,
            dim: DEFAULT_DIM,
            data: None,
            aspects: default_aspects(),
            out: PathBuf::from("out"),
            workers: None,
            json: false,
            refine_inline: false,
            refined: None,
            oracle: false,
            emit_vectors: false,
            synthetic: None,
            refiner: RefinerConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => return Err(Error::input("choose one data source: data or synthetic")),
            (None, None) => return Err(Error::input("no data source: pass --data PATH or --synthetic CFG")),
            (Some(_), None) if self.glove.is_none() => {
                return Err(Error::input("SentiHood data needs an embedding file (--glove)"))
            }
            _ => {}
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.seeds == 0 {
            return Err(Error::input("seeds must be positive"));
        }
        if self.aspects.is_empty() {
            return Err(Error::input("aspect set must not be empty"));
        }
        if self.workers == Some(0) {
            return Err(Error::input("workers must be positive"));
        }
        self.refiner.validate()
    }

    /// Seed of sweep run `i`.
    pub fn run_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::input(format!("config does not serialize: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: toml::Table = text
            .parse()
            .map_err(|e| Error::input(format!("bad config file: {e}")))?;
        Self::from_table(file)
    }

    fn from_table(overrides: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut base, overrides);
        base.try_into()
            .map_err(|e| Error::input(format!("bad config file: {e}")))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "tabsa-refine",
    version,
    about = "Context-aware target and aspect embedding refinement"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Refine every (sentence, target, aspect) and write JSON lines.
    Refine(CommonArgs),
    /// Train raw and refined classifiers and compare them.
    Eval(EvalArgs),
    /// Trace one refinement word by word.
    Inspect(InspectArgs),
    /// Run the gradient, descent, step-function and metric suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub glove: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub dim: Option<usize>,
    /// SentiHood JSON file or directory.
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Synthetic corpus config file, or `default`.
    #[arg(long, value_name = "CFG")]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Machine-readable output on stdout.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Refine inside the evaluation instead of reading a refined file.
    #[arg(long)]
    pub refine_inline: bool,
    /// Refined-embedding file from `refine`.
    #[arg(long, value_name = "PATH")]
    pub refined: Option<PathBuf>,
    /// Sweep this many consecutive seeds and report mean and stddev.
    #[arg(long, value_name = "N")]
    pub seeds: Option<usize>,
    /// Write per-aspect vectors as CSV.
    #[arg(long)]
    pub emit_vectors: bool,
    /// Replace both classifiers with gold predictions.
    #[arg(long, hide = true)]
    pub oracle: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    pub sentence_id: String,
    pub target: String,
    pub aspect: String,
}

#[derive(Debug, Clone, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Resolves flags over the config file over defaults.
pub fn resolve(common: &CommonArgs, eval: Option<&EvalArgs>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_toml(&read_text(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &common.glove {
        cfg.glove = Some(v.clone());
    }
    if let Some(v) = common.dim {
        cfg.dim = v;
    }
    if let Some(v) = &common.data {
        cfg.data = Some(v.clone());
        cfg.synthetic = None;
    }
    if let Some(v) = &common.synthetic {
        cfg.synthetic = Some(if v == "default" {
            SyntheticConfig::default()
        } else {
            SyntheticConfig::from_toml_str(&read_text(Path::new(v))?)?
        });
        cfg.data = None;
    }
    if let Some(v) = common.c {
        cfg.refiner.c = v;
    }
    if let Some(v) = common.alpha {
        cfg.refiner.alpha = v;
    }
    if let Some(v) = common.beta {
        cfg.refiner.beta = v;
    }
    if let Some(v) = common.lambda {
        cfg.refiner.lambda = v;
    }
    if let Some(v) = common.lr {
        cfg.refiner.learning_rate = v;
    }
    if let Some(v) = common.max_iters {
        cfg.refiner.max_iters = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.workers {
        cfg.workers = Some(v);
    }
    if let Some(v) = &common.out {
        cfg.out = v.clone();
    }
    cfg.json |= common.json;
    if let Some(e) = eval {
        cfg.refine_inline |= e.refine_inline;
        cfg.oracle |= e.oracle;
        cfg.emit_vectors |= e.emit_vectors;
        if let Some(v) = &e.refined {
            cfg.refined = Some(v.clone());
        }
        if let Some(v) = e.seeds {
            cfg.seeds = v;
        }
    }
    // the master seed drives every seeded component
    cfg.refiner.seed = cfg.seed;
    if let Some(s) = cfg.synthetic.as_mut() {
        s.seed = cfg.seed;
        if cfg.glove.is_none() {
            cfg.dim = s.dim;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Sentences and vectors for one seed.
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub table: EmbeddingTable,
    pub aspects: Vec<AspectEmbedding>,
    pub labels: Vec<String>,
    pub notes: BTreeMap<String, String>,
}

/// The seed-independent part of a data source, loaded once per command.
pub enum Source {
    Synthetic {
        config: SyntheticConfig,
        table: Option<EmbeddingTable>,
    },
    Sentihood {
        sentences: Vec<Sentence>,
        table: EmbeddingTable,
        notes: BTreeMap<String, String>,
    },
}

impl Source {
    /// Reads every file the run needs; fails before anything is written.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let glove = match &cfg.glove {
            Some(path) => {
                let (table, report) = parse_embedding_file(path, cfg.dim)?;
                Some((table, report.skip_count()))
            }
            None => None,
        };
        if let Some(s) = &cfg.synthetic {
            return Ok(Source::Synthetic {
                config: s.clone(),
                table: glove.map(|(t, _)| t),
            });
        }
        let path = cfg.data.as_ref().expect("validated data source");
        let outcome = load_sentihood_path(path)?;
        let (table, skipped) = glove.expect("validated embedding file");
        let mut notes = BTreeMap::new();
        notes.insert("sentences_loaded".into(), outcome.sentences.len().to_string());
        notes.insert("records_rejected".into(), outcome.rejected.len().to_string());
        notes.insert("embedding_lines_skipped".into(), skipped.to_string());
        let keep: BTreeSet<String> = cfg.aspects.iter().cloned().collect();
        let sentences = filter_top_aspects(&outcome.sentences, &keep)?;
        notes.insert("sentences_after_aspect_filter".into(), sentences.len().to_string());
        Ok(Source::Sentihood {
            sentences,
            table,
            notes,
        })
    }

    pub fn dataset(&self, cfg: &RunConfig, seed: u64) -> Result<Dataset> {
        let (sentences, table, mut notes) = match self {
            Source::Synthetic { config, table } => {
                let config = SyntheticConfig { seed, ..config.clone() };
                let table = match table {
                    Some(t) => t.clone(),
                    None => synthetic_embeddings(&config)?,
                };
                let keep: BTreeSet<String> = cfg.aspects.iter().cloned().collect();
                let sentences = filter_top_aspects(&generate_synthetic(&config)?, &keep)?;
                let mut notes = BTreeMap::new();
                notes.insert("data".into(), "synthetic".into());
                (sentences, table, notes)
            }
            Source::Sentihood {
                sentences,
                table,
                notes,
            } => {
                let mut notes = notes.clone();
                notes.insert("data".into(), "sentihood".into());
                (sentences.clone(), table.clone(), notes)
            }
        };
        let table = table.with_seed(seed);
        let aspects = cfg
            .aspects
            .iter()
            .map(|a| table.aspect_embedding(a))
            .collect::<Result<Vec<_>>>()?;
        for a in &aspects {
            if a.all_oov {
                notes.insert(format!("aspect_{}_oov", a.label), "all words out of vocabulary".into());
            }
        }
        Ok(Dataset {
            sentences,
            table,
            aspects,
            labels: cfg.aspects.clone(),
            notes,
        })
    }
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::input(format!("cannot build worker pool: {e}")))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub records: usize,
    pub failed: usize,
    /// Fraction of records whose target and aspect fits both converged.
    pub convergence_rate: f64,
    pub mean_iterations: PerPath<f64>,
    pub mean_k: PerPath<f64>,
}

impl RefineSummary {
    pub fn from_results(results: &[RefinementResult], failed: usize) -> Self {
        let n = results.len().max(1) as f64;
        let mean = |f: &dyn Fn(&RefinementResult) -> usize| results.iter().map(|r| f(r) as f64).sum::<f64>() / n;
        Self {
            records: results.len(),
            failed,
            convergence_rate: results.iter().filter(|r| r.converged()).count() as f64 / n,
            mean_iterations: PerPath {
                target: mean(&|r| r.iterations.target),
                aspect: mean(&|r| r.iterations.aspect),
            },
            mean_k: PerPath {
                target: mean(&|r| r.k.target),
                aspect: mean(&|r| r.k.aspect),
            },
        }
    }

    pub fn render(&self) -> String {
        format!(
            "records {}  failed {}  converged {:.1}%\nmean iterations  target {:.2}  aspect {:.2}\nmean k           target {:.2}  aspect {:.2}\n",
            self.records,
            self.failed,
            100.0 * self.convergence_rate,
            self.mean_iterations.target,
            self.mean_iterations.aspect,
            self.mean_k.target,
            self.mean_k.aspect
        )
    }
}

/// Refines the corpus for `cfg.seed`; writes records, summary, error log
/// and resolved config. Any failed work item makes the command fail after
/// the successful records are written.
pub fn cmd_refine(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<RefineSummary> {
    let source = Source::load(cfg)?;
    let ds = source.dataset(cfg, cfg.seed)?;
    let outcome = pool(cfg)?.install(|| refine_corpus(&ds.sentences, &ds.table, &ds.aspects, &cfg.refiner))?;
    let summary = RefineSummary::from_results(&outcome.results, outcome.errors.len());

    create_out(&cfg.out)?;
    write_file(&cfg.out.join(RESOLVED_CONFIG), cfg.to_toml()?.as_bytes())?;
    let mut buf = Vec::new();
    write_jsonl(&outcome.results, &mut buf).map_err(|e| Error::io(cfg.out.join(REFINED_FILE), e))?;
    write_file(&cfg.out.join(REFINED_FILE), &buf)?;
    write_file(&cfg.out.join(REFINE_SUMMARY), to_json(&summary).as_bytes())?;
    if !outcome.errors.is_empty() {
        let log: String = outcome.errors.iter().map(|e| format!("{e}\n")).collect();
        write_file(&cfg.out.join(ERROR_LOG), log.as_bytes())?;
    }
    let text = if cfg.json {
        to_json(&summary) + "\n"
    } else {
        summary.render()
    };
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    match outcome.errors.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// Aspect separation of one seed, over the aspect vectors of every
/// (sentence, target, aspect) work item grouped by aspect label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationComparison {
    pub instances: usize,
    /// Static aspect vectors `a`: one point per aspect, so the ratio is `+∞`
    /// whenever two aspects differ.
    pub static_aspect: Option<Separation>,
    /// `ã` at the seeded random initialization of `(W, b)`, before any step.
    pub initial: Option<Separation>,
    /// `ã` after refinement.
    pub refined: Option<Separation>,
}

impl SeparationComparison {
    /// Learned `ã` strictly better separated than `ã` at initialization.
    pub fn refined_wins(&self) -> bool {
        match (&self.initial, &self.refined) {
            (Some(i), Some(r)) => r.ratio > i.ratio,
            _ => false,
        }
    }
}

fn by_aspect<'a>(
    records: &'a [RefinementResult],
    vector: impl Fn(&'a RefinementResult) -> Array1<f64>,
) -> BTreeMap<String, Vec<Array1<f64>>> {
    let mut groups: BTreeMap<String, Vec<Array1<f64>>> = BTreeMap::new();
    for r in records {
        groups.entry(r.aspect.clone()).or_default().push(vector(r));
    }
    groups
}

fn separation_or_none(groups: &BTreeMap<String, Vec<Array1<f64>>>) -> Result<Option<Separation>> {
    match separation_statistic(groups) {
        Ok(s) => Ok(Some(s)),
        Err(Error::UndefinedMetric(_)) | Err(Error::Input(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Compares `ã` before and after learning on the same work items. The
/// initial vectors come from a one-iteration pass, which stops before its
/// first step and draws `(W, b)` from the same per-item streams.
pub fn separation_comparison(
    ds: &Dataset,
    records: &[RefinementResult],
    cfg: &RefinerConfig,
) -> Result<SeparationComparison> {
    let initial_cfg = RefinerConfig {
        max_iters: 1,
        ..cfg.clone()
    };
    let initial = refine_corpus(&ds.sentences, &ds.table, &ds.aspects, &initial_cfg)?;
    if let Some(e) = initial.errors.into_iter().next() {
        return Err(e);
    }
    let static_vectors: BTreeMap<&str, &Array1<f64>> =
        ds.aspects.iter().map(|a| (a.label.as_str(), &a.vector)).collect();
    let static_groups = by_aspect(records, |r| {
        static_vectors
            .get(r.aspect.as_str())
            .map_or_else(|| Array1::zeros(r.a_refined.len()), |v| (*v).clone())
    });
    Ok(SeparationComparison {
        instances: records.len(),
        static_aspect: separation_or_none(&static_groups)?,
        initial: separation_or_none(&by_aspect(&initial.results, |r| Array1::from(r.a_refined.clone())))?,
        refined: separation_or_none(&by_aspect(records, |r| Array1::from(r.a_refined.clone())))?,
    })
}

/// One seed of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub raw: EvalReport,
    pub refined: EvalReport,
    pub separation: SeparationComparison,
    pub refinement: RefineSummary,
}

/// Mean and sample standard deviation over the seeds where a metric is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub stddev: f64,
    pub runs: usize,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            stddev,
            runs: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub raw: Option<Spread>,
    pub refined: Option<Spread>,
    /// Refined minus raw, per seed.
    pub delta: Option<Spread>,
}

pub const METRIC_NAMES: [&str; 5] = [
    "aspect_strict_acc",
    "aspect_macro_f1",
    "aspect_auc",
    "sentiment_acc",
    "sentiment_auc",
];

/// Everything `eval` writes to its report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub runs: Vec<SeedRun>,
    pub summary: Vec<MetricSummary>,
    /// Seeds on which learned `ã` separates aspects better than `ã` at initialization.
    pub separation_wins: usize,
}

impl EvalOutcome {
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let summary = METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let raw: Vec<f64> = runs.iter().filter_map(|r| r.raw.metric_values()[i]).collect();
                let refined: Vec<f64> = runs.iter().filter_map(|r| r.refined.metric_values()[i]).collect();
                let delta: Vec<f64> = runs
                    .iter()
                    .filter_map(|r| Some(r.refined.metric_values()[i]? - r.raw.metric_values()[i]?))
                    .collect();
                MetricSummary {
                    metric: name.to_string(),
                    raw: Spread::of(&raw),
                    refined: Spread::of(&refined),
                    delta: Spread::of(&delta),
                }
            })
            .collect();
        let separation_wins = runs.iter().filter(|r| r.separation.refined_wins()).count();
        Self {
            runs,
            summary,
            separation_wins,
        }
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|m| m.metric == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for run in &self.runs {
            let _ = writeln!(s, "seed {}", run.seed);
            let rows = [("raw", &run.raw), ("refined", &run.refined)];
            s.push_str(&render_table(&rows));
            s.push_str(&render_delta_row("delta", &run.raw, &run.refined, 7));
            let ratio = |x: &Option<Separation>| x.map_or("---".to_string(), |v| format!("{:.3}", v.ratio));
            let _ = writeln!(
                s,
                "aspect separation  static a {}  initial a~ {}  refined a~ {}\n",
                ratio(&run.separation.static_aspect),
                ratio(&run.separation.initial),
                ratio(&run.separation.refined)
            );
        }
        if self.runs.len() > 1 {
            let _ = writeln!(s, "mean ± stddev over {} seeds (percent)", self.runs.len());
            let fmt = |v: &Option<Spread>| {
                v.map_or("---".to_string(), |x| {
                    format!("{:.2} ± {:.2}", 100.0 * x.mean, 100.0 * x.stddev)
                })
            };
            for m in &self.summary {
                let _ = writeln!(
                    s,
                    "{:<18} raw {:>14}  refined {:>14}  delta {:>14}",
                    m.metric,
                    fmt(&m.raw),
                    fmt(&m.refined),
                    m.delta.map_or("---".to_string(), |x| format!(
                        "{:+.2} ± {:.2}",
                        100.0 * x.mean,
                        100.0 * x.stddev
                    ))
                );
            }
            let _ = writeln!(
                s,
                "refined a~ separates aspects better than initial a~ on {} of {} seeds",
                self.separation_wins,
                self.runs.len()
            );
        } else if let Some(d) = self.metric("aspect_macro_f1").and_then(|m| m.delta) {
            let _ = writeln!(s, "refined - raw aspect macro-F1: {:+.2} points", 100.0 * d.mean);
        }
        s
    }
}

fn oracle_predictions(examples: &[Example]) -> Vec<PairPrediction> {
    examples
        .iter()
        .map(|ex| {
            let mut probs = [0.0; 3];
            probs[ex.gold.index()] = 1.0;
            PairPrediction {
                sentence_id: ex.sentence_id.clone(),
                target_id: ex.target_id.clone(),
                aspect: ex.aspect.clone(),
                gold: ex.gold,
                probs,
            }
        })
        .collect()
}

fn refined_records(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<Vec<RefinementResult>> {
    if cfg.refine_inline {
        let rcfg = RefinerConfig {
            seed,
            ..cfg.refiner.clone()
        };
        let outcome = refine_corpus(&ds.sentences, &ds.table, &ds.aspects, &rcfg)?;
        return match outcome.errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(outcome.results),
        };
    }
    let Some(path) = &cfg.refined else {
        return Err(Error::input("eval needs --refined PATH or --refine-inline"));
    };
    if cfg.seeds > 1 {
        return Err(Error::input("a seed sweep refines per seed; use --refine-inline"));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file))
}

struct Split3<'a> {
    train: Vec<&'a Sentence>,
    test: Vec<&'a Sentence>,
}

fn split_sentences(sentences: &[Sentence], seed: u64) -> Split3<'_> {
    let mut out = Split3 {
        train: Vec::new(),
        test: Vec::new(),
    };
    for s in sentences {
        match assign_split(s, seed) {
            Split::Train => out.train.push(s),
            Split::Test => out.test.push(s),
            Split::Dev => {}
        }
    }
    out
}

fn owned(v: &[&Sentence]) -> Vec<Sentence> {
    v.iter().map(|s| (*s).clone()).collect()
}

fn labelled(examples: &[Example]) -> Vec<(crate::harness::FeatureVector, Polarity)> {
    examples.iter().map(|e| (e.features.clone(), e.gold)).collect()
}

/// Everything a seed needs beyond its reports: the examples, for vector dumps.
pub struct SeedArtifacts {
    pub run: SeedRun,
    pub test_raw: Vec<Example>,
    pub test_refined: Vec<Example>,
}

/// Raw and refined pipelines for one seed: same sentences, same split, same
/// classifier settings; only the target and aspect vectors differ.
pub fn evaluate_seed(cfg: &RunConfig, source: &Source, seed: u64) -> Result<SeedArtifacts> {
    let ds = source.dataset(cfg, seed)?;
    let records = refined_records(cfg, &ds, seed)?;
    let refinement = RefineSummary::from_results(&records, 0);
    let index = RefinedIndex::new(records.iter().cloned());
    let records_for_separation = records;
    let split = split_sentences(&ds.sentences, seed);
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::input("split leaves no training or no test sentences"));
    }
    let (train_s, test_s) = (owned(&split.train), owned(&split.test));
    let mut reports = Vec::new();
    let mut test_sets = Vec::new();
    for mode in [Mode::Raw, Mode::Refined] {
        let refined = (mode == Mode::Refined).then_some(&index);
        let test = build_examples(&test_s, &ds.table, &ds.aspects, mode, refined)?;
        let mut report = if cfg.oracle {
            let mut r = EvalReport::from_predictions(&oracle_predictions(&test), &ds.labels)?;
            r.metadata.insert("mode".into(), mode.to_string());
            r.metadata.insert("predictor".into(), "oracle".into());
            r
        } else {
            let train_ex = build_examples(&train_s, &ds.table, &ds.aspects, mode, refined)?;
            let model = train(&labelled(&train_ex), &cfg.train)?;
            let mut r = evaluate(&model, &test, mode, &ds.labels)?;
            r.metadata.insert("train_pairs".into(), train_ex.len().to_string());
            r.metadata
                .insert("classifier_learning_rate".into(), format!("{:e}", model.learning_rate));
            r
        };
        report.metadata.insert("seed".into(), seed.to_string());
        report.metadata.insert(
            "split".into(),
            "recorded split when present, else seeded 80/10/10; train on train, report on test".into(),
        );
        report
            .metadata
            .insert("train_sentences".into(), train_s.len().to_string());
        report
            .metadata
            .insert("test_sentences".into(), test_s.len().to_string());
        for (k, v) in &ds.notes {
            report.metadata.insert(k.clone(), v.clone());
        }
        reports.push(report);
        test_sets.push(test);
    }
    let rcfg = RefinerConfig {
        seed,
        ..cfg.refiner.clone()
    };
    let separation = separation_comparison(&ds, &records_for_separation, &rcfg)?;
    let refined_report = reports.pop().expect("two modes");
    let raw_report = reports.pop().expect("two modes");
    let test_refined = test_sets.pop().expect("two modes");
    let test_raw = test_sets.pop().expect("two modes");
    Ok(SeedArtifacts {
        run: SeedRun {
            seed,
            raw: raw_report,
            refined: refined_report,
            separation,
            refinement,
        },
        test_raw,
        test_refined,
    })
}

fn vectors_csv(artifacts: &[SeedArtifacts], m: usize) -> String {
    let mut s = String::from("seed,mode,aspect,sentence_id,target_id,gold,vector\n");
    for a in artifacts {
        for (mode, examples) in [("raw", &a.test_raw), ("refined", &a.test_refined)] {
            for ex in examples {
                let block = ex.features.components.slice(ndarray::s![2 * m..3 * m]);
                let v: Vec<String> = block.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(
                    s,
                    "{},{mode},{},{},{},{},{}",
                    a.run.seed,
                    ex.aspect,
                    ex.sentence_id,
                    ex.target_id,
                    ex.gold,
                    v.join(" ")
                );
            }
        }
    }
    s
}

/// Evaluates every seed of the sweep and writes the report, table, and
/// resolved config.
pub fn cmd_eval(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<EvalOutcome> {
    let source = Source::load(cfg)?;
    let artifacts = pool(cfg)?.install(|| {
        (0..cfg.seeds)
            .map(|i| evaluate_seed(cfg, &source, cfg.run_seed(i)))
            .collect::<Result<Vec<_>>>()
    })?;
    let m = match &source {
        Source::Synthetic { config, table } => table.as_ref().map_or(config.dim, |t| t.dim()),
        Source::Sentihood { table, .. } => table.dim(),
    };
    let csv = cfg.emit_vectors.then(|| vectors_csv(&artifacts, m));
    let outcome = EvalOutcome::from_runs(artifacts.into_iter().map(|a| a.run).collect());

    create_out(&cfg.out)?;
    write_file(&cfg.out.join(RESOLVED_CONFIG), cfg.to_toml()?.as_bytes())?;
    write_file(&cfg.out.join(EVAL_REPORT), to_json(&outcome).as_bytes())?;
    let table = outcome.render();
    write_file(&cfg.out.join(EVAL_TABLE), table.as_bytes())?;
    if let Some(csv) = csv {
        write_file(&cfg.out.join(VECTORS_CSV), csv.as_bytes())?;
    }
    let text = if cfg.json { to_json(&outcome) + "\n" } else { table };
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub token: String,
    pub u: PerPath<f64>,
    pub u_sparse: PerPath<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorNorms {
    pub target: f64,
    pub target_refined: f64,
    pub aspect: f64,
    pub aspect_refined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectTrace {
    pub sentence_id: String,
    pub target_id: String,
    pub aspect: String,
    pub gold: Polarity,
    pub tokens: Vec<TokenTrace>,
    /// Loss at the start of every iteration.
    pub loss_curve: PerPath<Vec<f64>>,
    pub k: PerPath<usize>,
    pub iterations: PerPath<usize>,
    pub converged: PerPath<bool>,
    pub norms: VectorNorms,
}

impl InspectTrace {
    /// Tokens with a nonzero coefficient on the given path, in sentence order.
    pub fn selected(&self, aspect_path: bool) -> Vec<&str> {
        self.tokens
            .iter()
            .filter(|t| if aspect_path { t.u_sparse.aspect } else { t.u_sparse.target } != 0.0)
            .map(|t| t.token.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "sentence {}  target {}  aspect {}  gold {}",
            self.sentence_id, self.target_id, self.aspect, self.gold
        );
        let width = self.tokens.iter().map(|t| t.token.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            s,
            "{:width$}  {:>9} {:>9}  {:>9} {:>9}",
            "token", "u(t)", "u'(t)", "u(a)", "u'(a)"
        );
        for t in &self.tokens {
            let _ = writeln!(
                s,
                "{:width$}  {:>9.4} {:>9.4}  {:>9.4} {:>9.4}",
                t.token, t.u.target, t.u_sparse.target, t.u.aspect, t.u_sparse.aspect
            );
        }
        for (name, curve, k, it, conv) in [
            (
                "target",
                &self.loss_curve.target,
                self.k.target,
                self.iterations.target,
                self.converged.target,
            ),
            (
                "aspect",
                &self.loss_curve.aspect,
                self.k.aspect,
                self.iterations.aspect,
                self.converged.aspect,
            ),
        ] {
            let _ = writeln!(
                s,
                "{name}: {} at iteration {it}, k = {k}",
                if conv { "converged" } else { "stopped unconverged" }
            );
            let shown: Vec<String> = curve.iter().map(|l| format!("{l:.5}")).collect();
            let _ = writeln!(s, "  loss {}", shown.join(" "));
        }
        let _ = writeln!(
            s,
            "norms  |t| {:.4}  |t~| {:.4}  |a| {:.4}  |a~| {:.4}",
            self.norms.target, self.norms.target_refined, self.norms.aspect, self.norms.aspect_refined
        );
        s
    }
}

fn l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Re-runs one work item with `cfg.seed` and reports it token by token.
pub fn inspect(cfg: &RunConfig, sentence_id: &str, target: &str, aspect: &str) -> Result<InspectTrace> {
    let source = Source::load(cfg)?;
    let ds = source.dataset(cfg, cfg.seed)?;
    let sentence = ds
        .sentences
        .iter()
        .find(|s| s.id() == sentence_id)
        .ok_or_else(|| Error::input(format!("no sentence with id {sentence_id:?}")))?;
    let aspect_emb = ds
        .aspects
        .iter()
        .find(|a| a.label == aspect)
        .ok_or_else(|| Error::input(format!("aspect {aspect:?} is not in the aspect set")))?;
    if !sentence.target_positions().contains_key(target) {
        return Err(Error::input(format!("sentence {sentence_id} has no target {target:?}")));
    }
    let trace = refine_work_item(sentence, target, aspect_emb, &ds.table, &cfg.refiner)?;
    let tokens = sentence
        .tokens()
        .iter()
        .enumerate()
        .map(|(j, tok)| TokenTrace {
            token: tok.clone(),
            u: PerPath {
                target: trace.target.state.u[j],
                aspect: trace.aspect.state.u[j],
            },
            u_sparse: PerPath {
                target: trace.target.state.u_sparse[j],
                aspect: trace.aspect.state.u_sparse[j],
            },
        })
        .collect();
    Ok(InspectTrace {
        sentence_id: sentence_id.to_string(),
        target_id: target.to_string(),
        aspect: aspect.to_string(),
        gold: sentence.gold(target, aspect),
        tokens,
        loss_curve: PerPath {
            target: trace.target.history.iter().map(|r| r.loss).collect(),
            aspect: trace.aspect.history.iter().map(|r| r.loss).collect(),
        },
        k: PerPath {
            target: trace.target.state.nonzero,
            aspect: trace.aspect.state.nonzero,
        },
        iterations: PerPath {
            target: trace.target.iterations,
            aspect: trace.aspect.iterations,
        },
        converged: PerPath {
            target: trace.target.converged,
            aspect: trace.aspect.converged,
        },
        norms: VectorNorms {
            target: l2(&ds.table.target_vector(target)),
            target_refined: l2(&trace.target.refined),
            aspect: l2(&aspect_emb.vector),
            aspect_refined: l2(&trace.aspect.refined),
        },
    })
}

pub fn cmd_inspect(cfg: &RunConfig, args: &InspectArgs, stdout: &mut dyn Write) -> Result<InspectTrace> {
    let trace = pool(cfg)?.install(|| inspect(cfg, &args.sentence_id, &args.target, &args.aspect))?;
    let text = if cfg.json {
        to_json(&trace) + "\n"
    } else {
        trace.render()
    };
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    Ok(trace)
}

/// Runs the property suites; fails with an input error if any suite fails.
pub fn cmd_selfcheck(args: &SelfcheckArgs, stdout: &mut dyn Write) -> Result<Vec<selfcheck::SuiteReport>> {
    let reports = selfcheck::run_all(args.seed)?;
    let text = if args.json {
        to_json(&reports) + "\n"
    } else {
        reports.iter().map(|r| r.line() + "\n").collect()
    };
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    match reports.iter().find(|r| !r.passed) {
        Some(r) => Err(Error::input(format!("suite {} failed", r.name))),
        None => Ok(reports),
    }
}

/// Parses `args`, runs the command, and returns the process exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Refine(common) => resolve(common, None).and_then(|cfg| cmd_refine(&cfg, stdout).map(|_| ())),
        Command::Eval(eval) => resolve(&eval.common, Some(eval)).and_then(|cfg| cmd_eval(&cfg, stdout).map(|_| ())),
        Command::Inspect(args) => {
            resolve(&args.common, None).and_then(|cfg| cmd_inspect(&cfg, args, stdout).map(|_| ()))
        }
        Command::Selfcheck(args) => cmd_selfcheck(args, stdout).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
