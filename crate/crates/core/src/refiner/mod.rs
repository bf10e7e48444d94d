//! Context-aware refinement of target and aspect embeddings.
//!
//! A sigmoid layer over the sentence matrix scores every token, the mean
//! step function keeps the high-scoring ones, and the surviving tokens are
//! summed into a refined target vector. The aspect vector is then shifted by
//! a second sparse context sum, pulled toward the refined target and pushed
//! away from the sentence's other target. Both fits run plain gradient
//! descent on the coefficient parameters `(W, b)` until at most `c` tokens
//! survive the step function.

mod coefficients;
mod objective;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use coefficients::{
    coefficient_forward, nonzero_count, reconstruct_target, refine_aspect_vector, retained_mask, sigmoid,
    step_threshold, CoefficientState,
};
pub use objective::{aspect_loss, target_loss, Gradient, Objective};

use crate::corpus::{build_context, Sentence, SentenceContext};
use crate::embedding::{AspectEmbedding, EmbeddingTable};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    /// Stop once at most this many coefficients survive the step function.
    pub c: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Sparsity weight for the aspect objective; `lambda` when unset.
    pub aspect_lambda: Option<f64>,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// `W` and `b` start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    /// The aspect fit aborts when its loss drops below this value.
    pub aspect_loss_floor: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            c: 4,
            alpha: 1.0,
            beta: 0.5,
            lambda: 0.01,
            aspect_lambda: None,
            learning_rate: 0.05,
            max_iters: 200,
            seed: 0,
            init_range: 0.1,
            aspect_loss_floor: -1e6,
        }
    }
}

impl RefinerConfig {
    pub fn aspect_lambda(&self) -> f64 {
        self.aspect_lambda.unwrap_or(self.lambda)
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.c == 0 {
            return Err(Error::input("c must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::input("max_iters must be positive"));
        }
        if !(nonneg(self.alpha) && nonneg(self.beta) && nonneg(self.lambda) && nonneg(self.aspect_lambda())) {
            return Err(Error::input("alpha, beta and lambda must be finite and non-negative"));
        }
        if !nonneg(self.learning_rate) || !nonneg(self.init_range) {
            return Err(Error::input(
                "learning_rate and init_range must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// One optimizer iteration as seen by the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub nonzero: usize,
    /// Loss after this iteration's step, re-evaluated with this iteration's
    /// mask; absent on the final iteration, which takes no step.
    pub masked_loss_after_step: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Fit {
    /// Refined vector: `t̃` for the target fit, `ã` for the aspect fit.
    pub refined: Array1<f64>,
    pub state: CoefficientState,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
}

fn init_parameters<R: Rng + ?Sized>(m: usize, n: usize, range: f64, rng: &mut R) -> (Array1<f64>, Array1<f64>) {
    let mut draw = || {
        if range == 0.0 {
            0.0
        } else {
            rng.random_range(-range..=range)
        }
    };
    let w = Array1::from_shape_fn(m, |_| draw());
    let b = Array1::from_shape_fn(n, |_| draw());
    (w, b)
}

fn fit<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    objective: &Objective,
    cfg: &RefinerConfig,
    floor: Option<f64>,
    rng: &mut R,
) -> Result<Fit> {
    let (m, n) = x.dim();
    if objective.dim() != m {
        return Err(Error::Shape(format!(
            "anchor has length {}, X has {m} rows",
            objective.dim()
        )));
    }
    let (mut w, mut b) = init_parameters(m, n, cfg.init_range, rng);
    let mut history = Vec::new();
    for iteration in 1..=cfg.max_iters {
        let state = coefficient_forward(x, w.view(), b.view())?;
        let refined = objective.output(x, state.u_sparse.view());
        let loss = objective.loss(refined.view(), state.u_sparse.view());
        if !loss.is_finite() {
            return Err(Error::NumericalDivergence { iteration, loss });
        }
        if let Some(floor) = floor {
            if loss < floor {
                return Err(Error::UnboundedObjective { iteration, loss, floor });
            }
        }
        let converged = state.nonzero <= cfg.c;
        if converged || iteration == cfg.max_iters {
            history.push(IterationRecord {
                iteration,
                loss,
                nonzero: state.nonzero,
                masked_loss_after_step: None,
            });
            return Ok(Fit {
                refined,
                state,
                loss,
                iterations: iteration,
                converged,
                history,
            });
        }
        let mask = state.mask();
        let grad = objective.gradient_at(x, &state.u, &refined, &mask);
        w.scaled_add(-cfg.learning_rate, &grad.weights);
        b.scaled_add(-cfg.learning_rate, &grad.bias);
        let after = objective.masked_loss(x, w.view(), b.view(), &mask)?;
        history.push(IterationRecord {
            iteration,
            loss,
            nonzero: state.nonzero,
            masked_loss_after_step: Some(after),
        });
    }
    unreachable!("max_iters is positive")
}

/// Reconstructs the target from its context, fitting `(W, b)` against the
/// anchor `t`. `rng` seeds the initial parameters.
pub fn refine_target<R: Rng + ?Sized>(
    ctx: &SentenceContext,
    target: ArrayView1<'_, f64>,
    cfg: &RefinerConfig,
    rng: &mut R,
) -> Result<Fit> {
    cfg.validate()?;
    let objective = Objective::target(target.to_owned(), cfg.lambda);
    fit(ctx.matrix.view(), &objective, cfg, None, rng)
}

/// Fine-tunes the context's aspect vector toward `refined_target` and away
/// from `irrelevant`, with its own coefficient parameters.
pub fn refine_aspect<R: Rng + ?Sized>(
    ctx: &SentenceContext,
    refined_target: ArrayView1<'_, f64>,
    irrelevant: Option<ArrayView1<'_, f64>>,
    cfg: &RefinerConfig,
    rng: &mut R,
) -> Result<Fit> {
    cfg.validate()?;
    let objective = Objective::aspect(
        ctx.aspect.vector.clone(),
        refined_target.to_owned(),
        irrelevant.map(|v| v.to_owned()),
        cfg.alpha,
        cfg.beta,
        cfg.aspect_lambda(),
    );
    fit(ctx.matrix.view(), &objective, cfg, Some(cfg.aspect_loss_floor), rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerPath<T> {
    pub target: T,
    pub aspect: T,
}

/// Refined embeddings for one (sentence, target, aspect) work item. This is
/// also the JSON-lines record layout of refined-embedding files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementResult {
    pub sentence_id: String,
    pub target_id: String,
    pub aspect: String,
    pub t_refined: Vec<f64>,
    pub a_refined: Vec<f64>,
    pub k: PerPath<usize>,
    pub iterations: PerPath<usize>,
    pub converged: PerPath<bool>,
    pub final_losses: PerPath<f64>,
    pub u_sparse: PerPath<Vec<f64>>,
}

impl RefinementResult {
    pub fn converged(&self) -> bool {
        self.converged.target && self.converged.aspect
    }
}

/// Full trace of one work item, for inspection.
#[derive(Debug, Clone)]
pub struct WorkItemTrace {
    pub context: SentenceContext,
    pub target: Fit,
    pub aspect: Fit,
}

fn work_item_streams(seed: u64, sentence_id: &str, target_id: &str, aspect: &str) -> [rand_chacha::ChaCha8Rng; 2] {
    [
        rng::stream(seed, &["refine", sentence_id, target_id, aspect, "target"]),
        rng::stream(seed, &["refine", sentence_id, target_id, aspect, "aspect"]),
    ]
}

pub fn refine_work_item(
    sentence: &Sentence,
    target_id: &str,
    aspect: &AspectEmbedding,
    table: &EmbeddingTable,
    cfg: &RefinerConfig,
) -> Result<WorkItemTrace> {
    let tag = |e: Error| Error::WorkItem {
        sentence_id: sentence.id().to_string(),
        target_id: target_id.to_string(),
        aspect: aspect.label.clone(),
        source: Box::new(e),
    };
    let ctx = build_context(sentence, target_id, aspect.clone(), table).map_err(tag)?;
    let t = table.target_vector(target_id);
    let irrelevant = sentence.other_target(target_id).map(|o| table.target_vector(o));
    let [mut target_rng, mut aspect_rng] = work_item_streams(cfg.seed, sentence.id(), target_id, &aspect.label);
    let target = refine_target(&ctx, t.view(), cfg, &mut target_rng).map_err(tag)?;
    let aspect_fit = refine_aspect(
        &ctx,
        target.refined.view(),
        irrelevant.as_ref().map(|v| v.view()),
        cfg,
        &mut aspect_rng,
    )
    .map_err(tag)?;
    Ok(WorkItemTrace {
        context: ctx,
        target,
        aspect: aspect_fit,
    })
}

fn summarize(sentence: &Sentence, target_id: &str, aspect: &str, trace: WorkItemTrace) -> RefinementResult {
    RefinementResult {
        sentence_id: sentence.id().to_string(),
        target_id: target_id.to_string(),
        aspect: aspect.to_string(),
        t_refined: trace.target.refined.to_vec(),
        a_refined: trace.aspect.refined.to_vec(),
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
        final_losses: PerPath {
            target: trace.target.loss,
            aspect: trace.aspect.loss,
        },
        u_sparse: PerPath {
            target: trace.target.state.u_sparse.to_vec(),
            aspect: trace.aspect.state.u_sparse.to_vec(),
        },
    }
}

/// Refines every (target, aspect) pair of one sentence.
pub fn refine_sentence(
    sentence: &Sentence,
    table: &EmbeddingTable,
    aspects: &[AspectEmbedding],
    cfg: &RefinerConfig,
) -> Result<BTreeMap<(String, String), RefinementResult>> {
    let mut out = BTreeMap::new();
    for target_id in sentence.targets() {
        for aspect in aspects {
            let trace = refine_work_item(sentence, target_id, aspect, table, cfg)?;
            out.insert(
                (target_id.to_string(), aspect.label.clone()),
                summarize(sentence, target_id, &aspect.label, trace),
            );
        }
    }
    Ok(out)
}

pub struct CorpusRefinement {
    /// Ordered by sentence, then target, then aspect.
    pub results: Vec<RefinementResult>,
    pub errors: Vec<Error>,
}

/// Refines a whole corpus as a parallel map over work items. Output order
/// and values do not depend on the thread pool the call runs in.
pub fn refine_corpus(
    sentences: &[Sentence],
    table: &EmbeddingTable,
    aspects: &[AspectEmbedding],
    cfg: &RefinerConfig,
) -> Result<CorpusRefinement> {
    cfg.validate()?;
    table.warm_targets(sentences.iter().flat_map(|s| s.targets()));
    let items: Vec<(&Sentence, &str, &AspectEmbedding)> = sentences
        .iter()
        .flat_map(|s| s.targets().flat_map(move |t| aspects.iter().map(move |a| (s, t, a))))
        .collect();
    let outcomes: Vec<Result<RefinementResult>> = items
        .par_iter()
        .map(|&(s, t, a)| refine_work_item(s, t, a, table, cfg).map(|tr| summarize(s, t, &a.label, tr)))
        .collect();
    let mut results = Vec::with_capacity(outcomes.len());
    let mut errors = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(e) => errors.push(e),
        }
    }
    Ok(CorpusRefinement { results, errors })
}

pub fn write_jsonl<W: Write>(results: &[RefinementResult], mut out: W) -> std::io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<RefinementResult>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<refined>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::input(format!("refined record on line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
