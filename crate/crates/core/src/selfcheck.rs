//! Seeded invariant suites: gradient check, descent and termination,
//! step function, metric oracles. Each suite compares the library against
//! an independent computation and returns a verdict with its worst case.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::corpus::SentenceContext;
use crate::embedding::AspectEmbedding;
use crate::error::Result;
use crate::metrics::{auc, macro_f1, Decision};
use crate::refiner::{coefficient_forward, refine_aspect, refine_target, step_threshold, Objective, RefinerConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed value of the suite's checked quantity.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} cases, worst {:.3e} (tolerance {:.0e}), {:.2}s{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance,
            self.seconds,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!("; {}", self.detail)
            }
        )
    }
}

/// A random refinement problem. Word vectors have roughly unit norm.
#[derive(Debug, Clone)]
pub struct Instance {
    pub x: Array2<f64>,
    pub target: Array1<f64>,
    pub aspect: Array1<f64>,
    pub irrelevant: Option<Array1<f64>>,
}

/// Instance `index` cycles through `m ∈ {5, 50}` and `n ∈ {3, 20}`; odd
/// quarters carry an irrelevant target.
pub fn random_instance(seed: u64, suite: &str, index: usize) -> Instance {
    let mut r = rng::stream(seed, &["selfcheck", suite, &index.to_string()]);
    let m = [5, 50][index % 2];
    let n = [3, 20][(index / 2) % 2];
    let sd = 1.0 / (m as f64).sqrt();
    let mut normal = |len: usize| -> Array1<f64> {
        Array1::from_shape_fn(len, |_| sd * Distribution::<f64>::sample(&StandardNormal, &mut r))
    };
    let x = Array2::from_shape_vec((m, n), normal(m * n).to_vec()).expect("m·n entries");
    let target = normal(m);
    let aspect = normal(m);
    let irrelevant = ((index / 4) % 2 == 1).then(|| normal(m));
    Instance {
        x,
        target,
        aspect,
        irrelevant,
    }
}

fn uniform(r: &mut impl Rng, len: usize, range: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| r.random_range(-range..=range))
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Analytic against central-difference gradients of both objectives with
/// respect to `W` and `b`, mask held at its value at the evaluation point.
pub fn gradient_suite(seed: u64, instances: usize, step: f64, tolerance: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    for i in 0..instances {
        let inst = random_instance(seed, "gradient", i);
        let (m, n) = inst.x.dim();
        let mut r = rng::stream(seed, &["selfcheck", "gradient-params", &i.to_string()]);
        let w = uniform(&mut r, m, 1.0);
        let b = uniform(&mut r, n, 1.0);
        let state = coefficient_forward(inst.x.view(), w.view(), b.view())?;
        let mask = state.mask();
        let target_obj = Objective::target(inst.target.clone(), 0.01);
        let t_tilde = target_obj.output(inst.x.view(), state.u_sparse.view());
        let objectives = [
            ("target", target_obj),
            (
                "aspect",
                Objective::aspect(inst.aspect.clone(), t_tilde, inst.irrelevant.clone(), 1.0, 0.5, 0.01),
            ),
        ];
        for (which, obj) in &objectives {
            let analytic = obj.gradient(inst.x.view(), w.view(), b.view(), &mask)?;
            let mut fd_w = Array1::zeros(m);
            for j in 0..m {
                let mut plus = w.clone();
                let mut minus = w.clone();
                plus[j] += step;
                minus[j] -= step;
                fd_w[j] = (obj.masked_loss(inst.x.view(), plus.view(), b.view(), &mask)?
                    - obj.masked_loss(inst.x.view(), minus.view(), b.view(), &mask)?)
                    / (2.0 * step);
            }
            let mut fd_b = Array1::zeros(n);
            for j in 0..n {
                let mut plus = b.clone();
                let mut minus = b.clone();
                plus[j] += step;
                minus[j] -= step;
                fd_b[j] = (obj.masked_loss(inst.x.view(), w.view(), plus.view(), &mask)?
                    - obj.masked_loss(inst.x.view(), w.view(), minus.view(), &mask)?)
                    / (2.0 * step);
            }
            for (part, a, f) in [("W", &analytic.weights, &fd_w), ("b", &analytic.bias, &fd_b)] {
                let scale = norm(a).max(norm(f));
                let rel = if scale == 0.0 { 0.0 } else { norm(&(a - f)) / scale };
                if rel > worst {
                    worst = rel;
                    worst_case = format!("instance {i} ({m}×{n}), {which} objective, ∇{part}");
                }
            }
        }
    }
    Ok(SuiteReport {
        name: "gradient".into(),
        passed: worst < tolerance,
        cases: instances * 2,
        worst,
        tolerance,
        detail: worst_case,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Full target and aspect refinements on random instances: every step must
/// not raise the loss under the step's own mask, every fit must stop within
/// `max_iters`, and a converged fit must keep at most `c` coefficients.
pub fn descent_suite(seed: u64, instances: usize, cfg: &RefinerConfig, tolerance: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    let mut steps = 0usize;
    let mut converged = 0usize;
    for i in 0..instances {
        let inst = random_instance(seed, "descent", i);
        let ctx = SentenceContext {
            matrix: inst.x.clone(),
            target_column: 0,
            other_target_column: None,
            aspect: AspectEmbedding {
                label: "aspect".into(),
                vector: inst.aspect.clone(),
                source_words: vec![],
                oov_words: vec![],
                all_oov: false,
            },
        };
        let cfg = RefinerConfig {
            seed: seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let mut r = rng::stream(cfg.seed, &["selfcheck", "descent-init", &i.to_string()]);
        let t_fit = refine_target(&ctx, inst.target.view(), &cfg, &mut r)?;
        let a_fit = refine_aspect(
            &ctx,
            t_fit.refined.view(),
            inst.irrelevant.as_ref().map(|v| v.view()),
            &cfg,
            &mut r,
        )?;
        for (which, fit) in [("target", &t_fit), ("aspect", &a_fit)] {
            if fit.iterations > cfg.max_iters {
                failures.push(format!("instance {i} {which}: {} iterations", fit.iterations));
            }
            if fit.converged {
                converged += 1;
                if fit.state.nonzero > cfg.c {
                    failures.push(format!(
                        "instance {i} {which}: converged with k = {}",
                        fit.state.nonzero
                    ));
                }
            }
            for rec in &fit.history {
                if let Some(after) = rec.masked_loss_after_step {
                    steps += 1;
                    worst = worst.max(after - rec.loss);
                }
            }
        }
    }
    if worst > tolerance {
        failures.push(format!("a step raised the masked loss by {worst:.3e}"));
    }
    Ok(SuiteReport {
        name: "descent".into(),
        passed: failures.is_empty(),
        cases: instances * 2,
        worst: worst.max(0.0),
        tolerance,
        detail: if failures.is_empty() {
            format!("{steps} steps, {converged} converged fits, lr {}", cfg.learning_rate)
        } else {
            failures.join("; ")
        },
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Random coefficient vectors, including ties with the mean: zeroed indices
/// must be exactly those strictly below the mean, survivors bit-identical.
pub fn step_function_suite(seed: u64, vectors: usize) -> SuiteReport {
    let start = Instant::now();
    let mut failures = 0usize;
    let mut first = String::new();
    for i in 0..vectors {
        let mut r = rng::stream(seed, &["selfcheck", "step", &i.to_string()]);
        let n = r.random_range(1..=40);
        let u: Array1<f64> = match i % 3 {
            0 => Array1::from_shape_fn(n, |_| r.random::<f64>()),
            // few distinct values so that entries hit the mean exactly
            1 => Array1::from_shape_fn(n, |_| r.random_range(0..3) as f64 * 0.25),
            _ => Array1::from_shape_fn(n, |_| r.random_range(-1.0..1.0)),
        };
        let mean = u.iter().sum::<f64>() / n as f64;
        let out = step_threshold(u.view());
        let ok = out.len() == n
            && u.iter().zip(out.iter()).all(|(&ui, &oi)| {
                if ui < mean {
                    oi.to_bits() == 0.0f64.to_bits()
                } else {
                    oi.to_bits() == ui.to_bits()
                }
            });
        if !ok {
            failures += 1;
            if first.is_empty() {
                first = format!("vector {i}: {u} → {out}");
            }
        }
    }
    SuiteReport {
        name: "step-function".into(),
        passed: failures == 0,
        cases: vectors,
        worst: failures as f64,
        tolerance: 0.0,
        detail: first,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// AUC by explicit comparison of every (positive, negative) pair.
pub fn brute_force_auc(scores: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Macro-F1 from one 2×2 confusion matrix per label.
pub fn confusion_macro_f1(rows: &[(usize, bool, bool)], labels: usize) -> f64 {
    let mut total = 0.0;
    for l in 0..labels {
        let mut cm = [[0usize; 2]; 2];
        for &(label, gold, pred) in rows {
            if label == l {
                cm[gold as usize][pred as usize] += 1;
            }
        }
        let (tp, fp, fn_) = (cm[1][1] as f64, cm[0][1] as f64, cm[1][0] as f64);
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        total += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    total / labels as f64
}

/// Library AUC and macro-F1 against the brute-force oracles on small
/// random instances with heavy score ties.
pub fn metrics_suite(seed: u64, instances: usize, tolerance: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let names = ["a", "b", "c", "d"];
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut undefined_mismatch = 0usize;
    for i in 0..instances {
        let mut r = rng::stream(seed, &["selfcheck", "metrics", &i.to_string()]);
        let len = r.random_range(2..=30);
        let levels = r.random_range(2..=8);
        let scores: Vec<(f64, bool)> = (0..len)
            .map(|_| (r.random_range(0..levels) as f64 / levels as f64, r.random_bool(0.4)))
            .collect();
        match (auc(&scores).ok(), brute_force_auc(&scores)) {
            (Some(a), Some(b)) => {
                if (a - b).abs() > worst {
                    worst = (a - b).abs();
                    detail = format!("AUC instance {i}");
                }
            }
            (None, None) => {}
            _ => undefined_mismatch += 1,
        }

        let labels = r.random_range(1..=names.len());
        let rows: Vec<(usize, bool, bool)> = (0..r.random_range(1..=40))
            .map(|_| (r.random_range(0..labels), r.random_bool(0.3), r.random_bool(0.3)))
            .collect();
        let decisions: Vec<Decision<'_>> = rows
            .iter()
            .map(|&(l, gold, predicted)| Decision {
                label: names[l],
                gold,
                predicted,
            })
            .collect();
        let lib = macro_f1(&decisions, &names[..labels])?;
        let oracle = confusion_macro_f1(&rows, labels);
        if (lib - oracle).abs() > worst {
            worst = (lib - oracle).abs();
            detail = format!("macro-F1 instance {i}");
        }
    }
    if undefined_mismatch > 0 {
        detail = format!("{undefined_mismatch} AUC instances disagree on definedness");
    }
    Ok(SuiteReport {
        name: "metrics-oracle".into(),
        passed: worst <= tolerance && undefined_mismatch == 0,
        cases: instances,
        worst,
        tolerance,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// The four property suites at their acceptance sizes and tolerances.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        gradient_suite(seed, 100, 1e-5, 1e-4)?,
        descent_suite(seed, 100, &RefinerConfig::default(), 1e-12)?,
        step_function_suite(seed, 1000),
        metrics_suite(seed, 200, 1e-12)?,
    ])
}

/// Suite name → pass flag, for compact summaries.
pub fn verdicts(reports: &[SuiteReport]) -> BTreeMap<String, bool> {
    reports.iter().map(|r| (r.name.clone(), r.passed)).collect()
}
