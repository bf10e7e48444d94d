//! Evaluation measures: strict accuracy, macro-averaged F1 and rank AUC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Polarity;
use crate::error::{Error, Result};

/// Fraction of targets whose predicted aspect set equals the gold set exactly.
pub fn strict_accuracy<K: Ord + std::fmt::Debug>(
    gold: &BTreeMap<K, BTreeSet<String>>,
    pred: &BTreeMap<K, BTreeSet<String>>,
) -> Result<f64> {
    if gold.len() != pred.len() || gold.keys().any(|k| !pred.contains_key(k)) {
        return Err(Error::input("gold and predicted aspect maps have different targets"));
    }
    if gold.is_empty() {
        return Err(Error::UndefinedMetric("strict accuracy over zero targets".into()));
    }
    let hits = gold.iter().filter(|(k, g)| pred[*k] == **g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// One binary detection decision for a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision<'a> {
    pub label: &'a str,
    pub gold: bool,
    pub predicted: bool,
}

/// Unweighted mean of per-label F1 over `labels`. A label whose precision
/// and recall are both zero (or undefined) scores 0.
pub fn macro_f1(decisions: &[Decision<'_>], labels: &[&str]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("macro-F1 over zero labels".into()));
    }
    let mut counts: BTreeMap<&str, (u64, u64, u64)> = labels.iter().map(|&l| (l, (0, 0, 0))).collect();
    for d in decisions {
        if let Some((tp, fp, fneg)) = counts.get_mut(d.label) {
            match (d.gold, d.predicted) {
                (true, true) => *tp += 1,
                (false, true) => *fp += 1,
                (true, false) => *fneg += 1,
                (false, false) => {}
            }
        }
    }
    let total: f64 = counts
        .values()
        .map(|&(tp, fp, fneg)| {
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
            }
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks in O(N log N).
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::input("AUC scores must not be NaN"));
    }
    let pos = scores.iter().filter(|(_, l)| *l).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum of positives, so tie midranks stay integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank (i + 1 + j) / 2
        let twice_mid = (i + 1 + j) as u128;
        let group_pos = sorted[i..j].iter().filter(|(_, l)| *l).count() as u128;
        twice_rank_sum += twice_mid * group_pos;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    // U = rank_sum − P(P+1)/2, so 2U = 2·rank_sum − P(P+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Model output for one (target, aspect) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub sentence_id: String,
    pub target_id: String,
    pub aspect: String,
    pub gold: Polarity,
    /// Probabilities in [`Polarity::ALL`] order: None, Positive, Negative.
    pub probs: [f64; 3],
}

impl PairPrediction {
    /// Argmax class; ties resolve toward `None`, then `Positive`.
    pub fn predicted(&self) -> Polarity {
        let mut best = 0;
        for i in 1..3 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        Polarity::from_index(best)
    }

    pub fn detected(&self) -> bool {
        self.predicted() != Polarity::None
    }

    /// Score for "carries an opinion".
    pub fn detection_score(&self) -> f64 {
        1.0 - self.probs[0]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    pub targets: usize,
    pub pairs: usize,
    pub gold_none: usize,
    pub gold_positive: usize,
    pub gold_negative: usize,
    /// Gold-opinionated pairs the model also detected; the sentiment population.
    pub sentiment_pairs: usize,
}

/// Metrics for one evaluated model. `None` marks a metric that is undefined
/// on this data (for example sentiment accuracy when nothing was detected).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aspect_strict_acc: Option<f64>,
    pub aspect_macro_f1: Option<f64>,
    pub aspect_auc: Option<f64>,
    pub sentiment_acc: Option<f64>,
    pub sentiment_auc: Option<f64>,
    pub counts: Support,
    pub metadata: BTreeMap<String, String>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean_defined(values: impl Iterator<Item = Result<Option<f64>>>) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        if let Some(v) = v? {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

impl EvalReport {
    /// Scores a complete set of pair predictions.
    ///
    /// Aspect detection treats a pair as detected when its argmax class is
    /// not `None`. Detection AUC uses `1 − P(None)` per aspect and averages
    /// over aspects; sentiment metrics run over gold-opinionated pairs that
    /// were also detected, comparing `P(Positive)` against `P(Negative)`,
    /// with sentiment AUC on `P(Positive)` averaged over aspects.
    pub fn from_predictions(preds: &[PairPrediction], aspects: &[String]) -> Result<Self> {
        let labels: Vec<&str> = aspects.iter().map(String::as_str).collect();
        let mut gold_sets: BTreeMap<(&str, &str), BTreeSet<String>> = BTreeMap::new();
        let mut pred_sets: BTreeMap<(&str, &str), BTreeSet<String>> = BTreeMap::new();
        let mut counts = Support::default();
        for p in preds {
            let key = (p.sentence_id.as_str(), p.target_id.as_str());
            let g = gold_sets.entry(key).or_default();
            let q = pred_sets.entry(key).or_default();
            if p.gold != Polarity::None {
                g.insert(p.aspect.clone());
            }
            if p.detected() {
                q.insert(p.aspect.clone());
            }
            counts.pairs += 1;
            match p.gold {
                Polarity::None => counts.gold_none += 1,
                Polarity::Positive => counts.gold_positive += 1,
                Polarity::Negative => counts.gold_negative += 1,
            }
        }
        counts.targets = gold_sets.len();

        let aspect_strict_acc = defined(strict_accuracy(&gold_sets, &pred_sets))?;
        let decisions: Vec<Decision<'_>> = preds
            .iter()
            .map(|p| Decision {
                label: p.aspect.as_str(),
                gold: p.gold != Polarity::None,
                predicted: p.detected(),
            })
            .collect();
        let aspect_macro_f1 = if preds.is_empty() {
            None
        } else {
            defined(macro_f1(&decisions, &labels))?
        };
        let aspect_auc = mean_defined(labels.iter().map(|&a| {
            let scores: Vec<(f64, bool)> = preds
                .iter()
                .filter(|p| p.aspect == a)
                .map(|p| (p.detection_score(), p.gold != Polarity::None))
                .collect();
            defined(auc(&scores))
        }))?;

        let sentiment: Vec<&PairPrediction> = preds
            .iter()
            .filter(|p| p.gold != Polarity::None && p.detected())
            .collect();
        counts.sentiment_pairs = sentiment.len();
        let sentiment_acc = (!sentiment.is_empty()).then(|| {
            let correct = sentiment
                .iter()
                .filter(|p| {
                    let guess = if p.probs[1] >= p.probs[2] {
                        Polarity::Positive
                    } else {
                        Polarity::Negative
                    };
                    guess == p.gold
                })
                .count();
            correct as f64 / sentiment.len() as f64
        });
        let sentiment_auc = mean_defined(labels.iter().map(|&a| {
            let scores: Vec<(f64, bool)> = sentiment
                .iter()
                .filter(|p| p.aspect == a)
                .map(|p| (p.probs[1], p.gold == Polarity::Positive))
                .collect();
            defined(auc(&scores))
        }))?;

        let mut metadata = BTreeMap::new();
        metadata.insert("detection_rule".into(), "detected iff argmax class is not None".into());
        metadata.insert("detection_auc_score".into(), "1 - P(None), mean over aspects".into());
        metadata.insert(
            "sentiment_population".into(),
            "gold non-None pairs that were detected".into(),
        );
        metadata.insert("sentiment_auc_score".into(), "P(Positive), mean over aspects".into());
        Ok(Self {
            aspect_strict_acc,
            aspect_macro_f1,
            aspect_auc,
            sentiment_acc,
            sentiment_auc,
            counts,
            metadata,
        })
    }

    pub fn metric_values(&self) -> [Option<f64>; 5] {
        [
            self.aspect_strict_acc,
            self.aspect_macro_f1,
            self.aspect_auc,
            self.sentiment_acc,
            self.sentiment_auc,
        ]
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "---".to_string(), |x| format!("{:.1}", 100.0 * x))
}

fn signed_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "---".to_string(), |x| format!("{:+.1}", 100.0 * x))
}

/// Renders rows as an aligned table: aspect detection Acc./F1/AUC and
/// sentiment Acc./AUC, all in percent.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut s = String::new();
    let _ = writeln!(s, "{:width$} | {:^23} | {:^15}", "", "Aspect Detection", "Sentiment");
    let _ = writeln!(
        s,
        "{:width$} | {:>7}{:>8}{:>8} | {:>7}{:>8}",
        "Model", "Acc.", "F1", "AUC", "Acc.", "AUC"
    );
    let _ = writeln!(s, "{}", "-".repeat(width + 46));
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:width$} | {:>7}{:>8}{:>8} | {:>7}{:>8}",
            name,
            pct(r.aspect_strict_acc),
            pct(r.aspect_macro_f1),
            pct(r.aspect_auc),
            pct(r.sentiment_acc),
            pct(r.sentiment_auc)
        );
    }
    s
}

/// One row of refined-minus-raw differences in the same layout.
pub fn render_delta_row(name: &str, raw: &EvalReport, refined: &EvalReport, width: usize) -> String {
    let d = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| b - a);
    format!(
        "{:width$} | {:>7}{:>8}{:>8} | {:>7}{:>8}\n",
        name,
        signed_pct(d(raw.aspect_strict_acc, refined.aspect_strict_acc)),
        signed_pct(d(raw.aspect_macro_f1, refined.aspect_macro_f1)),
        signed_pct(d(raw.aspect_auc, refined.aspect_auc)),
        signed_pct(d(raw.sentiment_acc, refined.sentiment_acc)),
        signed_pct(d(raw.sentiment_auc, refined.sentiment_auc)),
    )
}
