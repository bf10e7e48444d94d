//! Downstream evaluation with a linear softmax classifier.
//!
//! Raw and refined pipelines share every step except the target and aspect
//! vectors fed into the features, so metric differences come from the
//! refinement alone.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Polarity, Sentence, Split};
use crate::embedding::{AspectEmbedding, EmbeddingTable};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, PairPrediction};
use crate::refiner::RefinementResult;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Raw,
    Refined,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Raw => "raw",
            Mode::Refined => "refined",
        })
    }
}

/// `[sentence mean ‖ target ‖ aspect ‖ target ⊙ sentence mean]`, length 4m.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub components: Array1<f64>,
    pub provenance: Mode,
}

/// Refinement records keyed by (sentence id, target id, aspect).
#[derive(Debug, Default, Clone)]
pub struct RefinedIndex {
    records: HashMap<(String, String, String), RefinementResult>,
}

impl RefinedIndex {
    pub fn new(records: impl IntoIterator<Item = RefinementResult>) -> Self {
        Self {
            records: records
                .into_iter()
                .map(|r| ((r.sentence_id.clone(), r.target_id.clone(), r.aspect.clone()), r))
                .collect(),
        }
    }

    pub fn get(&self, sentence_id: &str, target_id: &str, aspect: &str) -> Option<&RefinementResult> {
        self.records
            .get(&(sentence_id.to_string(), target_id.to_string(), aspect.to_string()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Mean of the sentence's raw token vectors; target tokens use their random
/// initial vectors in both modes.
pub fn sentence_mean(sentence: &Sentence, table: &EmbeddingTable) -> Array1<f64> {
    let mut sum = Array1::<f64>::zeros(table.dim());
    for tok in sentence.tokens() {
        if sentence.target_positions().contains_key(tok) {
            sum += &table.target_vector(tok);
        } else {
            sum += &table.lookup(tok);
        }
    }
    if !sentence.is_empty() {
        sum /= sentence.len() as f64;
    }
    sum
}

pub fn featurize(
    sentence: &Sentence,
    target_id: &str,
    aspect: &AspectEmbedding,
    table: &EmbeddingTable,
    mode: Mode,
    refined: Option<&RefinedIndex>,
) -> Result<FeatureVector> {
    if !sentence.target_positions().contains_key(target_id) {
        return Err(Error::input(format!(
            "sentence {}: unknown target {target_id:?}",
            sentence.id()
        )));
    }
    let mean = sentence_mean(sentence, table);
    let (target, aspect_vec) = match mode {
        Mode::Raw => (table.target_vector(target_id), aspect.vector.clone()),
        Mode::Refined => {
            let rec = refined
                .and_then(|idx| idx.get(sentence.id(), target_id, &aspect.label))
                .ok_or_else(|| {
                    Error::input(format!(
                        "no refinement record for ({}, {target_id}, {})",
                        sentence.id(),
                        aspect.label
                    ))
                })?;
            if rec.t_refined.len() != table.dim() || rec.a_refined.len() != table.dim() {
                return Err(Error::Shape(format!(
                    "refinement record for ({}, {target_id}, {}) has the wrong dimension",
                    sentence.id(),
                    aspect.label
                )));
            }
            (Array1::from(rec.t_refined.clone()), Array1::from(rec.a_refined.clone()))
        }
    };
    let product = &target * &mean;
    let components = concatenate(
        Axis(0),
        &[mean.view(), target.view(), aspect_vec.view(), product.view()],
    )
    .expect("blocks share one dimension");
    Ok(FeatureVector {
        components,
        provenance: mode,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sentence_id: String,
    pub target_id: String,
    pub aspect: String,
    pub gold: Polarity,
    pub features: FeatureVector,
}

/// One example per (target, aspect) pair, in sentence, target, aspect order.
pub fn build_examples(
    sentences: &[Sentence],
    table: &EmbeddingTable,
    aspects: &[AspectEmbedding],
    mode: Mode,
    refined: Option<&RefinedIndex>,
) -> Result<Vec<Example>> {
    table.warm_targets(sentences.iter().flat_map(|s| s.targets()));
    let items: Vec<(&Sentence, &str, &AspectEmbedding)> = sentences
        .iter()
        .flat_map(|s| s.targets().flat_map(move |t| aspects.iter().map(move |a| (s, t, a))))
        .collect();
    items
        .par_iter()
        .map(|&(s, t, a)| {
            Ok(Example {
                sentence_id: s.id().to_string(),
                target_id: t.to_string(),
                aspect: a.label.clone(),
                gold: s.gold(t, &a.label),
                features: featurize(s, t, a, table, mode, refined)?,
            })
        })
        .collect()
}

/// Split for one sentence: its recorded split, else a seeded 80/10/10 draw.
pub fn assign_split(sentence: &Sentence, seed: u64) -> Split {
    if let Some(s) = sentence.split() {
        return s;
    }
    let r: f64 = rng::stream(seed, &["split", sentence.id()]).random();
    if r < 0.8 {
        Split::Train
    } else if r < 0.9 {
        Split::Dev
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Fixed step size; when unset, `1 / L` for a bound `L` on the loss curvature.
    pub learning_rate: Option<f64>,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            learning_rate: None,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    /// 3 × d, rows in [`Polarity::ALL`] order.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub feature_mean: Array1<f64>,
    pub feature_scale: Array1<f64>,
    pub mode: Mode,
    pub config: TrainConfig,
    pub learning_rate: f64,
    /// Regularized training loss before each epoch and after the last.
    pub loss_history: Vec<f64>,
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn largest_eigenvalue(gram: &Array2<f64>) -> f64 {
    let d = gram.nrows();
    let mut v = Array1::<f64>::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = gram.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda
}

struct Design {
    /// N × (d + 1); last column is the constant 1.
    z: Array2<f64>,
    targets: Array2<f64>,
}

fn design(features: &Array2<f64>, mean: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let n = features.nrows();
    let standardized = (features - mean) / scale;
    concatenate(Axis(1), &[standardized.view(), Array2::ones((n, 1)).view()]).expect("same row count")
}

fn loss_and_gradient(params: &Array2<f64>, data: &Design, l2: f64) -> (f64, Array2<f64>) {
    let n = data.z.nrows() as f64;
    let mut probs = data.z.dot(&params.t());
    softmax_rows(&mut probs);
    let mut ce = 0.0;
    for (p, y) in probs.rows().into_iter().zip(data.targets.rows()) {
        for (pi, yi) in p.iter().zip(y.iter()) {
            if *yi > 0.0 {
                ce -= pi.max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    let d = params.ncols() - 1;
    let w = params.slice(s![.., ..d]);
    let loss = ce / n + 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>();
    let resid = probs - &data.targets;
    let mut grad = resid.t().dot(&data.z) / n;
    grad.slice_mut(s![.., ..d]).scaled_add(l2, &w);
    (loss, grad)
}

pub fn train(examples: &[(FeatureVector, Polarity)], cfg: &TrainConfig) -> Result<ClassifierModel> {
    let Some((first, _)) = examples.first() else {
        return Err(Error::input("no training examples"));
    };
    let mode = first.provenance;
    let d = first.components.len();
    if examples
        .iter()
        .any(|(f, _)| f.provenance != mode || f.components.len() != d)
    {
        return Err(Error::input("training examples mix modes or feature lengths"));
    }
    for class in Polarity::ALL {
        if !examples.iter().any(|(_, p)| *p == class) {
            return Err(Error::input(format!("no training example of class {class}")));
        }
    }
    let n = examples.len();
    let mut features = Array2::<f64>::zeros((n, d));
    let mut targets = Array2::<f64>::zeros((n, 3));
    for (i, (f, p)) in examples.iter().enumerate() {
        features.row_mut(i).assign(&f.components);
        targets[[i, p.index()]] = 1.0;
    }
    let feature_mean = features.mean_axis(Axis(0)).expect("non-empty");
    let var = features.var_axis(Axis(0), 0.0);
    let feature_scale = var.mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
    let data = Design {
        z: design(&features, &feature_mean, &feature_scale),
        targets,
    };

    let learning_rate = match cfg.learning_rate {
        Some(lr) if lr.is_finite() && lr >= 0.0 => lr,
        Some(_) => return Err(Error::input("learning rate must be finite and non-negative")),
        None => {
            // softmax cross-entropy curvature ≤ ½ λmax(ZᵀZ / N) + l2
            let gram = data.z.t().dot(&data.z) / n as f64;
            let bound = 0.5 * 1.05 * largest_eigenvalue(&gram) + cfg.l2;
            1.0 / bound
        }
    };

    let mut params = Array2::<f64>::zeros((3, d + 1));
    let mut loss_history = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let (loss, grad) = loss_and_gradient(&params, &data, cfg.l2);
        loss_history.push(loss);
        params.scaled_add(-learning_rate, &grad);
    }
    loss_history.push(loss_and_gradient(&params, &data, cfg.l2).0);

    Ok(ClassifierModel {
        weights: params.slice(s![.., ..d]).to_owned(),
        bias: params.column(d).to_owned(),
        feature_mean,
        feature_scale,
        mode,
        config: cfg.clone(),
        learning_rate,
        loss_history,
    })
}

impl ClassifierModel {
    pub fn predict_proba(&self, features: &FeatureVector) -> Result<[f64; 3]> {
        if features.provenance != self.mode {
            return Err(Error::input(format!(
                "model trained on {} features, got {}",
                self.mode, features.provenance
            )));
        }
        Ok(self.proba(features.components.view()))
    }

    fn proba(&self, x: ArrayView1<'_, f64>) -> [f64; 3] {
        let z = (&x - &self.feature_mean) / &self.feature_scale;
        let logits = self.weights.dot(&z) + &self.bias;
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e = logits.mapv(|v| (v - max).exp());
        let sum = e.sum();
        [e[0] / sum, e[1] / sum, e[2] / sum]
    }
}

pub fn predict(model: &ClassifierModel, examples: &[Example]) -> Result<Vec<PairPrediction>> {
    examples
        .par_iter()
        .map(|ex| {
            Ok(PairPrediction {
                sentence_id: ex.sentence_id.clone(),
                target_id: ex.target_id.clone(),
                aspect: ex.aspect.clone(),
                gold: ex.gold,
                probs: model.predict_proba(&ex.features)?,
            })
        })
        .collect()
}

pub fn evaluate(model: &ClassifierModel, examples: &[Example], mode: Mode, aspects: &[String]) -> Result<EvalReport> {
    if model.mode != mode {
        return Err(Error::input(format!(
            "model trained in {} mode cannot evaluate {mode} data",
            model.mode
        )));
    }
    let preds = predict(model, examples)?;
    let mut report = EvalReport::from_predictions(&preds, aspects)?;
    report.metadata.insert("mode".into(), mode.to_string());
    Ok(report)
}

/// Between-aspect centroid spread relative to within-aspect spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    /// Mean distance between centroids of distinct aspects.
    pub inter: f64,
    /// Mean distance of a vector to its own aspect's centroid.
    pub intra: f64,
    /// `inter / intra`; `+∞` when every aspect collapses to a point,
    /// serialized as the string `"inf"`.
    #[serde(with = "extended_float")]
    pub ratio: f64,
}

mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

pub fn separation_statistic(groups: &BTreeMap<String, Vec<Array1<f64>>>) -> Result<Separation> {
    if groups.len() < 2 {
        return Err(Error::input("separation needs at least two aspects"));
    }
    let dim = groups.values().flatten().next().map_or(0, |v| v.len());
    if groups.values().any(|g| g.len() < 2) {
        return Err(Error::input("separation needs at least two vectors per aspect"));
    }
    if groups.values().flatten().any(|v| v.len() != dim) {
        return Err(Error::Shape("aspect vectors differ in length".into()));
    }
    let dist = |a: &Array1<f64>, b: &Array1<f64>| (a - b).mapv(|x| x * x).sum().sqrt();
    let centroids: Vec<Array1<f64>> = groups
        .values()
        .map(|g| {
            // a collapsed group is its own centroid, without rounding
            if g.iter().all(|v| *v == g[0]) {
                return g[0].clone();
            }
            let mut c = Array1::<f64>::zeros(dim);
            for v in g {
                c += v;
            }
            c / g.len() as f64
        })
        .collect();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += dist(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    let mut intra = 0.0;
    let mut count = 0usize;
    for (g, c) in groups.values().zip(&centroids) {
        for v in g {
            intra += dist(v, c);
            count += 1;
        }
    }
    intra /= count as f64;
    if intra == 0.0 && inter == 0.0 {
        return Err(Error::UndefinedMetric("all aspect vectors coincide".into()));
    }
    let ratio = if intra == 0.0 { f64::INFINITY } else { inter / intra };
    Ok(Separation { inter, intra, ratio })
}
