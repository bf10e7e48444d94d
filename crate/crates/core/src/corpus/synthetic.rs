//! Seeded synthetic TABSA corpus with a matching embedding table.
//!
//! Each opinion is planted as an aspect cue word followed by a polarity cue
//! word right after its target; filler words pad the rest. The embedding
//! table places cue words along a per-aspect direction and polarity words
//! along a shared sentiment axis, roughly the way GloVe clusters
//! "expensive" near "price".

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{OpinionTuple, Polarity, Sentence, TOP_ASPECTS};
use crate::embedding::{aspect_words, EmbeddingTable};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub count: usize,
    pub two_target_ratio: f64,
    pub dim: usize,
    pub aspects: Vec<String>,
    /// Aspect label → cue words for that aspect.
    pub lexicons: BTreeMap<String, Vec<String>>,
    pub positive_words: Vec<String>,
    pub negative_words: Vec<String>,
    pub filler_words: Vec<String>,
    /// Probability that a planted opinion is positive.
    pub positive_rate: f64,
    /// Length of a cue word's projection on its aspect or sentiment direction.
    pub cue_strength: f64,
    /// Norm of the isotropic noise added to every vocabulary vector.
    pub noise: f64,
    /// Inclusive filler-count ranges before a target, after each planted
    /// opinion, and after a target's last opinion.
    pub prefix_fillers: [usize; 2],
    pub gap_fillers: [usize; 2],
    pub suffix_fillers: [usize; 2],
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let mut lexicons = BTreeMap::new();
        lexicons.insert(
            "general".to_string(),
            words(&["neighbourhood", "area", "place", "district", "vibe", "overall"]),
        );
        lexicons.insert(
            "price".to_string(),
            words(&["expensive", "pricey", "cheap", "affordable", "rent", "overpriced"]),
        );
        lexicons.insert(
            "transit-location".to_string(),
            words(&["commute", "tube", "station", "bus", "transport", "central"]),
        );
        lexicons.insert(
            "safety".to_string(),
            words(&["safe", "crime", "dangerous", "police", "secure", "muggings"]),
        );
        Self {
            seed: 1,
            count: 600,
            two_target_ratio: 0.3,
            dim: 50,
            aspects: TOP_ASPECTS.iter().map(|s| s.to_string()).collect(),
            lexicons,
            positive_words: words(&["great", "lovely", "good", "excellent", "nice", "wonderful"]),
            negative_words: words(&["terrible", "awful", "bad", "horrible", "poor", "dreadful"]),
            filler_words: words(&[
                "the", "is", "a", "of", "to", "it", "in", "really", "quite", "very", "i", "think", "with", "for",
                "there", "some", "people", "lot", "live", "street", "home", "friends", "weekend", "time", "year",
                "just", "also", "my", "we", "was",
            ]),
            positive_rate: 0.5,
            cue_strength: 1.0,
            noise: 0.5,
            prefix_fillers: [1, 4],
            gap_fillers: [0, 2],
            suffix_fillers: [2, 6],
        }
    }
}

impl SyntheticConfig {
    /// Parses a flat key-value TOML file. Recognized keys: `seed`, `count`,
    /// `two_target_ratio`, `dim`, `aspects`, `positive_words`,
    /// `negative_words`, `filler_words`, `positive_rate`, `cue_strength`,
    /// `noise`, the `[low, high]` pairs `prefix_fillers`, `gap_fillers` and
    /// `suffix_fillers`, and `lexicon_<aspect>` lists. Missing keys keep
    /// defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::input(format!("bad synthetic config: {e}")))?;
        let mut cfg = SyntheticConfig::default();
        let mut lexicons = BTreeMap::new();
        for (key, value) in &table {
            let bad = || Error::input(format!("synthetic config key {key:?} has the wrong type"));
            match key.as_str() {
                "seed" => cfg.seed = value.as_integer().ok_or_else(bad)? as u64,
                "count" => cfg.count = usize::try_from(value.as_integer().ok_or_else(bad)?).map_err(|_| bad())?,
                "dim" => cfg.dim = usize::try_from(value.as_integer().ok_or_else(bad)?).map_err(|_| bad())?,
                "two_target_ratio" => cfg.two_target_ratio = as_float(value).ok_or_else(bad)?,
                "positive_rate" => cfg.positive_rate = as_float(value).ok_or_else(bad)?,
                "cue_strength" => cfg.cue_strength = as_float(value).ok_or_else(bad)?,
                "noise" => cfg.noise = as_float(value).ok_or_else(bad)?,
                "prefix_fillers" => cfg.prefix_fillers = range(value).ok_or_else(bad)?,
                "gap_fillers" => cfg.gap_fillers = range(value).ok_or_else(bad)?,
                "suffix_fillers" => cfg.suffix_fillers = range(value).ok_or_else(bad)?,
                "aspects" => cfg.aspects = string_list(value).ok_or_else(bad)?,
                "positive_words" => cfg.positive_words = string_list(value).ok_or_else(bad)?,
                "negative_words" => cfg.negative_words = string_list(value).ok_or_else(bad)?,
                "filler_words" => cfg.filler_words = string_list(value).ok_or_else(bad)?,
                other => match other.strip_prefix("lexicon_") {
                    Some(aspect) => {
                        lexicons.insert(aspect.to_string(), string_list(value).ok_or_else(bad)?);
                    }
                    None => return Err(Error::input(format!("unknown synthetic config key {other:?}"))),
                },
            }
        }
        if !lexicons.is_empty() {
            cfg.lexicons = lexicons;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        let mut t = toml::Table::new();
        t.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        t.insert("count".into(), toml::Value::Integer(self.count as i64));
        t.insert("dim".into(), toml::Value::Integer(self.dim as i64));
        t.insert("two_target_ratio".into(), toml::Value::Float(self.two_target_ratio));
        t.insert("positive_rate".into(), toml::Value::Float(self.positive_rate));
        t.insert("cue_strength".into(), toml::Value::Float(self.cue_strength));
        t.insert("noise".into(), toml::Value::Float(self.noise));
        let pair = |r: [usize; 2]| toml::Value::Array(r.iter().map(|&v| toml::Value::Integer(v as i64)).collect());
        t.insert("prefix_fillers".into(), pair(self.prefix_fillers));
        t.insert("gap_fillers".into(), pair(self.gap_fillers));
        t.insert("suffix_fillers".into(), pair(self.suffix_fillers));
        let list = |v: &[String]| toml::Value::Array(v.iter().map(|s| toml::Value::String(s.clone())).collect());
        t.insert("aspects".into(), list(&self.aspects));
        t.insert("positive_words".into(), list(&self.positive_words));
        t.insert("negative_words".into(), list(&self.negative_words));
        t.insert("filler_words".into(), list(&self.filler_words));
        for (aspect, cues) in &self.lexicons {
            t.insert(format!("lexicon_{aspect}"), list(cues));
        }
        toml::to_string(&t).expect("flat table serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for r in [self.prefix_fillers, self.gap_fillers, self.suffix_fillers] {
            if r[0] > r[1] {
                return Err(Error::input("filler ranges must be [low, high] with low ≤ high"));
            }
        }
        if !(0.0..=1.0).contains(&self.two_target_ratio) {
            return Err(Error::input("two_target_ratio must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(Error::input("positive_rate must lie in [0, 1]"));
        }
        if self.dim == 0 {
            return Err(Error::input("dim must be positive"));
        }
        if self.aspects.is_empty() {
            return Err(Error::input("aspects must not be empty"));
        }
        for a in &self.aspects {
            if self.lexicons.get(a).is_none_or(|l| l.is_empty()) {
                return Err(Error::input(format!("no cue lexicon for aspect {a:?}")));
            }
        }
        if self.positive_words.is_empty() || self.negative_words.is_empty() || self.filler_words.is_empty() {
            return Err(Error::input("polarity and filler lexicons must not be empty"));
        }
        if !(self.cue_strength.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::input(
                "cue_strength and noise must be finite, noise non-negative",
            ));
        }
        Ok(())
    }
}

fn range(v: &toml::Value) -> Option<[usize; 2]> {
    match v.as_array()?.as_slice() {
        [lo, hi] => Some([
            usize::try_from(lo.as_integer()?).ok()?,
            usize::try_from(hi.as_integer()?).ok()?,
        ]),
        _ => None,
    }
}

fn as_float(v: &toml::Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn string_list(v: &toml::Value) -> Option<Vec<String>> {
    v.as_array()?.iter().map(|x| x.as_str().map(str::to_string)).collect()
}

/// A random direction of unit length.
fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
    let norm = v.dot(&v).sqrt();
    v / norm
}

fn noise(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Array1<f64> {
    let sd = scale / (dim as f64).sqrt();
    Array1::from_shape_fn(dim, |_| sd * Distribution::<f64>::sample(&StandardNormal, rng))
}

/// Vocabulary vectors for every word the generator can emit, plus the
/// aspect label words.
pub fn synthetic_embeddings(cfg: &SyntheticConfig) -> Result<EmbeddingTable> {
    cfg.validate()?;
    let dim = cfg.dim;
    let mut rng = rng::stream(cfg.seed, &["synthetic-embeddings"]);
    let sentiment = unit(&mut rng, dim);
    let mut table = EmbeddingTable::new(dim).with_seed(cfg.seed);
    let put = |table: &mut EmbeddingTable, rng: &mut ChaCha8Rng, word: &str, base: Array1<f64>| -> Result<()> {
        if !table.contains(word) {
            let v = base + noise(rng, dim, cfg.noise);
            table.insert(word, v)?;
        }
        Ok(())
    };
    for aspect in &cfg.aspects {
        let dir = unit(&mut rng, dim);
        for w in aspect_words(aspect) {
            put(&mut table, &mut rng, &w, dir.clone())?;
        }
        for w in &cfg.lexicons[aspect] {
            put(&mut table, &mut rng, w, &dir * cfg.cue_strength)?;
        }
    }
    for w in &cfg.positive_words {
        put(&mut table, &mut rng, w, &sentiment * cfg.cue_strength)?;
    }
    for w in &cfg.negative_words {
        put(&mut table, &mut rng, w, &sentiment * -cfg.cue_strength)?;
    }
    for w in cfg.filler_words.iter().chain(std::iter::once(&"and".to_string())) {
        let v = unit(&mut rng, dim);
        put(&mut table, &mut rng, w, v)?;
    }
    Ok(table)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Sentence>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| generate_one(cfg, i)).collect()
}

fn generate_one(cfg: &SyntheticConfig, index: usize) -> Result<Sentence> {
    let mut rng = rng::stream(cfg.seed, &["synthetic-sentence", &index.to_string()]);
    let two = rng.random_bool(cfg.two_target_ratio);
    let targets: &[&str] = if two {
        &["LOCATION1", "LOCATION2"]
    } else {
        &["LOCATION1"]
    };

    // opinions per target: single-target sentences always carry one
    let mut plan: Vec<usize> = Vec::new();
    loop {
        plan.clear();
        for _ in targets {
            let r: f64 = rng.random();
            let k = if two {
                if r < 0.25 {
                    0
                } else if r < 0.8 {
                    1
                } else {
                    2
                }
            } else if r < 0.7 {
                1
            } else {
                2
            };
            plan.push(k.min(cfg.aspects.len()));
        }
        if plan.iter().sum::<usize>() > 0 {
            break;
        }
    }

    let mut tokens = Vec::new();
    let mut opinions = Vec::new();
    for (ti, (&target, &k)) in targets.iter().zip(&plan).enumerate() {
        if ti > 0 {
            tokens.push("and".to_string());
        }
        let prefix = rng.random_range(cfg.prefix_fillers[0]..=cfg.prefix_fillers[1]);
        push_fillers(&mut tokens, cfg, &mut rng, prefix);
        tokens.push(target.to_string());
        let chosen: Vec<&String> = cfg.aspects.choose_multiple(&mut rng, k).collect();
        for aspect in chosen {
            let polarity = if rng.random_bool(cfg.positive_rate) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            tokens.push(cfg.lexicons[aspect].choose(&mut rng).unwrap().clone());
            let pol_words = match polarity {
                Polarity::Positive => &cfg.positive_words,
                _ => &cfg.negative_words,
            };
            tokens.push(pol_words.choose(&mut rng).unwrap().clone());
            let gap = rng.random_range(cfg.gap_fillers[0]..=cfg.gap_fillers[1]);
            push_fillers(&mut tokens, cfg, &mut rng, gap);
            opinions.push(OpinionTuple {
                target_id: target.to_string(),
                aspect: aspect.clone(),
                polarity,
            });
        }
        let suffix = rng.random_range(cfg.suffix_fillers[0]..=cfg.suffix_fillers[1]);
        push_fillers(&mut tokens, cfg, &mut rng, suffix);
    }
    Sentence::new(format!("syn-{index:05}"), tokens, opinions)
}

fn push_fillers(tokens: &mut Vec<String>, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, count: usize) {
    for _ in 0..count {
        tokens.push(cfg.filler_words.choose(rng).unwrap().clone());
    }
}
