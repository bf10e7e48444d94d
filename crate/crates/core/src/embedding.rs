//! Word embedding store.
//!
//! Holds GloVe-style word vectors, lazily draws deterministic random vectors
//! for masked target tokens, and builds aspect vectors by averaging the
//! embeddings of the words in an aspect label.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::RwLock;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_DIM: usize = 300;
pub const DEFAULT_TARGET_RANGE: f64 = 0.1;

#[derive(Debug)]
pub struct EmbeddingTable {
    dim: usize,
    seed: u64,
    target_range: f64,
    entries: HashMap<String, Array1<f64>>,
    target_entries: RwLock<BTreeMap<String, Array1<f64>>>,
    zero: Array1<f64>,
}

impl Clone for EmbeddingTable {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            seed: self.seed,
            target_range: self.target_range,
            entries: self.entries.clone(),
            target_entries: RwLock::new(self.target_entries.read().unwrap().clone()),
            zero: self.zero.clone(),
        }
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            seed: 0,
            target_range: DEFAULT_TARGET_RANGE,
            entries: HashMap::new(),
            target_entries: RwLock::new(BTreeMap::new()),
            zero: Array1::zeros(dim),
        }
    }

    /// Sets the seed for target initialization. Clears any cached targets.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.target_entries = RwLock::new(BTreeMap::new());
        self
    }

    /// Half-width of the uniform distribution target vectors are drawn from.
    pub fn with_target_range(mut self, range: f64) -> Self {
        assert!(range >= 0.0 && range.is_finite());
        self.target_range = range;
        self.target_entries = RwLock::new(BTreeMap::new());
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Array1<f64>) -> Result<()> {
        let word = word.into();
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for {word:?} has length {}, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        self.entries.insert(word, vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&Array1<f64>> {
        self.entries.get(word)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    /// Vector for `word`, or the shared zero vector when it is out of vocabulary.
    pub fn lookup(&self, word: &str) -> ArrayView1<'_, f64> {
        self.entries.get(word).unwrap_or(&self.zero).view()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Random vector for a masked target token, drawn uniformly from
    /// `[-range, range]` per component on a stream keyed by `(seed, target_id)`.
    pub fn target_vector(&self, target_id: &str) -> Array1<f64> {
        if let Some(v) = self.target_entries.read().unwrap().get(target_id) {
            return v.clone();
        }
        let v = self.draw_target(target_id);
        self.target_entries
            .write()
            .unwrap()
            .entry(target_id.to_string())
            .or_insert(v)
            .clone()
    }

    fn draw_target(&self, target_id: &str) -> Array1<f64> {
        let mut stream = rng::stream(self.seed, &["target-embedding", target_id]);
        let r = self.target_range;
        Array1::from_shape_fn(self.dim, |_| if r == 0.0 { 0.0 } else { stream.random_range(-r..=r) })
    }

    /// Draws and caches target vectors up front so later reads never write.
    pub fn warm_targets<'a>(&self, target_ids: impl IntoIterator<Item = &'a str>) {
        for id in target_ids {
            self.target_vector(id);
        }
    }

    pub fn aspect_embedding(&self, label: &str) -> Result<AspectEmbedding> {
        let words = aspect_words(label);
        if words.is_empty() {
            return Err(Error::input(format!("empty aspect label {label:?}")));
        }
        let mut sum = Array1::<f64>::zeros(self.dim);
        let mut used = 0usize;
        let mut oov = Vec::new();
        for w in &words {
            match self.entries.get(w) {
                Some(v) => {
                    sum += v;
                    used += 1;
                }
                None => oov.push(w.clone()),
            }
        }
        if used > 1 {
            sum /= used as f64;
        }
        Ok(AspectEmbedding {
            label: label.to_string(),
            vector: sum,
            source_words: words,
            oov_words: oov,
            all_oov: used == 0,
        })
    }

    /// Writes the vocabulary in GloVe text format, sorted by token.
    pub fn write_glove<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut words: Vec<&String> = self.entries.keys().collect();
        words.sort();
        for w in words {
            write!(out, "{w}")?;
            for x in &self.entries[w] {
                write!(out, " {x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Splits an aspect label into lowercase lookup words on hyphens and whitespace.
pub fn aspect_words(label: &str) -> Vec<String> {
    label
        .split(|c: char| c == '-' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectEmbedding {
    pub label: String,
    pub vector: Array1<f64>,
    pub source_words: Vec<String>,
    pub oov_words: Vec<String>,
    /// Set when no constituent word was in vocabulary; `vector` is zero.
    pub all_oov: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseReport {
    pub skipped: Vec<SkippedLine>,
}

impl ParseReport {
    pub fn skip_count(&self) -> usize {
        self.skipped.len()
    }
}

pub fn parse_embedding_file(path: impl AsRef<Path>, dim: usize) -> Result<(EmbeddingTable, ParseReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(BufReader::new(file), dim).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_embeddings<R: BufRead>(reader: R, dim: usize) -> Result<(EmbeddingTable, ParseReport)> {
    if dim == 0 {
        return Err(Error::input("embedding dimension must be positive"));
    }
    let mut table = EmbeddingTable::new(dim);
    let mut report = ParseReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<embeddings>", e))?;
        let lineno = idx + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            report.skipped.push(SkippedLine {
                line: lineno,
                reason: format!("expected {dim} components, found {}", values.len()),
            });
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = values.iter().map(|v| v.parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.iter().all(|x| x.is_finite()) => {
                if table.contains(token) {
                    report.skipped.push(SkippedLine {
                        line: lineno,
                        reason: format!("duplicate token {token:?}"),
                    });
                } else {
                    table.insert(token, Array1::from(v))?;
                }
            }
            Ok(_) => report.skipped.push(SkippedLine {
                line: lineno,
                reason: "non-finite component".into(),
            }),
            Err(e) => report.skipped.push(SkippedLine {
                line: lineno,
                reason: format!("bad number: {e}"),
            }),
        }
    }
    Ok((table, report))
}
