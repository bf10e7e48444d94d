//! TABSA sentences, gold opinion tuples, and per-sentence embedding contexts.

mod sentihood;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{AspectEmbedding, EmbeddingTable};
use crate::error::{Error, Result};

pub use sentihood::{load_sentihood, load_sentihood_path, parse_sentihood, LoadOutcome, RecordError};
pub use synthetic::{generate_synthetic, synthetic_embeddings, SyntheticConfig};

/// Aspect labels evaluated by default.
pub const TOP_ASPECTS: [&str; 4] = ["general", "price", "transit-location", "safety"];

pub fn default_aspects() -> Vec<String> {
    TOP_ASPECTS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    None,
    Positive,
    Negative,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::None, Polarity::Positive, Polarity::Negative];

    pub fn index(self) -> usize {
        match self {
            Polarity::None => 0,
            Polarity::Positive => 1,
            Polarity::Negative => 2,
        }
    }

    pub fn from_index(i: usize) -> Polarity {
        Self::ALL[i]
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Polarity::None => "None",
            Polarity::Positive => "Positive",
            Polarity::Negative => "Negative",
        };
        f.write_str(s)
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(Polarity::Positive),
            "negative" => Ok(Polarity::Negative),
            "none" => Ok(Polarity::None),
            _ => Err(Error::input(format!("unknown sentiment {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpinionTuple {
    pub target_id: String,
    pub aspect: String,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    id: String,
    tokens: Vec<String>,
    target_positions: BTreeMap<String, usize>,
    opinions: Vec<OpinionTuple>,
    split: Option<Split>,
}

impl Sentence {
    /// Builds a sentence, locating target tokens and checking invariants.
    ///
    /// Every token that looks like a masked target (`LOCATION<digits>`) or
    /// names an opinion's target becomes a target; its first occurrence is
    /// the target position.
    pub fn new(id: impl Into<String>, tokens: Vec<String>, opinions: Vec<OpinionTuple>) -> Result<Self> {
        let id = id.into();
        let mut target_positions = BTreeMap::new();
        let named: BTreeSet<&str> = opinions.iter().map(|o| o.target_id.as_str()).collect();
        for (i, tok) in tokens.iter().enumerate() {
            if is_target_token(tok) || named.contains(tok.as_str()) {
                target_positions.entry(tok.clone()).or_insert(i);
            }
        }
        Self::with_positions(id, tokens, target_positions, opinions)
    }

    pub fn with_positions(
        id: impl Into<String>,
        tokens: Vec<String>,
        target_positions: BTreeMap<String, usize>,
        opinions: Vec<OpinionTuple>,
    ) -> Result<Self> {
        let id = id.into();
        if target_positions.is_empty() || target_positions.len() > 2 {
            return Err(Error::input(format!(
                "sentence {id}: expected 1 or 2 targets, found {}",
                target_positions.len()
            )));
        }
        for (t, &pos) in &target_positions {
            if pos >= tokens.len() {
                return Err(Error::input(format!(
                    "sentence {id}: target {t} position {pos} out of range for {} tokens",
                    tokens.len()
                )));
            }
        }
        for o in &opinions {
            if !target_positions.contains_key(&o.target_id) {
                return Err(Error::input(format!(
                    "sentence {id}: opinion target {} not found in text",
                    o.target_id
                )));
            }
        }
        Ok(Self {
            id,
            tokens,
            target_positions,
            opinions,
            split: None,
        })
    }

    pub fn with_split(mut self, split: Option<Split>) -> Self {
        self.split = split;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target_positions(&self) -> &BTreeMap<String, usize> {
        &self.target_positions
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.target_positions.keys().map(String::as_str)
    }

    pub fn opinions(&self) -> &[OpinionTuple] {
        &self.opinions
    }

    pub fn split(&self) -> Option<Split> {
        self.split
    }

    /// Gold polarity for a (target, aspect) pair; `None` when no opinion is annotated.
    pub fn gold(&self, target_id: &str, aspect: &str) -> Polarity {
        self.opinions
            .iter()
            .find(|o| o.target_id == target_id && o.aspect == aspect)
            .map_or(Polarity::None, |o| o.polarity)
    }

    /// The other target in a two-target sentence.
    pub fn other_target(&self, target_id: &str) -> Option<&str> {
        self.targets().find(|t| *t != target_id)
    }
}

/// `LOCATION` followed by one or more digits.
pub fn is_target_token(tok: &str) -> bool {
    tok.strip_prefix("LOCATION")
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

/// Lowercases, splits on whitespace, and strips surrounding punctuation.
/// Masked target tokens keep their exact uppercase form; a trailing clitic
/// such as `LOCATION1's` is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let stripped = raw.trim_matches(|c: char| !c.is_alphanumeric());
        if stripped.is_empty() {
            continue;
        }
        if let Some(rest) = stripped.strip_prefix("LOCATION") {
            let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            if !digits.is_empty() {
                out.push(format!("LOCATION{digits}"));
                continue;
            }
        }
        out.push(stripped.to_lowercase());
    }
    out
}

/// Drops opinions whose aspect is outside `aspects` and then drops sentences
/// with no remaining opinions.
pub fn filter_top_aspects(sentences: &[Sentence], aspects: &BTreeSet<String>) -> Result<Vec<Sentence>> {
    if aspects.is_empty() {
        return Err(Error::input("aspect set must not be empty"));
    }
    Ok(sentences
        .iter()
        .filter_map(|s| {
            let opinions: Vec<OpinionTuple> = s
                .opinions
                .iter()
                .filter(|o| aspects.contains(&o.aspect))
                .cloned()
                .collect();
            (!opinions.is_empty()).then(|| Sentence { opinions, ..s.clone() })
        })
        .collect())
}

/// The embedding matrix of one sentence, seen from one target and one aspect.
#[derive(Debug, Clone)]
pub struct SentenceContext {
    /// m × n; column j embeds token j.
    pub matrix: Array2<f64>,
    pub target_column: usize,
    pub other_target_column: Option<usize>,
    pub aspect: AspectEmbedding,
}

impl SentenceContext {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.ncols() == 0
    }
}

pub fn build_context(
    sentence: &Sentence,
    target_id: &str,
    aspect: AspectEmbedding,
    table: &EmbeddingTable,
) -> Result<SentenceContext> {
    let &target_column = sentence
        .target_positions
        .get(target_id)
        .ok_or_else(|| Error::input(format!("sentence {}: unknown target {target_id:?}", sentence.id)))?;
    if aspect.vector.len() != table.dim() {
        return Err(Error::Shape(format!(
            "aspect vector has length {}, table dim is {}",
            aspect.vector.len(),
            table.dim()
        )));
    }
    let m = table.dim();
    let n = sentence.tokens.len();
    let mut matrix = Array2::<f64>::zeros((m, n));
    for (j, tok) in sentence.tokens.iter().enumerate() {
        if sentence.target_positions.contains_key(tok) {
            matrix.column_mut(j).assign(&table.target_vector(tok));
        } else {
            matrix.column_mut(j).assign(&table.lookup(tok));
        }
    }
    let other_target_column = sentence.other_target(target_id).map(|t| sentence.target_positions[t]);
    Ok(SentenceContext {
        matrix,
        target_column,
        other_target_column,
        aspect,
    })
}
