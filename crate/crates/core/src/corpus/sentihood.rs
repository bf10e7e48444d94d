use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use super::{tokenize, OpinionTuple, Polarity, Sentence, Split};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Value,
    text: String,
    #[serde(default)]
    opinions: Vec<RawOpinion>,
    #[serde(default)]
    split: Option<Split>,
}

#[derive(Debug, Deserialize)]
struct RawOpinion {
    target_entity: String,
    aspect: String,
    sentiment: String,
}

/// A record that could not be turned into a [`Sentence`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    /// Record id when it could be read, else the array index.
    pub record: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOutcome {
    pub sentences: Vec<Sentence>,
    pub rejected: Vec<RecordError>,
}

impl LoadOutcome {
    pub fn single_target_count(&self) -> usize {
        self.sentences
            .iter()
            .filter(|s| s.target_positions().len() == 1)
            .count()
    }

    pub fn two_target_count(&self) -> usize {
        self.sentences
            .iter()
            .filter(|s| s.target_positions().len() == 2)
            .count()
    }
}

/// Loads one SentiHood JSON file.
pub fn load_sentihood(path: impl AsRef<Path>) -> Result<LoadOutcome> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split = split_from_name(path);
    parse_sentihood(&text, split)
}

/// Loads a SentiHood file, or every `*.json` file in a directory (sorted by
/// name). File names containing `train`, `dev`, or `test` set the split of
/// records that carry none.
pub fn load_sentihood_path(path: impl AsRef<Path>) -> Result<LoadOutcome> {
    let path = path.as_ref();
    if !path.is_dir() {
        return load_sentihood(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::input(format!("no .json files in {}", path.display())));
    }
    let mut out = LoadOutcome::default();
    for f in files {
        let part = load_sentihood(&f)?;
        out.sentences.extend(part.sentences);
        out.rejected.extend(part.rejected);
    }
    Ok(out)
}

fn split_from_name(path: &Path) -> Option<Split> {
    let name = path.file_name()?.to_str()?.to_ascii_lowercase();
    if name.contains("train") {
        Some(Split::Train)
    } else if name.contains("dev") {
        Some(Split::Dev)
    } else if name.contains("test") {
        Some(Split::Test)
    } else {
        None
    }
}

pub fn parse_sentihood(text: &str, default_split: Option<Split>) -> Result<LoadOutcome> {
    let records: Vec<Value> =
        serde_json::from_str(text).map_err(|e| Error::input(format!("malformed SentiHood JSON: {e}")))?;
    let mut out = LoadOutcome::default();
    for (idx, value) in records.into_iter().enumerate() {
        let raw: RawRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(RecordError {
                    record: format!("#{idx}"),
                    message: format!("bad record: {e}"),
                });
                continue;
            }
        };
        let id = match &raw.id {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        match convert(&id, raw, default_split) {
            Ok(s) => out.sentences.push(s),
            Err(e) => out.rejected.push(RecordError {
                record: id,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

fn convert(id: &str, raw: RawRecord, default_split: Option<Split>) -> Result<Sentence> {
    let mut opinions: Vec<OpinionTuple> = Vec::with_capacity(raw.opinions.len());
    for o in raw.opinions {
        let polarity: Polarity = o.sentiment.parse()?;
        if polarity == Polarity::None {
            continue;
        }
        let dup = opinions
            .iter()
            .any(|p| p.target_id == o.target_entity && p.aspect == o.aspect);
        if !dup {
            opinions.push(OpinionTuple {
                target_id: o.target_entity,
                aspect: o.aspect,
                polarity,
            });
        }
    }
    let tokens = tokenize(&raw.text);
    Ok(Sentence::new(id, tokens, opinions)?.with_split(raw.split.or(default_split)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maps_simple_record() {
        let json = r#"[{"id": 7, "text": "LOCATION1 is great",
            "opinions": [{"target_entity": "LOCATION1", "aspect": "general", "sentiment": "Positive"}]}]"#;
        let out = parse_sentihood(json, None).unwrap();
        assert!(out.rejected.is_empty());
        let s = &out.sentences[0];
        assert_eq!(s.id(), "7");
        assert_eq!(s.target_positions()["LOCATION1"], 0);
        assert_eq!(s.opinions().len(), 1);
        assert_eq!(s.opinions()[0].polarity, Polarity::Positive);
    }

    #[test]
    fn rejects_record_with_absent_target() {
        let json = r#"[
            {"id": "a", "text": "LOCATION1 is far",
             "opinions": [{"target_entity": "LOCATION2", "aspect": "price", "sentiment": "Negative"}]},
            {"id": "b", "text": "LOCATION1 and LOCATION2", "opinions": []}
        ]"#;
        let out = parse_sentihood(json, Some(Split::Dev)).unwrap();
        assert_eq!(out.sentences.len(), 1);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].record, "a");
        assert_eq!(out.two_target_count(), 1);
        assert_eq!(out.sentences[0].split(), Some(Split::Dev));
    }

    #[test]
    fn unknown_sentiment_is_per_record_error() {
        let json = r#"[{"id": 1, "text": "LOCATION1",
            "opinions": [{"target_entity": "LOCATION1", "aspect": "price", "sentiment": "Meh"}]}]"#;
        let out = parse_sentihood(json, None).unwrap();
        assert!(out.sentences.is_empty());
        assert!(out.rejected[0].message.contains("Meh"));
    }

    #[test]
    fn malformed_json_is_input_error() {
        assert!(matches!(parse_sentihood("[{", None), Err(Error::Input(_))));
    }

    #[test]
    fn split_from_file_name() {
        assert_eq!(split_from_name(Path::new("x/sentihood-train.json")), Some(Split::Train));
        assert_eq!(split_from_name(Path::new("sentihood-dev.json")), Some(Split::Dev));
        assert_eq!(split_from_name(Path::new("data.json")), None);
    }
}
