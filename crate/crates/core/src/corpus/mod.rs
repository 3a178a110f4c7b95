//! Datasets of text samples with optional membership labels.
//!
//! The only on-disk format is JSONL: one object per line with a required
//! `text` string, an optional `label` (0 or 1) and an optional `id`. Samples
//! without an id get one derived from a hash of their text so that seeded
//! splits are reproducible across runs.

mod split;
mod synth;
mod template;
pub mod toy;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::sha256_hex;

pub use split::{split_half, split_val_test};
pub use synth::{parse_synthesis_response, render_synthesis_prompt, sample_exemplars, ParsedSynthesis, SYNTHESIS_EXAMPLES};
pub use template::{render_template, PromptTemplate, TemplateRegistry, PLACEHOLDER};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("sample text is empty after trimming (id {id:?})")]
    EmptyText { id: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("expected exactly {expected} examples, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("count must be positive")]
    ZeroCount,
}

/// Membership label: 1 = member (seen in training), 0 = non-member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NonMember,
    Member,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::NonMember => 0,
            Label::Member => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::NonMember),
            1 => Some(Label::Member),
            _ => None,
        }
    }

    pub fn is_member(self) -> bool {
        self == Label::Member
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {v}")))
    }
}

/// A text with an optional membership label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Option<Label>) -> Result<Self, CorpusError> {
        let id = id.into();
        let text = text.into();
        if text.trim().is_empty() {
            return Err(CorpusError::EmptyText { id });
        }
        Ok(Sample { id, text, label })
    }

    /// Builds a sample whose id is a hash of its text.
    pub fn from_text(text: impl Into<String>, label: Option<Label>) -> Result<Self, CorpusError> {
        let text = text.into();
        let id = content_id(&text);
        Sample::new(id, text, label)
    }

    pub fn with_label(&self, label: Option<Label>) -> Sample {
        Sample { label, ..self.clone() }
    }
}

/// Content-derived identifier: the first 16 hex digits of SHA-256(text).
pub fn content_id(text: &str) -> String {
    sha256_hex(text.as_bytes())[..16].to_string()
}

/// An ordered collection of samples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    name: String,
    samples: Vec<Sample>,
    metadata: BTreeMap<String, String>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.text.trim().is_empty() {
                return Err(CorpusError::EmptyText { id: s.id.clone() });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
        }
        let metadata = compute_metadata(&samples);
        Ok(LabeledDataset { name: name.into(), samples, metadata })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        LabeledDataset::new(name, Vec::new()).expect("empty dataset is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn member_count(&self) -> usize {
        self.samples.iter().filter(|s| s.label == Some(Label::Member)).count()
    }

    pub fn non_member_count(&self) -> usize {
        self.samples.iter().filter(|s| s.label == Some(Label::NonMember)).count()
    }

    pub fn members(&self) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.label == Some(Label::Member)).cloned().collect()
    }

    pub fn non_members(&self) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.label == Some(Label::NonMember)).cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Takes the first `n` samples (stable prefix).
    pub fn truncated(&self, n: usize) -> LabeledDataset {
        let samples = self.samples.iter().take(n).cloned().collect();
        LabeledDataset::new(self.name.clone(), samples).expect("prefix of a valid dataset is valid")
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io_err)?;
        Ok(())
    }
}

fn compute_metadata(samples: &[Sample]) -> BTreeMap<String, String> {
    let members = samples.iter().filter(|s| s.label == Some(Label::Member)).count();
    let non_members = samples.iter().filter(|s| s.label == Some(Label::NonMember)).count();
    // Byte-level tokenizer: one token per byte, specials excluded.
    let avg_tokens = if samples.is_empty() {
        0.0
    } else {
        samples.iter().map(|s| s.text.len()).sum::<usize>() as f64 / samples.len() as f64
    };
    let mut m = BTreeMap::new();
    m.insert("avg_tokens".to_string(), format!("{avg_tokens:.1}"));
    m.insert("members".to_string(), members.to_string());
    m.insert("non_members".to_string(), non_members.to_string());
    m.insert("total".to_string(), samples.len().to_string());
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Jsonl,
}

/// Loads a dataset from disk, preserving file order.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LabeledDataset, CorpusError> {
    let DatasetFormat::Jsonl = format;
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_jsonl(&name, &raw)
}

/// Parses JSONL text into a dataset. Blank lines are skipped.
pub fn parse_jsonl(name: &str, raw: &str) -> Result<LabeledDataset, CorpusError> {
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
        let obj = value
            .as_object()
            .ok_or_else(|| CorpusError::Schema { line: line_no, message: "expected a JSON object".into() })?;
        let text = match obj.get("text") {
            Some(serde_json::Value::String(t)) => t.clone(),
            Some(_) => return Err(CorpusError::Schema { line: line_no, message: "`text` must be a string".into() }),
            None => return Err(CorpusError::Schema { line: line_no, message: "missing `text` field".into() }),
        };
        let label = match obj.get("label") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => {
                let n = v.as_u64().and_then(|n| u8::try_from(n).ok()).and_then(Label::from_u8);
                match n {
                    Some(l) => Some(l),
                    None => {
                        return Err(CorpusError::Schema { line: line_no, message: format!("`label` must be 0 or 1, got {v}") })
                    }
                }
            }
        };
        let id = match obj.get("id") {
            None | Some(serde_json::Value::Null) => {
                // Identical texts would collide; suffix the repeat with its line.
                let base = content_id(&text);
                if ids.contains(&base) {
                    format!("{base}-{line_no}")
                } else {
                    base
                }
            }
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(_) => return Err(CorpusError::Schema { line: line_no, message: "`id` must be a string".into() }),
        };
        if text.trim().is_empty() {
            return Err(CorpusError::Schema { line: line_no, message: "`text` is empty".into() });
        }
        if !ids.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        samples.push(Sample { id, text, label });
    }
    LabeledDataset::new(name, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_export_counts() {
        let mut raw = String::new();
        for i in 0..2000 {
            raw.push_str(&format!("{{\"text\":\"abstract number {i}\",\"label\":{}}}\n", i % 2));
        }
        let ds = parse_jsonl("arxiv", &raw).unwrap();
        assert_eq!(ds.len(), 2000);
        assert_eq!(ds.member_count(), 1000);
        assert_eq!(ds.non_member_count(), 1000);
        assert_eq!(ds.metadata()["members"], "1000");
        assert_eq!(ds.metadata()["non_members"], "1000");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = parse_jsonl("e", "").unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.metadata()["members"], "0");
        assert_eq!(ds.metadata()["non_members"], "0");
    }

    #[test]
    fn label_out_of_domain_is_schema_error() {
        let err = parse_jsonl("x", "{\"text\":\"x\",\"label\":2}\n").unwrap_err();
        assert!(matches!(err, CorpusError::Schema { line: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = parse_jsonl("x", "{\"text\":\"ok\"}\n{not json\n").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_text_is_schema_error() {
        let err = parse_jsonl("x", "{\"label\":1}\n").unwrap_err();
        assert!(matches!(err, CorpusError::Schema { line: 1, .. }));
    }

    #[test]
    fn ids_default_to_content_hash() {
        let ds = parse_jsonl("x", "{\"text\":\"same\"}\n{\"text\":\"same\"}\n{\"text\":\"other\",\"id\":\"k\"}\n").unwrap();
        assert_eq!(ds.samples()[0].id, content_id("same"));
        assert_eq!(ds.samples()[1].id, format!("{}-2", content_id("same")));
        assert_eq!(ds.samples()[2].id, "k");
    }

    #[test]
    fn blank_text_rejected() {
        assert!(matches!(Sample::from_text("   \n", None), Err(CorpusError::EmptyText { .. })));
        assert!(parse_jsonl("x", "{\"text\":\"  \"}\n").is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = Sample::new("a", "one", None).unwrap();
        let b = Sample::new("a", "two", None).unwrap();
        assert!(matches!(LabeledDataset::new("d", vec![a, b]), Err(CorpusError::DuplicateId(_))));
    }
}
