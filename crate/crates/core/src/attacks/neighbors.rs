//! Neighbor generation for the neighborhood-comparison attack.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::corpus::Sample;
use crate::lm::tokenizer::{byte_of, token_of, tokenize};
use crate::lm::ModelState;
use crate::util::rng;

/// Perturbed copies of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub original_id: String,
    pub neighbors: Vec<String>,
    pub generator_seed: u64,
}

/// Source of neighbor texts. Each neighbor must differ from the original in
/// a single unit (token, word) the provider documents.
pub trait NeighborProvider: Send + Sync {
    /// Stable identifier, part of the score cache key.
    fn name(&self) -> String;

    fn generate(&self, model: &ModelState, sample: &Sample, count: usize, seed: u64)
        -> Result<NeighborSet, AttackError>;
}

/// Single-byte replacements proposed by the model itself.
///
/// A position is drawn uniformly among the printable-ASCII bytes of the text
/// (within the model context), and the replacement uniformly among the
/// `top_k` printable-ASCII tokens the model ranks highest after the prefix,
/// minus the original byte. Restricting both sides to ASCII keeps every
/// neighbor valid UTF-8.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTopK {
    pub top_k: usize,
}

impl Default for ModelTopK {
    fn default() -> Self {
        ModelTopK { top_k: 10 }
    }
}

fn printable(b: u8) -> bool {
    (0x20..=0x7e).contains(&b)
}

impl NeighborProvider for ModelTopK {
    fn name(&self) -> String {
        format!("model-top{}", self.top_k)
    }

    fn generate(&self, model: &ModelState, sample: &Sample, count: usize, seed: u64) -> Result<NeighborSet, AttackError> {
        if count == 0 {
            return Err(AttackError::Precondition("neighbor count must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(AttackError::Precondition("top_k must be positive".into()));
        }
        let mut ids = tokenize(&sample.text);
        ids.truncate(model.config().max_seq_len);
        let positions: Vec<usize> =
            (1..ids.len()).filter(|&p| byte_of(ids[p]).is_some_and(printable)).collect();
        if positions.is_empty() {
            return Err(AttackError::Degenerate(format!("sample {} has no replaceable position", sample.id)));
        }
        let out = model.forward(&ids)?;
        let mut candidates: Vec<Option<Vec<u8>>> = vec![None; ids.len()];
        let mut r = rng(seed);
        let bytes = sample.text.as_bytes();
        let mut neighbors = Vec::with_capacity(count);
        for _ in 0..count {
            let p = *positions.choose(&mut r).expect("non-empty");
            let cands = candidates[p].get_or_insert_with(|| {
                let row = out.logits_row(p - 1);
                let mut ranked: Vec<u8> = (0x20u8..=0x7e).collect();
                ranked.sort_by(|a, b| row[token_of(*b) as usize].total_cmp(&row[token_of(*a) as usize]).then(a.cmp(b)));
                ranked.truncate(self.top_k);
                let orig = byte_of(ids[p]).expect("byte position");
                ranked.retain(|&b| b != orig);
                ranked
            });
            if cands.is_empty() {
                return Err(AttackError::Degenerate("no replacement candidates".into()));
            }
            let replacement = cands[r.random_range(0..cands.len())];
            let mut v = bytes.to_vec();
            v[p - 1] = replacement;
            neighbors.push(String::from_utf8(v).expect("ASCII-for-ASCII replacement keeps UTF-8"));
        }
        Ok(NeighborSet { original_id: sample.id.clone(), neighbors, generator_seed: seed })
    }
}

/// One-word replacements from a fixed word list. Words are maximal runs of
/// non-whitespace; the replacement differs from the replaced word.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryNeighbors {
    pub words: Vec<String>,
}

impl NeighborProvider for DictionaryNeighbors {
    fn name(&self) -> String {
        let joined = self.words.join("\n");
        format!("dictionary-{}", &crate::util::sha256_hex(joined.as_bytes())[..12])
    }

    fn generate(&self, _model: &ModelState, sample: &Sample, count: usize, seed: u64) -> Result<NeighborSet, AttackError> {
        if count == 0 {
            return Err(AttackError::Precondition("neighbor count must be positive".into()));
        }
        let text = &sample.text;
        let mut spans = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    spans.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push((s, text.len()));
        }
        if spans.is_empty() {
            return Err(AttackError::Degenerate(format!("sample {} has no words", sample.id)));
        }
        let mut r = rng(seed);
        let mut neighbors = Vec::with_capacity(count);
        for _ in 0..count {
            let &(s, e) = spans.choose(&mut r).expect("non-empty");
            let original = &text[s..e];
            let options: Vec<&String> = self.words.iter().filter(|w| w.as_str() != original && !w.is_empty()).collect();
            let Some(word) = options.choose(&mut r) else {
                return Err(AttackError::Degenerate("dictionary has no alternative word".into()));
            };
            neighbors.push(format!("{}{}{}", &text[..s], word, &text[e..]));
        }
        Ok(NeighborSet { original_id: sample.id.clone(), neighbors, generator_seed: seed })
    }
}

/// `count` model-proposed single-token neighbors (see [`ModelTopK`]).
pub fn generate_neighbors(model: &ModelState, sample: &Sample, count: usize, seed: u64) -> Result<NeighborSet, AttackError> {
    ModelTopK::default().generate(model, sample, count, seed)
}
