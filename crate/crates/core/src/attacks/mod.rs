//! Membership-scoring attacks.
//!
//! Every attack returns a score where higher means "more likely a member".
//! Baselines score the raw sample text; only the probe renders the prompt
//! template.
//!
//! | attack          | score                                        |
//! |-----------------|----------------------------------------------|
//! | `loss`          | `-loss`                                      |
//! | `min_k`         | mean of the lowest k% token log-probs        |
//! | `neighbor`      | `mean(loss(neighbors)) - loss(sample)`       |
//! | `zlib`          | `-perplexity / zlib_entropy`                 |
//! | `lowercase`     | `-perplexity / perplexity(lowercased)`       |
//! | `smaller_model` | `-perplexity / perplexity(reference)`        |
//! | `probe`         | `σ(w·x + b)` on the templated activation     |

mod neighbors;
mod registry;
mod suite;

use std::fmt;
use std::io::Write as _;
use std::str::FromStr;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PromptTemplate, Sample};
use crate::lm::{self, LmError, ModelState};
use crate::probe::{self, ProbeError, ProbeWeights};

pub use neighbors::{generate_neighbors, DictionaryNeighbors, ModelTopK, NeighborProvider, NeighborSet};
pub use registry::{
    Attack, AttackParams, AttackRegistry, LossAttack, LowercaseAttack, MinKAttack, NeighborAttack, ProbeAttack,
    SmallerModelAttack, ZlibAttack,
};
pub use suite::{read_score_csv, run_attack_suite, ScoreCache, ScoreRecord, SuiteConfig, SuiteOutcome, SuiteRow};

/// zlib level used for the compression entropy.
pub const ZLIB_LEVEL: u32 = 6;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("attack {attack} produced non-finite score {score}")]
    NonFinite { attack: AttackKind, score: f64 },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Probe,
    Loss,
    MinK,
    Neighbor,
    Zlib,
    Lowercase,
    SmallerModel,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::Probe,
        AttackKind::Loss,
        AttackKind::MinK,
        AttackKind::Neighbor,
        AttackKind::Zlib,
        AttackKind::Lowercase,
        AttackKind::SmallerModel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Probe => "probe",
            AttackKind::Loss => "loss",
            AttackKind::MinK => "min_k",
            AttackKind::Neighbor => "neighbor",
            AttackKind::Zlib => "zlib",
            AttackKind::Lowercase => "lowercase",
            AttackKind::SmallerModel => "smaller_model",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown attack '{s}' (expected one of probe, loss, min_k, neighbor, zlib, lowercase, smaller_model)"))
    }
}

/// One membership score, oriented so that higher means member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub sample_id: String,
    pub attack: AttackKind,
    pub score: f64,
}

impl AttackScore {
    pub fn new(sample: &Sample, attack: AttackKind, score: f64) -> Result<Self, AttackError> {
        if !score.is_finite() {
            return Err(AttackError::NonFinite { attack, score });
        }
        Ok(AttackScore { sample_id: sample.id.clone(), attack, score })
    }

    pub fn higher_is_member(&self) -> bool {
        true
    }
}

pub fn loss_attack(model: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError> {
    AttackScore::new(sample, AttackKind::Loss, -lm::loss(model, &sample.text)?)
}

/// Mean of the `max(1, ⌈k/100 · n⌉)` lowest token log-probs.
pub fn min_k_prob(model: &ModelState, sample: &Sample, k_percent: f64) -> Result<AttackScore, AttackError> {
    let scores = lm::token_log_probs(model, &sample.text, None)?;
    AttackScore::new(sample, AttackKind::MinK, min_k_of(&scores.log_probs, k_percent)?)
}

pub(crate) fn min_k_of(log_probs: &[f64], k_percent: f64) -> Result<f64, AttackError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(AttackError::Precondition(format!("k = {k_percent} outside (0, 100]")));
    }
    if log_probs.is_empty() {
        return Err(AttackError::Degenerate("no scored tokens".into()));
    }
    let mut sorted = log_probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let take = ((k_percent / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[..take].iter().sum::<f64>() / take as f64)
}

pub fn neighbor_attack(model: &ModelState, sample: &Sample, neighbors: &NeighborSet) -> Result<AttackScore, AttackError> {
    if neighbors.neighbors.is_empty() {
        return Err(AttackError::Precondition("empty neighbor set".into()));
    }
    let own = lm::loss(model, &sample.text)?;
    let mut total = 0.0;
    for n in &neighbors.neighbors {
        total += lm::loss(model, n)?;
    }
    AttackScore::new(sample, AttackKind::Neighbor, total / neighbors.neighbors.len() as f64 - own)
}

/// Bits in the zlib-compressed UTF-8 text at the default level.
pub fn zlib_entropy(text: &str) -> f64 {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(ZLIB_LEVEL));
    enc.write_all(text.as_bytes()).expect("in-memory write");
    8.0 * enc.finish().expect("in-memory write").len() as f64
}

pub fn zlib_attack(model: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError> {
    let ppl = lm::perplexity(model, &sample.text)?;
    AttackScore::new(sample, AttackKind::Zlib, -ppl / zlib_entropy(&sample.text))
}

/// Per-character simple lowercase mapping (no context-dependent rules).
pub fn simple_lowercase(text: &str) -> String {
    text.chars().map(|c| c.to_lowercase().next().unwrap_or(c)).collect()
}

pub fn lowercase_attack(model: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError> {
    let lowered = simple_lowercase(&sample.text);
    let ppl = lm::perplexity(model, &sample.text)?;
    AttackScore::new(sample, AttackKind::Lowercase, -ppl / lm::perplexity(model, &lowered)?)
}

pub fn smaller_model_attack(
    target: &ModelState,
    reference: &ModelState,
    sample: &Sample,
) -> Result<AttackScore, AttackError> {
    let ppl = lm::perplexity(target, &sample.text)?;
    AttackScore::new(sample, AttackKind::SmallerModel, -ppl / lm::perplexity(reference, &sample.text)?)
}

pub fn probe_attack(
    target: &ModelState,
    probe: &ProbeWeights,
    template: &PromptTemplate,
    sample: &Sample,
) -> Result<AttackScore, AttackError> {
    let act = lm::extract_sample_activation(target, sample, template, probe.layer)?;
    AttackScore::new(sample, AttackKind::Probe, probe::score(probe, &act)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, max_seq_len: 64, seed: 4, ..Default::default() }
    }

    fn s(text: &str) -> Sample {
        Sample::from_text(text, None).unwrap()
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in AttackKind::ALL {
            assert_eq!(k.as_str().parse::<AttackKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert!("bogus".parse::<AttackKind>().is_err());
    }

    #[test]
    fn min_k_arithmetic() {
        assert_eq!(min_k_of(&[-1.0, -2.0, -3.0, -4.0], 50.0).unwrap(), -3.5);
        assert_eq!(min_k_of(&[-0.7], 5.0).unwrap(), -0.7);
        assert!(min_k_of(&[], 20.0).is_err());
        assert!(min_k_of(&[-1.0], 0.0).is_err());
        assert!(min_k_of(&[-1.0], 101.0).is_err());
    }

    #[test]
    fn zero_model_loss_score() {
        let m = ModelState::zeros(cfg()).unwrap();
        let sc = loss_attack(&m, &s("any text")).unwrap();
        assert!((sc.score + (258f64).ln()).abs() < 1e-12);
        assert_eq!(sc.attack, AttackKind::Loss);
    }

    #[test]
    fn identities() {
        let m = ModelState::init(cfg()).unwrap();
        let x = s("all lower case here");
        assert_eq!(lowercase_attack(&m, &x).unwrap().score, -1.0);
        assert_eq!(smaller_model_attack(&m, &m, &x).unwrap().score, -1.0);
        let k100 = min_k_prob(&m, &x, 100.0).unwrap().score;
        assert!((k100 - loss_attack(&m, &x).unwrap().score).abs() < 1e-9);
        let own = NeighborSet { original_id: x.id.clone(), neighbors: vec![x.text.clone(); 3], generator_seed: 0 };
        assert_eq!(neighbor_attack(&m, &x, &own).unwrap().score, 0.0);
        let empty = NeighborSet { neighbors: vec![], ..own };
        assert!(matches!(neighbor_attack(&m, &x, &empty), Err(AttackError::Precondition(_))));
    }

    #[test]
    fn zero_probe_is_half() {
        let m = ModelState::init(cfg()).unwrap();
        let p = ProbeWeights::zeros(8, 1);
        let sc = probe_attack(&m, &p, &PromptTemplate::default_statement(), &s("abc")).unwrap();
        assert_eq!(sc.score, 0.5);
    }

    #[test]
    fn simple_lowercase_is_per_char() {
        assert_eq!(simple_lowercase("ABC Été"), "abc été");
        // context-free: final sigma stays σ
        assert_eq!(simple_lowercase("ΟΔΟΣ"), "οδοσ");
        // U+0130 maps to a single 'i' under the simple mapping
        assert_eq!(simple_lowercase("\u{130}"), "i");
    }

    #[test]
    fn zlib_monotone_in_perplexity() {
        let e = zlib_entropy("some sentence");
        assert!(-2.0 / e < -1.0 / e);
        assert!(zlib_entropy(&"a".repeat(128)) < zlib_entropy("the quick brown fox jumps over the lazy dog"));
    }
}
