//! Micro causal language model: tokenizer, transformer, training and the
//! scoring primitives the attacks are built on.

mod checkpoint;
mod config;
mod model;
pub mod tokenizer;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PromptTemplate, Sample};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, TensorSpec};
pub use model::{ForwardOutput, ModelState};
pub use tokenizer::{decode, tokenize};
pub use train::{
    batch_loss_and_grad, pretrain, pretrain_logged, train_proxy, train_proxy_with, Adam, ProxyHyper, StepLoss,
    TrainHyper,
};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} outside [2, {max}]")]
    Length { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    Vocab { id: u32, vocab_size: usize },
    #[error("layer {layer} outside [1, {n_layers}]")]
    LayerRange { layer: usize, n_layers: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("training diverged (non-finite loss) at step {step}")]
    Divergence { step: usize },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Keeps the first `max` tokens. Returns whether anything was dropped.
pub(crate) fn truncate_tokens(mut ids: Vec<u32>, max: usize) -> (Vec<u32>, bool) {
    let cut = ids.len() > max;
    ids.truncate(max);
    (ids, cut)
}

/// Per-token next-token log-probabilities of one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    /// The scored sequence, `[BOS] ++ bytes ++ [EOS]` after truncation.
    pub token_ids: Vec<u32>,
    /// `log_probs[i] = log p(token_ids[i + 1] | token_ids[..=i])`.
    pub log_probs: Vec<f64>,
    /// Set when the sequence was cut to the model's `max_seq_len`.
    pub truncated: bool,
}

impl TokenScores {
    pub fn mean_log_prob(&self) -> f64 {
        self.log_probs.iter().sum::<f64>() / self.log_probs.len() as f64
    }
}

fn prepare_tokens(model: &ModelState, text: &str, template: Option<&PromptTemplate>) -> (Vec<u32>, bool) {
    let rendered;
    let text = match template {
        Some(t) => {
            rendered = t.render_text(text);
            rendered.as_str()
        }
        None => text,
    };
    truncate_tokens(tokenize(text), model.config().max_seq_len)
}

/// Scores every next-token prediction of `text` (optionally templated).
/// Over-length input is cut to the first `max_seq_len` tokens and flagged.
pub fn token_log_probs(
    model: &ModelState,
    text: &str,
    template: Option<&PromptTemplate>,
) -> Result<TokenScores, LmError> {
    let (ids, truncated) = prepare_tokens(model, text, template);
    let out = model.forward(&ids)?;
    let log_probs = (0..ids.len() - 1)
        .map(|t| {
            let row = out.logits_row(t);
            let (lse, _) = model::log_sum_exp(row);
            (row[ids[t + 1] as usize] - lse).min(0.0)
        })
        .collect();
    Ok(TokenScores { token_ids: ids, log_probs, truncated })
}

/// Mean next-token negative log-likelihood of the raw text.
pub fn loss(model: &ModelState, text: &str) -> Result<f64, LmError> {
    Ok(-token_log_probs(model, text, None)?.mean_log_prob())
}

pub fn perplexity(model: &ModelState, text: &str) -> Result<f64, LmError> {
    loss(model, text).map(f64::exp)
}

/// Hidden state of one position at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationVector {
    pub values: Vec<f64>,
    /// 1-based block index the state was read after.
    pub layer: usize,
    pub source_sample_id: String,
}

impl ActivationVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn check_layer(model: &ModelState, layer: usize) -> Result<(), LmError> {
    let n_layers = model.config().n_layers;
    if layer == 0 || layer > n_layers {
        return Err(LmError::LayerRange { layer, n_layers });
    }
    Ok(())
}

/// Renders the template, runs the model and returns the residual stream after
/// block `layer` at the final position of the tokenized prompt.
pub fn extract_activation(
    model: &ModelState,
    text: &str,
    template: &PromptTemplate,
    layer: usize,
) -> Result<ActivationVector, LmError> {
    check_layer(model, layer)?;
    let (ids, _) = prepare_tokens(model, text, Some(template));
    let out = model.forward(&ids)?;
    Ok(ActivationVector { values: out.hidden_at(layer, ids.len() - 1).to_vec(), layer, source_sample_id: String::new() })
}

/// [`extract_activation`] tagged with the sample id.
pub fn extract_sample_activation(
    model: &ModelState,
    sample: &Sample,
    template: &PromptTemplate,
    layer: usize,
) -> Result<ActivationVector, LmError> {
    let mut a = extract_activation(model, &sample.text, template, layer)?;
    a.source_sample_id = sample.id.clone();
    Ok(a)
}

/// Final-position activations at every layer from one forward pass;
/// element `l - 1` holds layer `l`.
pub fn extract_all_layers(
    model: &ModelState,
    sample: &Sample,
    template: &PromptTemplate,
) -> Result<Vec<ActivationVector>, LmError> {
    let (ids, _) = prepare_tokens(model, &sample.text, Some(template));
    let out = model.forward(&ids)?;
    Ok((1..=model.config().n_layers)
        .map(|layer| ActivationVector {
            values: out.hidden_at(layer, ids.len() - 1).to_vec(),
            layer,
            source_sample_id: sample.id.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, max_seq_len: 64, seed: 9, ..Default::default() }
    }

    #[test]
    fn zero_model_uniform_scores() {
        let m = ModelState::zeros(cfg()).unwrap();
        let s = token_log_probs(&m, "ab", None).unwrap();
        assert_eq!(s.log_probs.len(), 3);
        for lp in s.log_probs {
            assert!((lp + (258f64).ln()).abs() < 1e-12);
        }
        assert!((loss(&m, "ab").unwrap() - (258f64).ln()).abs() < 1e-12);
        assert!((perplexity(&m, "hello").unwrap() - 258.0).abs() < 1e-9);
    }

    #[test]
    fn scores_are_log_probabilities() {
        let m = ModelState::init(cfg()).unwrap();
        let s = token_log_probs(&m, "Some text here.", None).unwrap();
        assert!(s.log_probs.iter().all(|&x| x <= 0.0));
        assert_eq!(s.log_probs.len(), s.token_ids.len() - 1);
        let l = loss(&m, "Some text here.").unwrap();
        assert!(l >= 0.0);
        assert!((perplexity(&m, "Some text here.").unwrap() - l.exp()).abs() <= 1e-12 * l.exp());
    }

    #[test]
    fn overlength_truncates_with_flag() {
        let m = ModelState::init(cfg()).unwrap();
        let long = "x".repeat(200);
        let s = token_log_probs(&m, &long, None).unwrap();
        assert!(s.truncated);
        assert_eq!(s.token_ids.len(), 64);
        assert!(!token_log_probs(&m, "short", None).unwrap().truncated);
    }

    #[test]
    fn activation_shape_and_range() {
        let m = ModelState::init(cfg()).unwrap();
        let t = PromptTemplate::default_statement();
        let a = extract_activation(&m, "abc", &t, 1).unwrap();
        assert_eq!(a.dim(), 8);
        assert!(matches!(extract_activation(&m, "abc", &t, 0), Err(LmError::LayerRange { .. })));
        assert!(matches!(extract_activation(&m, "abc", &t, 3), Err(LmError::LayerRange { .. })));
    }

    #[test]
    fn activation_deterministic_and_matches_all_layers() {
        let m = ModelState::init(cfg()).unwrap();
        let t = PromptTemplate::default_statement();
        let s = Sample::from_text("same text", None).unwrap();
        let a = extract_sample_activation(&m, &s, &t, 2).unwrap();
        let b = extract_sample_activation(&m, &s, &t, 2).unwrap();
        assert_eq!(a.values, b.values);
        let all = extract_all_layers(&m, &s, &t).unwrap();
        assert_eq!(all[1], a);
    }
}
