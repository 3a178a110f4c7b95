use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::ModelState;
use super::tokenizer::tokenize;
use super::{truncate_tokens, LmError, ModelConfig};
use crate::corpus::{PromptTemplate, Sample};
use crate::util::rng;

/// Optimiser and schedule settings for next-token training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Optional cap on training sequence length, at most the model's.
    pub max_seq_len: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Record the batch loss every `log_every` steps (and at the last step).
    pub log_every: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { steps: 300, batch_size: 16, lr: 3e-3, seed: 0, max_seq_len: None, grad_clip: Some(1.0), log_every: 1 }
    }
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
}

/// Mean next-token loss over every predicted position in `batch`, with the
/// gradient written into `grads` (overwritten).
pub fn batch_loss_and_grad(model: &ModelState, batch: &[&[u32]], grads: &mut [f64]) -> f64 {
    grads.fill(0.0);
    let positions: usize = batch.iter().map(|s| s.len() - 1).sum();
    let w = 1.0 / positions as f64;
    let mut nll = 0.0;
    for seq in batch {
        nll += model.nll_and_grad(seq, w, grads);
    }
    nll * w
}

fn clip(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

fn prepare(model: &ModelState, texts: &[String], cap: Option<usize>) -> Result<Vec<Vec<u32>>, LmError> {
    let max = cap.map_or(model.config().max_seq_len, |c| c.min(model.config().max_seq_len));
    if max < 2 {
        return Err(LmError::Config("training max_seq_len must be at least 2".into()));
    }
    Ok(texts.iter().map(|t| truncate_tokens(tokenize(t), max).0).collect())
}

fn optimise(
    model: &mut ModelState,
    seqs: &[Vec<u32>],
    hyper: &TrainHyper,
    log: &mut Vec<StepLoss>,
) -> Result<(), LmError> {
    let mut opt = Adam::new(model.num_params());
    let mut grads = vec![0.0; model.num_params()];
    let mut r = rng(hyper.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let bs = hyper.batch_size.max(1).min(seqs.len());
    for step in 0..hyper.steps {
        let mut batch: Vec<&[u32]> = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            batch.push(&seqs[order[cursor]]);
            cursor += 1;
        }
        let loss = batch_loss_and_grad(model, &batch, &mut grads);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(LmError::Divergence { step });
        }
        if hyper.log_every > 0 && (step % hyper.log_every == 0 || step + 1 == hyper.steps) {
            log.push(StepLoss { step, loss });
        }
        if let Some(c) = hyper.grad_clip {
            clip(&mut grads, c);
        }
        opt.step(&mut model.params, &grads, hyper.lr);
        model.step_count += 1;
        if !model.is_finite() {
            return Err(LmError::Divergence { step });
        }
    }
    Ok(())
}

/// Trains a fresh model from its seeded initialisation.
pub fn pretrain(config: ModelConfig, corpus: &[String], hyper: &TrainHyper) -> Result<ModelState, LmError> {
    pretrain_logged(config, corpus, hyper).map(|(m, _)| m)
}

/// [`pretrain`] that also returns the per-step loss log.
pub fn pretrain_logged(
    config: ModelConfig,
    corpus: &[String],
    hyper: &TrainHyper,
) -> Result<(ModelState, Vec<StepLoss>), LmError> {
    if corpus.is_empty() {
        return Err(LmError::Precondition("pretraining corpus is empty".into()));
    }
    let mut model = ModelState::init(config)?;
    let seqs = prepare(&model, corpus, hyper.max_seq_len)?;
    let mut log = Vec::new();
    optimise(&mut model, &seqs, hyper, &mut log)?;
    Ok((model, log))
}

/// Member-injection schedule: every member in one batch for a fixed number
/// of epochs (one optimiser step per epoch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyHyper {
    pub lr: f64,
    pub epochs: usize,
    pub grad_clip: Option<f64>,
}

impl Default for ProxyHyper {
    fn default() -> Self {
        ProxyHyper { lr: 1e-3, epochs: 2, grad_clip: Some(1.0) }
    }
}

/// Fine-tunes a copy of `model` on the templated member texts (one batch,
/// two epochs). The loss covers every token of the rendered prompt.
pub fn train_proxy(
    model: &ModelState,
    members: &[Sample],
    template: &PromptTemplate,
    lr: f64,
) -> Result<ModelState, LmError> {
    train_proxy_with(model, members, template, &ProxyHyper { lr, ..ProxyHyper::default() })
}

pub fn train_proxy_with(
    model: &ModelState,
    members: &[Sample],
    template: &PromptTemplate,
    hyper: &ProxyHyper,
) -> Result<ModelState, LmError> {
    if members.is_empty() {
        return Err(LmError::Precondition("member set is empty".into()));
    }
    let texts: Vec<String> = members.iter().map(|s| template.render_text(&s.text)).collect();
    let mut proxy = model.clone();
    let seqs = prepare(&proxy, &texts, None)?;
    let batch: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let mut opt = Adam::new(proxy.num_params());
    let mut grads = vec![0.0; proxy.num_params()];
    for epoch in 0..hyper.epochs {
        let loss = batch_loss_and_grad(&proxy, &batch, &mut grads);
        if !loss.is_finite() {
            return Err(LmError::Divergence { step: epoch });
        }
        if let Some(c) = hyper.grad_clip {
            clip(&mut grads, c);
        }
        opt.step(&mut proxy.params, &grads, hyper.lr);
        proxy.step_count += 1;
        if !proxy.is_finite() {
            return Err(LmError::Divergence { step: epoch });
        }
    }
    Ok(proxy)
}
