//! Pre-norm decoder-only transformer over a flat `f64` parameter buffer.
//!
//! Each block is `x + attn(ln1(x))` followed by `x + mlp(ln2(x))`, the MLP
//! uses the tanh GELU approximation, and the output head is untied from the
//! token embedding. The backward pass is written by hand against the cached
//! forward activations.

use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::config::{Layout, ModelConfig, TensorSpec};
use super::LmError;
use crate::util::rng;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Weights and configuration of one micro causal LM.
#[derive(Debug, Clone)]
pub struct ModelState {
    config: ModelConfig,
    layout: Layout,
    pub(crate) params: Vec<f64>,
    pub step_count: u64,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.step_count == other.step_count
    }
}

/// Forward results: next-token logits `[T, V]` and the residual stream after
/// each block (`hidden[l]` is `[T, D]`, blocks numbered from 0 here).
#[derive(Debug, Clone, Serialize)]
pub struct ForwardOutput {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub logits: Vec<f64>,
    pub hidden: Vec<Vec<f64>>,
}

impl ForwardOutput {
    pub fn logits_row(&self, t: usize) -> &[f64] {
        &self.logits[t * self.vocab_size..(t + 1) * self.vocab_size]
    }

    /// Hidden state after block `layer` (1-based) at position `t`.
    pub fn hidden_at(&self, layer: usize, t: usize) -> &[f64] {
        &self.hidden[layer - 1][t * self.d_model..(t + 1) * self.d_model]
    }
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    att_y: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
}

pub(crate) struct Cache {
    t: usize,
    layers: Vec<LayerCache>,
    x_out: Vec<f64>,
    lnf: Vec<f64>,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

impl Cache {
    fn hidden(&self, layer: usize) -> &[f64] {
        if layer + 1 < self.layers.len() {
            &self.layers[layer + 1].x_in
        } else {
            &self.x_out
        }
    }
}

impl ModelState {
    /// Seeded initialisation: N(0, 0.02) weights, residual projections scaled
    /// by 1/sqrt(2L), unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut r = rng(config.seed);
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let proj = Normal::new(0.0, proj_std).unwrap();
        for spec in &layout.tensors {
            let name = spec.name.as_str();
            let slot = &mut params[spec.range()];
            if name.ends_with(".g") {
                slot.fill(1.0);
            } else if name.ends_with(".b") || name.ends_with("b_qkv") || name.ends_with("b_out") || name.ends_with("b_fc")
                || name.ends_with("b_proj")
            {
                slot.fill(0.0);
            } else if name.ends_with("w_out") || name.ends_with("w_proj") {
                slot.iter_mut().for_each(|p| *p = proj.sample(&mut r));
            } else {
                slot.iter_mut().for_each(|p| *p = normal.sample(&mut r));
            }
        }
        Ok(ModelState { config, layout, params, step_count: 0 })
    }

    /// Every parameter zero, including layer-norm gains: the output
    /// distribution is uniform for any input.
    pub fn zeros(config: ModelConfig) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.total];
        Ok(ModelState { config, layout, params, step_count: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensors.iter().find(|t| t.name == name).map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.tensors.iter().find(|t| t.name == name)?.range();
        Some(&mut self.params[range])
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<(), LmError> {
        if tokens.len() < 2 {
            return Err(LmError::Length { len: tokens.len(), max: self.config.max_seq_len });
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(LmError::Length { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(LmError::Vocab { id: bad, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }

    /// Runs the model on `tokens` (2 ≤ len ≤ max_seq_len).
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput, LmError> {
        self.check_tokens(tokens)?;
        let cache = self.forward_cached(tokens);
        let hidden = (0..self.config.n_layers).map(|l| cache.hidden(l).to_vec()).collect();
        Ok(ForwardOutput {
            seq_len: tokens.len(),
            vocab_size: self.config.vocab_size,
            d_model: self.config.d_model,
            logits: cache.logits,
            hidden,
        })
    }

    pub(crate) fn forward_cached(&self, tokens: &[u32]) -> Cache {
        let c = &self.config;
        let (t, d, f, v, h) = (tokens.len(), c.d_model, c.d_ff, c.vocab_size, c.n_heads);
        let p = &self.params;
        let lay = &self.layout;

        let mut x = vec![0.0; t * d];
        for (pos, &tok) in tokens.iter().enumerate() {
            let te = &p[lay.tok_emb + tok as usize * d..][..d];
            let pe = &p[lay.pos_emb + pos * d..][..d];
            for ((o, a), b) in x[pos * d..(pos + 1) * d].iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for lo in &lay.layers {
            let x_in = x;
            let mut ln1 = vec![0.0; t * d];
            let mut ln1_mean = vec![0.0; t];
            let mut ln1_rstd = vec![0.0; t];
            layernorm(&mut ln1, &mut ln1_mean, &mut ln1_rstd, &x_in, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d], t, d);
            let mut qkv = vec![0.0; t * 3 * d];
            linear(&mut qkv, &ln1, &p[lo.w_qkv..][..d * 3 * d], Some(&p[lo.b_qkv..][..3 * d]), t, d, 3 * d);
            let mut att = vec![0.0; h * t * t];
            let mut att_y = vec![0.0; t * d];
            attention(&mut att_y, &mut att, &qkv, t, d, h);
            let mut x_mid = vec![0.0; t * d];
            linear(&mut x_mid, &att_y, &p[lo.w_attn_out..][..d * d], Some(&p[lo.b_attn_out..][..d]), t, d, d);
            for (m, xi) in x_mid.iter_mut().zip(&x_in) {
                *m += xi;
            }
            let mut ln2 = vec![0.0; t * d];
            let mut ln2_mean = vec![0.0; t];
            let mut ln2_rstd = vec![0.0; t];
            layernorm(&mut ln2, &mut ln2_mean, &mut ln2_rstd, &x_mid, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d], t, d);
            let mut fc_pre = vec![0.0; t * f];
            linear(&mut fc_pre, &ln2, &p[lo.w_fc..][..d * f], Some(&p[lo.b_fc..][..f]), t, d, f);
            let fc_act: Vec<f64> = fc_pre.iter().map(|&z| gelu(z)).collect();
            let mut x_out = vec![0.0; t * d];
            linear(&mut x_out, &fc_act, &p[lo.w_proj..][..f * d], Some(&p[lo.b_proj..][..d]), t, f, d);
            for (o, m) in x_out.iter_mut().zip(&x_mid) {
                *o += m;
            }
            x = x_out;
            layers.push(LayerCache {
                x_in,
                ln1,
                ln1_mean,
                ln1_rstd,
                qkv,
                att,
                att_y,
                x_mid,
                ln2,
                ln2_mean,
                ln2_rstd,
                fc_pre,
                fc_act,
            });
        }

        let mut lnf = vec![0.0; t * d];
        let mut lnf_mean = vec![0.0; t];
        let mut lnf_rstd = vec![0.0; t];
        layernorm(&mut lnf, &mut lnf_mean, &mut lnf_rstd, &x, &p[lay.lnf_g..][..d], &p[lay.lnf_b..][..d], t, d);
        let mut logits = vec![0.0; t * v];
        linear(&mut logits, &lnf, &p[lay.w_head..][..d * v], Some(&p[lay.b_head..][..v]), t, d, v);
        Cache { t, layers, x_out: x, lnf, lnf_mean, lnf_rstd, logits }
    }

    /// Next-token negative log-likelihood summed over positions `0..T-1`,
    /// with gradients of `weight * sum` accumulated into `grads`.
    pub(crate) fn nll_and_grad(&self, tokens: &[u32], weight: f64, grads: &mut [f64]) -> f64 {
        let cache = self.forward_cached(tokens);
        let v = self.config.vocab_size;
        let t = cache.t;
        let mut dlogits = vec![0.0; t * v];
        let mut nll = 0.0;
        for pos in 0..t - 1 {
            let row = &cache.logits[pos * v..(pos + 1) * v];
            let target = tokens[pos + 1] as usize;
            let (lse, _) = log_sum_exp(row);
            nll += lse - row[target];
            let drow = &mut dlogits[pos * v..(pos + 1) * v];
            for (dz, &z) in drow.iter_mut().zip(row) {
                *dz = weight * (z - lse).exp();
            }
            drow[target] -= weight;
        }
        self.backward(&cache, tokens, &dlogits, grads);
        nll
    }

    fn backward(&self, cache: &Cache, tokens: &[u32], dlogits: &[f64], grads: &mut [f64]) {
        let c = &self.config;
        let (t, d, f, v, h) = (cache.t, c.d_model, c.d_ff, c.vocab_size, c.n_heads);
        let p = &self.params;
        let lay = &self.layout;

        let mut dlnf = vec![0.0; t * d];
        linear_backward(&mut dlnf, grads, lay.w_head, Some(lay.b_head), dlogits, &cache.lnf, p, t, d, v);
        let mut dres = vec![0.0; t * d];
        layernorm_backward(
            &mut dres, grads, lay.lnf_g, lay.lnf_b, &dlnf, &cache.x_out, &cache.lnf_mean, &cache.lnf_rstd, p, t, d,
        );

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // mlp branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
            let mut dfc_act = vec![0.0; t * f];
            linear_backward(&mut dfc_act, grads, lo.w_proj, Some(lo.b_proj), &dres, &lc.fc_act, p, t, f, d);
            let dfc_pre: Vec<f64> = dfc_act.iter().zip(&lc.fc_pre).map(|(g, &z)| g * gelu_grad(z)).collect();
            let mut dln2 = vec![0.0; t * d];
            linear_backward(&mut dln2, grads, lo.w_fc, Some(lo.b_fc), &dfc_pre, &lc.ln2, p, t, d, f);
            let mut dx_mid = dres;
            layernorm_backward(
                &mut dx_mid, grads, lo.ln2_g, lo.ln2_b, &dln2, &lc.x_mid, &lc.ln2_mean, &lc.ln2_rstd, p, t, d,
            );

            // attention branch: x_mid = x_in + out(attn(qkv(ln1(x_in))))
            let mut datt_y = vec![0.0; t * d];
            linear_backward(&mut datt_y, grads, lo.w_attn_out, Some(lo.b_attn_out), &dx_mid, &lc.att_y, p, t, d, d);
            let mut dqkv = vec![0.0; t * 3 * d];
            attention_backward(&mut dqkv, &datt_y, &lc.qkv, &lc.att, t, d, h);
            let mut dln1 = vec![0.0; t * d];
            linear_backward(&mut dln1, grads, lo.w_qkv, Some(lo.b_qkv), &dqkv, &lc.ln1, p, t, d, 3 * d);
            let mut dx_in = dx_mid;
            layernorm_backward(
                &mut dx_in, grads, lo.ln1_g, lo.ln1_b, &dln1, &lc.x_in, &lc.ln1_mean, &lc.ln1_rstd, p, t, d,
            );
            dres = dx_in;
        }

        for (pos, &tok) in tokens.iter().enumerate() {
            let g = &dres[pos * d..(pos + 1) * d];
            let te = lay.tok_emb + tok as usize * d;
            for (dst, &s) in grads[te..te + d].iter_mut().zip(g) {
                *dst += s;
            }
            let pe = lay.pos_emb + pos * d;
            for (dst, &s) in grads[pe..pe + d].iter_mut().zip(g) {
                *dst += s;
            }
        }
    }
}

/// Returns `(log Σ exp(z), max z)`.
pub(crate) fn log_sum_exp(row: &[f64]) -> (f64, f64) {
    let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&z| (z - maxv).exp()).sum();
    (maxv + s.ln(), maxv)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `out[t, :] = b + inp[t, :] · w` with `w` row-major `[k, n]`.
fn linear(out: &mut [f64], inp: &[f64], w: &[f64], b: Option<&[f64]>, t: usize, k: usize, n: usize) {
    for r in 0..t {
        let o = &mut out[r * n..(r + 1) * n];
        match b {
            Some(b) => o.copy_from_slice(b),
            None => o.fill(0.0),
        }
        for (kk, &xv) in inp[r * k..(r + 1) * k].iter().enumerate() {
            for (ov, &wv) in o.iter_mut().zip(&w[kk * n..(kk + 1) * n]) {
                *ov += xv * wv;
            }
        }
    }
}

/// Accumulates `dinp`, `dW` and `db` for [`linear`].
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    dinp: &mut [f64],
    grads: &mut [f64],
    w_off: usize,
    b_off: Option<usize>,
    dout: &[f64],
    inp: &[f64],
    params: &[f64],
    t: usize,
    k: usize,
    n: usize,
) {
    let w = &params[w_off..w_off + k * n];
    for r in 0..t {
        let dr = &dout[r * n..(r + 1) * n];
        let xr = &inp[r * k..(r + 1) * k];
        let di = &mut dinp[r * k..(r + 1) * k];
        for kk in 0..k {
            let wrow = &w[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (a, b) in dr.iter().zip(wrow) {
                acc += a * b;
            }
            di[kk] += acc;
            let xv = xr[kk];
            let gw = &mut grads[w_off + kk * n..w_off + (kk + 1) * n];
            for (g, &dv) in gw.iter_mut().zip(dr) {
                *g += xv * dv;
            }
        }
        if let Some(b_off) = b_off {
            for (g, &dv) in grads[b_off..b_off + n].iter_mut().zip(dr) {
                *g += dv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm(out: &mut [f64], mean: &mut [f64], rstd: &mut [f64], inp: &[f64], g: &[f64], b: &[f64], t: usize, d: usize) {
    for r in 0..t {
        let x = &inp[r * d..(r + 1) * d];
        let m = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        for (((o, &xv), &gv), &bv) in out[r * d..(r + 1) * d].iter_mut().zip(x).zip(g).zip(b) {
            *o = (xv - m) * s * gv + bv;
        }
        mean[r] = m;
        rstd[r] = s;
    }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    dinp: &mut [f64],
    grads: &mut [f64],
    g_off: usize,
    b_off: usize,
    dout: &[f64],
    inp: &[f64],
    mean: &[f64],
    rstd: &[f64],
    params: &[f64],
    t: usize,
    d: usize,
) {
    let g = &params[g_off..g_off + d];
    let mut norm = vec![0.0; d];
    let mut dnorm = vec![0.0; d];
    for r in 0..t {
        let x = &inp[r * d..(r + 1) * d];
        let dy = &dout[r * d..(r + 1) * d];
        for i in 0..d {
            norm[i] = (x[i] - mean[r]) * rstd[r];
            dnorm[i] = dy[i] * g[i];
        }
        for i in 0..d {
            grads[g_off + i] += dy[i] * norm[i];
            grads[b_off + i] += dy[i];
        }
        let dnorm_mean = dnorm.iter().sum::<f64>() / d as f64;
        let dnorm_norm_mean = dnorm.iter().zip(&norm).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            dinp[r * d + i] += (dnorm[i] - dnorm_mean - norm[i] * dnorm_norm_mean) * rstd[r];
        }
    }
}

/// Causal multi-head attention. `qkv` rows are `[q | k | v]`; `att` receives
/// the `[H, T, T]` probabilities (zero above the diagonal).
fn attention(out: &mut [f64], att: &mut [f64], qkv: &[f64], t: usize, d: usize, h: usize) {
    let hd = d / h;
    let scale = 1.0 / (hd as f64).sqrt();
    for head in 0..h {
        for i in 0..t {
            let q = &qkv[i * 3 * d + head * hd..][..hd];
            let row = &mut att[(head * t + i) * t..(head * t + i + 1) * t];
            let mut maxv = f64::NEG_INFINITY;
            for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                let k = &qkv[j * 3 * d + d + head * hd..][..hd];
                let s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                *slot = s;
                maxv = maxv.max(s);
            }
            let mut sum = 0.0;
            for slot in row.iter_mut().take(i + 1) {
                *slot = (*slot - maxv).exp();
                sum += *slot;
            }
            for slot in row.iter_mut().take(i + 1) {
                *slot /= sum;
            }
            let o = &mut out[i * d + head * hd..][..hd];
            o.fill(0.0);
            for (j, &pj) in row.iter().enumerate().take(i + 1) {
                let vv = &qkv[j * 3 * d + 2 * d + head * hd..][..hd];
                for (ov, &x) in o.iter_mut().zip(vv) {
                    *ov += pj * x;
                }
            }
        }
    }
}

fn attention_backward(dqkv: &mut [f64], dout: &[f64], qkv: &[f64], att: &[f64], t: usize, d: usize, h: usize) {
    let hd = d / h;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dp = vec![0.0; t];
    for head in 0..h {
        for i in 0..t {
            let row = &att[(head * t + i) * t..(head * t + i + 1) * t];
            let dy = &dout[i * d + head * hd..][..hd];
            for j in 0..=i {
                let v_off = j * 3 * d + 2 * d + head * hd;
                dp[j] = dy.iter().zip(&qkv[v_off..v_off + hd]).map(|(a, b)| a * b).sum();
                for (dv, &g) in dqkv[v_off..v_off + hd].iter_mut().zip(dy) {
                    *dv += row[j] * g;
                }
            }
            let dot: f64 = (0..=i).map(|j| row[j] * dp[j]).sum();
            let q_off = i * 3 * d + head * hd;
            for j in 0..=i {
                let ds = row[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let k_off = j * 3 * d + d + head * hd;
                for x in 0..hd {
                    dqkv[q_off + x] += ds * qkv[k_off + x];
                    dqkv[k_off + x] += ds * qkv[q_off + x];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::tokenizer::tokenize;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, max_seq_len: 16, seed: 3, ..Default::default() }
    }

    #[test]
    fn softmax_rows_normalised() {
        let m = ModelState::init(small()).unwrap();
        let out = m.forward(&tokenize("hello there")).unwrap();
        for t in 0..out.seq_len {
            let row = out.logits_row(t);
            let (lse, _) = log_sum_exp(row);
            let s: f64 = row.iter().map(|z| (z - lse).exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = ModelState::zeros(small()).unwrap();
        let out = m.forward(&tokenize("ab")).unwrap();
        assert!(out.logits.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn causal_prefix_invariance() {
        let m = ModelState::init(small()).unwrap();
        let a = m.forward(&tokenize("abcdefg")).unwrap();
        let b = m.forward(&tokenize("abcdXYZ")).unwrap();
        // positions 0..=4 see BOS + "abcd"
        for t in 0..5 {
            assert_eq!(a.logits_row(t), b.logits_row(t));
        }
        assert_ne!(a.logits_row(5), b.logits_row(5));
    }

    #[test]
    fn length_and_vocab_errors() {
        let m = ModelState::init(small()).unwrap();
        assert!(matches!(m.forward(&[0]), Err(LmError::Length { .. })));
        assert!(matches!(m.forward(&[2; 17]), Err(LmError::Length { .. })));
        assert!(matches!(m.forward(&[0, 300]), Err(LmError::Vocab { .. })));
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelState::init(small()).unwrap();
        let b = ModelState::init(small()).unwrap();
        assert_eq!(a, b);
        let c = ModelState::init(ModelConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
