//! Linear membership probe `σ(w·x + b)` fitted by L2-regularised logistic
//! regression.
//!
//! The objective is the mean binary cross-entropy plus `λ‖w‖²` (the bias is
//! not penalised). It is minimised by full-batch gradient descent with an
//! Armijo backtracking line search until the gradient ∞-norm drops below
//! `tol` or `max_iter` iterations have run.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::lm::ActivationVector;
use crate::util::rng;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("need at least 2 examples of each class, got {members} member(s) and {non_members} non-member(s)")]
    Class { members: usize, non_members: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("invalid probe hyperparameters: {0}")]
    Hyper(String),
    #[error("probe artifact error: {0}")]
    Artifact(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeHyper {
    /// L2 penalty on `w`.
    pub lambda: f64,
    pub max_iter: usize,
    /// Convergence tolerance on the gradient ∞-norm.
    pub tol: f64,
    /// Train a bias term; `false` gives the bias-free form `σ(w·x)`.
    pub fit_bias: bool,
    /// Standardise each dimension with training-set mean and std.
    pub standardize: bool,
    /// Random N(0, init_scale²) initial weights; zeros when `None`.
    pub init_seed: Option<u64>,
    pub init_scale: f64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        ProbeHyper {
            lambda: 1e-3,
            max_iter: 10_000,
            tol: 1e-6,
            fit_bias: true,
            standardize: false,
            init_seed: None,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    fn fit(xs: &[&[f64]]) -> Standardizer {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(*x) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in std.iter_mut().zip(*x).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = std.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, std }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// A trained probe and its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeWeights {
    pub w: Vec<f64>,
    pub bias: f64,
    /// Layer the training activations were read from.
    pub layer: usize,
    pub trained_on: String,
    pub hyper: ProbeHyper,
    #[serde(default)]
    pub standardizer: Option<Standardizer>,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub converged: bool,
}

impl ProbeWeights {
    /// All-zero probe (scores 0.5 everywhere).
    pub fn zeros(dim: usize, layer: usize) -> ProbeWeights {
        ProbeWeights {
            w: vec![0.0; dim],
            bias: 0.0,
            layer,
            trained_on: String::new(),
            hyper: ProbeHyper::default(),
            standardizer: None,
            iterations: 0,
            converged: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| ProbeError::Artifact(e.to_string()))?;
        fs::write(path, json).map_err(|e| ProbeError::Artifact(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<ProbeWeights, ProbeError> {
        let raw = fs::read_to_string(path).map_err(|e| ProbeError::Artifact(format!("{}: {e}", path.display())))?;
        let p: ProbeWeights = serde_json::from_str(&raw).map_err(|e| ProbeError::Artifact(e.to_string()))?;
        if p.w.iter().any(|v| !v.is_finite()) || !p.bias.is_finite() {
            return Err(ProbeError::Artifact("non-finite weights".into()));
        }
        Ok(p)
    }
}

/// Classification threshold γ ∈ [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionThreshold(f64);

impl DetectionThreshold {
    pub fn new(gamma: f64) -> Result<Self, ProbeError> {
        if (0.0..=1.0).contains(&gamma) {
            Ok(DetectionThreshold(gamma))
        } else {
            Err(ProbeError::Threshold(gamma))
        }
    }

    pub fn gamma(self) -> f64 {
        self.0
    }
}

impl Default for DetectionThreshold {
    fn default() -> Self {
        DetectionThreshold(0.5)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Problem<'a> {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    hyper: &'a ProbeHyper,
}

impl Problem<'_> {
    fn objective(&self, w: &[f64], b: f64) -> f64 {
        let n = self.xs.len() as f64;
        let data: f64 = self
            .xs
            .iter()
            .zip(&self.ys)
            .map(|(x, y)| {
                let z = dot(w, x) + b;
                softplus(z) - y * z
            })
            .sum::<f64>()
            / n;
        data + self.hyper.lambda * dot(w, w)
    }

    fn gradient(&self, w: &[f64], b: f64, gw: &mut [f64]) -> f64 {
        let n = self.xs.len() as f64;
        gw.iter_mut().zip(w).for_each(|(g, wi)| *g = 2.0 * self.hyper.lambda * wi);
        let mut gb = 0.0;
        for (x, y) in self.xs.iter().zip(&self.ys) {
            let r = (sigmoid(dot(w, x) + b) - y) / n;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += r * xi;
            }
            gb += r;
        }
        if self.hyper.fit_bias {
            gb
        } else {
            0.0
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits a probe on labelled activations.
pub fn train_probe(data: &[(ActivationVector, Label)], hyper: &ProbeHyper) -> Result<ProbeWeights, ProbeError> {
    train_probe_traced(data, hyper, "").map(|(p, _)| p)
}

/// [`train_probe`] that records the objective after every iteration and tags
/// the probe with a dataset name.
pub fn train_probe_traced(
    data: &[(ActivationVector, Label)],
    hyper: &ProbeHyper,
    dataset_name: &str,
) -> Result<(ProbeWeights, Vec<f64>), ProbeError> {
    let members = data.iter().filter(|(_, l)| l.is_member()).count();
    let non_members = data.len() - members;
    if members < 2 || non_members < 2 {
        return Err(ProbeError::Class { members, non_members });
    }
    if hyper.lambda.is_nan() || hyper.lambda < 0.0 || hyper.tol.is_nan() || hyper.tol <= 0.0 {
        return Err(ProbeError::Hyper("lambda must be ≥ 0 and tol > 0".into()));
    }
    let dim = data[0].0.dim();
    let layer = data[0].0.layer;
    if dim == 0 {
        return Err(ProbeError::Shape("activations are empty".into()));
    }
    for (a, _) in data {
        if a.dim() != dim {
            return Err(ProbeError::Shape(format!("mixed activation lengths {dim} and {}", a.dim())));
        }
        if a.layer != layer {
            return Err(ProbeError::Shape(format!("mixed layers {layer} and {}", a.layer)));
        }
        if a.values.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::Shape(format!("non-finite activation for {:?}", a.source_sample_id)));
        }
    }

    let raw: Vec<&[f64]> = data.iter().map(|(a, _)| a.values.as_slice()).collect();
    let standardizer = hyper.standardize.then(|| Standardizer::fit(&raw));
    let xs: Vec<Vec<f64>> = match &standardizer {
        Some(s) => raw.iter().map(|x| s.apply(x)).collect(),
        None => raw.iter().map(|x| x.to_vec()).collect(),
    };
    let ys = data.iter().map(|(_, l)| l.as_u8() as f64).collect();
    let problem = Problem { xs, ys, hyper };

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    if let Some(seed) = hyper.init_seed {
        let normal = Normal::new(0.0, hyper.init_scale.abs().max(f64::MIN_POSITIVE)).unwrap();
        let mut r = rng(seed);
        w.iter_mut().for_each(|v| *v = normal.sample(&mut r));
        if hyper.fit_bias {
            b = normal.sample(&mut r);
        }
    }

    let mut gw = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    let mut f = problem.objective(&w, b);
    let mut history = vec![f];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < hyper.max_iter {
        let gb = problem.gradient(&w, b, &mut gw);
        let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        if gmax < hyper.tol {
            converged = true;
            break;
        }
        let gsq = dot(&gw, &gw) + gb * gb;
        // Armijo backtracking from a step that grows after each success.
        let mut accepted = false;
        while step > 1e-30 {
            for ((t, wi), gi) in trial.iter_mut().zip(&w).zip(&gw) {
                *t = wi - step * gi;
            }
            let tb = b - step * gb;
            let ft = problem.objective(&trial, tb);
            if ft <= f - 1e-4 * step * gsq {
                w.copy_from_slice(&trial);
                b = tb;
                f = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        history.push(f);
        step = (step * 2.0).min(1e6);
    }
    if !converged {
        let gb = problem.gradient(&w, b, &mut gw);
        converged = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs())) < hyper.tol;
    }

    let probe = ProbeWeights {
        w,
        bias: b,
        layer,
        trained_on: dataset_name.to_string(),
        hyper: hyper.clone(),
        standardizer,
        iterations,
        converged,
    };
    Ok((probe, history))
}

/// Membership confidence `σ(w·x + b)`.
pub fn score(probe: &ProbeWeights, x: &ActivationVector) -> Result<f64, ProbeError> {
    if x.dim() != probe.dim() {
        return Err(ProbeError::Shape(format!("activation length {} != probe length {}", x.dim(), probe.dim())));
    }
    let z = match &probe.standardizer {
        Some(s) => dot(&probe.w, &s.apply(&x.values)),
        None => dot(&probe.w, &x.values),
    };
    Ok(sigmoid(z + probe.bias))
}

/// Member iff the probe score reaches the threshold (ties are members).
pub fn classify(probe: &ProbeWeights, x: &ActivationVector, threshold: DetectionThreshold) -> Result<Label, ProbeError> {
    Ok(if score(probe, x)? >= threshold.gamma() { Label::Member } else { Label::NonMember })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(values: Vec<f64>) -> ActivationVector {
        ActivationVector { values, layer: 1, source_sample_id: String::new() }
    }

    fn probe(w: Vec<f64>, bias: f64) -> ProbeWeights {
        ProbeWeights { bias, ..ProbeWeights { w, ..ProbeWeights::zeros(0, 1) } }
    }

    #[test]
    fn zero_probe_scores_half() {
        let p = ProbeWeights::zeros(3, 1);
        assert_eq!(score(&p, &act(vec![5.0, -2.0, 9.0])).unwrap(), 0.5);
    }

    #[test]
    fn closed_form_score() {
        let s = score(&probe(vec![1.0, 0.0], 0.0), &act(vec![2.0, 0.0])).unwrap();
        assert!((s - 0.880_797).abs() < 1e-6);
    }

    #[test]
    fn negated_weights_complement() {
        let x = act(vec![0.3, -1.2, 2.0]);
        let a = score(&probe(vec![0.5, 1.0, -0.25], 0.0), &x).unwrap();
        let b = score(&probe(vec![-0.5, -1.0, 0.25], 0.0), &x).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(score(&ProbeWeights::zeros(2, 1), &act(vec![1.0])), Err(ProbeError::Shape(_))));
    }

    #[test]
    fn classify_threshold_rule() {
        // σ(z) = 0.7 ⇒ z = ln(0.7/0.3)
        let p = probe(vec![(0.7f64 / 0.3).ln()], 0.0);
        let x = act(vec![1.0]);
        let half = DetectionThreshold::new(0.5).unwrap();
        assert_eq!(classify(&p, &x, half).unwrap(), Label::Member);
        assert_eq!(classify(&ProbeWeights::zeros(1, 1), &x, half).unwrap(), Label::Member);
        assert_eq!(classify(&p, &x, DetectionThreshold::new(1.0).unwrap()).unwrap(), Label::NonMember);
        assert!(DetectionThreshold::new(1.5).is_err());
    }

    #[test]
    fn single_class_rejected() {
        let data: Vec<_> = (0..5).map(|i| (act(vec![i as f64]), Label::Member)).collect();
        assert!(matches!(train_probe(&data, &ProbeHyper::default()), Err(ProbeError::Class { .. })));
    }

    #[test]
    fn mixed_shapes_rejected() {
        let mut data: Vec<_> = (0..4)
            .map(|i| (act(vec![i as f64, 1.0]), if i % 2 == 0 { Label::Member } else { Label::NonMember }))
            .collect();
        data.push((act(vec![1.0]), Label::Member));
        assert!(matches!(train_probe(&data, &ProbeHyper::default()), Err(ProbeError::Shape(_))));
        let mut data2: Vec<_> = data[..4].to_vec();
        data2[0].0.layer = 2;
        assert!(matches!(train_probe(&data2, &ProbeHyper::default()), Err(ProbeError::Shape(_))));
    }

    #[test]
    fn loss_non_increasing_and_converges() {
        let data: Vec<_> = (0..40)
            .map(|i| {
                let x = (i as f64 * 0.37).sin() * 2.0;
                let y = (i as f64 * 1.3).cos();
                let label = if x + 0.5 * y + 0.3 * (i as f64 * 2.1).sin() > 0.0 { Label::Member } else { Label::NonMember };
                (act(vec![x, y]), label)
            })
            .collect();
        let (p, hist) = train_probe_traced(&data, &ProbeHyper::default(), "toy").unwrap();
        assert!(hist.windows(2).all(|w| w[1] <= w[0]));
        assert!(p.converged, "iterations {}", p.iterations);
        assert_eq!(p.trained_on, "toy");
    }

    #[test]
    fn artifact_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.json");
        let mut p = probe(vec![0.1, -2.5, 1e-17], 0.25);
        p.layer = 2;
        p.trained_on = "ds".into();
        p.save(&path).unwrap();
        assert_eq!(ProbeWeights::load(&path).unwrap(), p);
    }
}
