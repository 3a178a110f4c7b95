//! Experiment configuration and the end-to-end pipeline:
//! pretrain → inject → train probe → detect → report.
//!
//! The configuration is one TOML document. Every randomized stage draws its
//! seed from the `[seeds]` table; missing names are filled from the section
//! defaults by [`ExperimentConfig::resolve`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{
    run_attack_suite, AttackError, AttackKind, AttackParams, AttackRegistry, MinKAttack, ScoreCache,
    SuiteConfig, SuiteOutcome,
};
use crate::corpus::{split_half, split_val_test, CorpusError, LabeledDataset, PromptTemplate, TemplateRegistry};
use crate::eval::{auc, build_report, permutation_pvalue, EvalError, Report};
use crate::lm::{
    extract_all_layers, pretrain_logged, train_proxy_with, ActivationVector, LmError, ModelConfig, ModelState,
    ProxyHyper, StepLoss, TrainHyper,
};
use crate::probe::{train_probe, ProbeError, ProbeHyper, ProbeWeights};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ExperimentError {
    /// True for failures of the numerics (divergence, non-finite values) as
    /// opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ExperimentError::Lm(LmError::Divergence { .. })
                | ExperimentError::Attack(AttackError::NonFinite { .. })
                | ExperimentError::Eval(EvalError::NonFinite(_))
        )
    }
}

/// Seed names used by the pipeline.
pub const SEED_NAMES: [&str; 8] =
    ["model", "reference_model", "train", "split", "eval_split", "neighbor", "permutation", "synth"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Pretraining corpus (JSONL, labels ignored).
    pub corpus: Option<PathBuf>,
    /// Labeled evaluation set.
    pub eval: Option<PathBuf>,
    /// Unlabeled probe-training set; half of it is injected.
    pub probe_train: Option<PathBuf>,
    /// Labeled validation set for the injection grid search.
    pub validation: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reference_checkpoint: Option<PathBuf>,
    pub proxy_checkpoint: Option<PathBuf>,
    /// Probe-training set with the labels assigned at injection time.
    pub probe_train_labeled: Option<PathBuf>,
    pub probe: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl PathsConfig {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.eval,
            &mut self.probe_train,
            &mut self.validation,
            &mut self.checkpoint,
            &mut self.reference_checkpoint,
            &mut self.proxy_checkpoint,
            &mut self.probe_train_labeled,
            &mut self.probe,
            &mut self.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Probe layer: fixed, or searched jointly with the injection lr.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerChoice {
    Layer(usize),
    Grid,
}

impl Serialize for LayerChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            LayerChoice::Layer(l) => s.serialize_u64(*l as u64),
            LayerChoice::Grid => s.serialize_str("grid"),
        }
    }
}

impl<'de> Deserialize<'de> for LayerChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(u64),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(n) => Ok(LayerChoice::Layer(n as usize)),
            Repr::S(s) if s == "grid" => Ok(LayerChoice::Grid),
            Repr::S(s) => Err(serde::de::Error::custom(format!("layer must be an integer or \"grid\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Fixed layer or `"grid"`; `None` means the model's middle layer.
    pub layer: Option<LayerChoice>,
    /// Candidate layers for `"grid"`; all layers when empty.
    pub layers: Vec<usize>,
    /// Template id from the template registry.
    pub template: String,
    /// Score the probe against the proxy instead of the target model.
    pub score_on_proxy: bool,
    pub hyper: ProbeHyper,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            layer: None,
            layers: Vec::new(),
            template: "default".into(),
            score_on_proxy: false,
            hyper: ProbeHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionSection {
    /// Learning-rate grid; one entry means no search.
    pub lrs: Vec<f64>,
    pub epochs: usize,
    pub grad_clip: Option<f64>,
}

impl Default for InjectionSection {
    fn default() -> Self {
        let p = ProxyHyper::default();
        InjectionSection { lrs: vec![p.lr], epochs: p.epochs, grad_clip: p.grad_clip }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttacksSection {
    pub enabled: Vec<AttackKind>,
    pub min_k_percent: f64,
    pub neighbor_count: usize,
    pub neighbor_top_k: usize,
    /// Label permutations for the significance test; 0 disables it.
    pub permutations: usize,
    /// Keep a score cache under `<out>/cache`.
    pub cache: bool,
}

impl Default for AttacksSection {
    fn default() -> Self {
        let p = AttackParams::default();
        AttacksSection {
            enabled: AttackKind::ALL.to_vec(),
            min_k_percent: p.min_k_percent,
            neighbor_count: p.neighbor_count,
            neighbor_top_k: p.neighbor_top_k,
            permutations: 1000,
            cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Split the evaluation set into validation and test parts in this
    /// ratio; detection then reports on the test part only.
    pub validation_ratio: Option<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatesSection {
    /// Templates for the ablation, in order; every registered one when empty.
    pub ids: Vec<String>,
    /// Extra templates registered alongside the built-in ones.
    pub custom: Vec<PromptTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// `d_model` values; `d_ff` follows as 4 × `d_model`.
    pub model_size: Vec<usize>,
    pub train_data_count: Vec<usize>,
    pub min_k: Vec<f64>,
    /// Baseline reported next to the probe.
    pub baseline: AttackKind,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            model_size: vec![32, 64],
            train_data_count: vec![50, 100, 200],
            min_k: vec![5.0, 10.0, 20.0, 50.0, 100.0],
            baseline: AttackKind::Loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// New data points requested per prompt.
    pub count: usize,
    /// Number of prompts (each with freshly drawn exemplars).
    pub prompts: usize,
    /// Model name sent to the endpoint.
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { count: 10, prompts: 1, model: "default".into(), timeout_secs: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub fpr_targets: Vec<f64>,
    pub model: ModelConfig,
    pub train: TrainHyper,
    /// Reference model for the smaller-model attack, trained on the same
    /// corpus with the same schedule.
    pub reference_model: Option<ModelConfig>,
    pub paths: PathsConfig,
    pub probe: ProbeSection,
    pub injection: InjectionSection,
    pub attacks: AttacksSection,
    pub seeds: BTreeMap<String, u64>,
    pub eval: EvalSection,
    pub templates: TemplatesSection,
    pub sweep: SweepSection,
    pub synth: SynthSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            fpr_targets: vec![0.05],
            model: ModelConfig::default(),
            train: TrainHyper::default(),
            reference_model: None,
            paths: PathsConfig::default(),
            probe: ProbeSection::default(),
            injection: InjectionSection::default(),
            attacks: AttacksSection::default(),
            seeds: BTreeMap::new(),
            eval: EvalSection::default(),
            templates: TemplatesSection::default(),
            sweep: SweepSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml_str(raw: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let value: toml::Table = raw.parse().map_err(|e| ExperimentError::Config(format!("{e}")))?;
        Self::from_toml_value(value, base_dir)
    }

    pub fn from_toml_value(value: toml::Table, base_dir: &Path) -> Result<Self, ExperimentError> {
        let mut cfg: ExperimentConfig =
            toml::Value::Table(value).try_into().map_err(|e| ExperimentError::Config(format!("{e}")))?;
        cfg.paths.resolve_against(base_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills every named seed (section values act as defaults), pushes the
    /// seeds into the sections that consume them, and validates.
    pub fn resolve(mut self) -> Result<Self, ExperimentError> {
        for name in self.seeds.keys() {
            if !SEED_NAMES.contains(&name.as_str()) {
                return Err(ExperimentError::Config(format!(
                    "unknown seed name {name:?} (known: {})",
                    SEED_NAMES.join(", ")
                )));
            }
        }
        let model_seed = self.model.seed;
        let train_seed = self.train.seed;
        let ref_seed = self.reference_model.as_ref().map_or(0, |c| c.seed);
        for name in SEED_NAMES {
            let default = match name {
                "model" => model_seed,
                "train" => train_seed,
                "reference_model" => ref_seed,
                _ => 0,
            };
            self.seeds.entry(name.to_string()).or_insert(default);
        }
        self.model.seed = self.seeds["model"];
        self.train.seed = self.seeds["train"];
        if let Some(r) = &mut self.reference_model {
            r.seed = self.seeds["reference_model"];
        }
        self.validate()?;
        Ok(self)
    }

    pub fn seed(&self, name: &str) -> u64 {
        self.seeds.get(name).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.model.validate()?;
        if let Some(r) = &self.reference_model {
            r.validate()?;
        }
        if self.fpr_targets.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("fpr_targets must lie in (0, 1)".into());
        }
        if self.injection.lrs.is_empty() || self.injection.lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return bad("injection.lrs must be a non-empty list of finite, non-negative rates".into());
        }
        for l in self.candidate_layers() {
            if l == 0 || l > self.model.n_layers {
                return bad(format!("probe layer {l} outside [1, {}]", self.model.n_layers));
            }
        }
        if !(self.attacks.min_k_percent > 0.0 && self.attacks.min_k_percent <= 100.0) {
            return bad("attacks.min_k_percent must lie in (0, 100]".into());
        }
        if self.attacks.neighbor_count == 0 || self.attacks.neighbor_top_k == 0 {
            return bad("attacks.neighbor_count and neighbor_top_k must be positive".into());
        }
        if self.template_registry().get(&self.probe.template).is_none() {
            return bad(format!("unknown probe template {:?}", self.probe.template));
        }
        self.template_registry().select(&self.templates.ids)?;
        Ok(())
    }

    /// Layers considered by the injection search.
    pub fn candidate_layers(&self) -> Vec<usize> {
        match self.probe.layer {
            None => vec![self.model.default_probe_layer()],
            Some(LayerChoice::Layer(l)) => vec![l],
            Some(LayerChoice::Grid) if self.probe.layers.is_empty() => (1..=self.model.n_layers).collect(),
            Some(LayerChoice::Grid) => self.probe.layers.clone(),
        }
    }

    pub fn template_registry(&self) -> TemplateRegistry {
        let mut r = TemplateRegistry::builtin();
        for t in &self.templates.custom {
            r.register(t.clone());
        }
        r
    }

    pub fn probe_template(&self) -> PromptTemplate {
        self.template_registry().get(&self.probe.template).cloned().unwrap_or_default()
    }

    pub fn attack_params(&self) -> AttackParams {
        AttackParams {
            min_k_percent: self.attacks.min_k_percent,
            neighbor_count: self.attacks.neighbor_count,
            neighbor_top_k: self.attacks.neighbor_top_k,
            neighbor_seed: self.seed("neighbor"),
        }
    }

    /// Seeds and hyperparameters echoed into every output sidecar.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::json!({
            "seeds": self.seeds,
            "model": self.model,
            "train": self.train,
            "injection": self.injection,
            "probe": self.probe,
            "attacks": self.attacks,
            "fpr_targets": self.fpr_targets,
            "library_version": crate::VERSION,
        })
    }
}

/// Trains the target model on `corpus`.
pub fn pretrain_target(cfg: &ExperimentConfig, corpus: &[String]) -> Result<(ModelState, Vec<StepLoss>), ExperimentError> {
    Ok(pretrain_logged(cfg.model.clone(), corpus, &cfg.train)?)
}

/// Trains the reference model, if one is configured.
pub fn pretrain_reference(cfg: &ExperimentConfig, corpus: &[String]) -> Result<Option<ModelState>, ExperimentError> {
    match &cfg.reference_model {
        None => Ok(None),
        Some(rc) => Ok(Some(pretrain_logged(rc.clone(), corpus, &cfg.train)?.0)),
    }
}

/// Labels the probe-training set: a seeded half becomes members.
pub fn label_probe_train(cfg: &ExperimentConfig, unlabeled: &LabeledDataset) -> Result<LabeledDataset, ExperimentError> {
    Ok(split_half(unlabeled, cfg.seed("split"))?)
}

/// `(validation, test)` parts of the evaluation set. Without a configured
/// ratio the whole set is the test part and `validation` is passed through.
pub fn eval_parts(
    cfg: &ExperimentConfig,
    eval: &LabeledDataset,
    validation: Option<LabeledDataset>,
) -> Result<(Option<LabeledDataset>, LabeledDataset), ExperimentError> {
    match cfg.eval.validation_ratio {
        Some(ratio) => {
            let (v, t) = split_val_test(eval, ratio, cfg.seed("eval_split"))?;
            Ok((Some(v), t))
        }
        None => Ok((validation, eval.clone())),
    }
}

/// One (lr, layer) point of the injection search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionCandidate {
    pub lr: f64,
    pub layer: usize,
    /// Probe AUC on the validation set, when one is available.
    pub val_auc: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct InjectionOutcome {
    pub proxy: ModelState,
    pub lr: f64,
    pub layer: usize,
    /// Probe trained on the selected proxy and layer.
    pub probe: ProbeWeights,
    pub log: Vec<InjectionCandidate>,
}

fn activations_by_layer(
    model: &ModelState,
    data: &LabeledDataset,
    template: &PromptTemplate,
) -> Result<Vec<Vec<ActivationVector>>, ExperimentError> {
    let mut by_layer = vec![Vec::with_capacity(data.len()); model.config().n_layers];
    for s in data.samples() {
        for a in extract_all_layers(model, s, template)? {
            by_layer[a.layer - 1].push(a);
        }
    }
    Ok(by_layer)
}

fn labeled_pairs(acts: &[ActivationVector], data: &LabeledDataset) -> Result<Vec<(ActivationVector, crate::corpus::Label)>, ExperimentError> {
    acts.iter()
        .zip(data.samples())
        .map(|(a, s)| {
            s.label.map(|l| (a.clone(), l)).ok_or_else(|| {
                ExperimentError::Corpus(CorpusError::Precondition(format!("probe-training sample {:?} is unlabeled", s.id)))
            })
        })
        .collect()
}

/// Probe AUC of `probe` on a labeled set, scored on `model`.
pub fn probe_auc(
    model: &ModelState,
    probe: &ProbeWeights,
    template: &PromptTemplate,
    data: &LabeledDataset,
) -> Result<f64, ExperimentError> {
    let mut m = Vec::new();
    let mut n = Vec::new();
    for s in data.samples() {
        let sc = crate::attacks::probe_attack(model, probe, template, s)?.score;
        match s.label {
            Some(crate::corpus::Label::Member) => m.push(sc),
            Some(crate::corpus::Label::NonMember) => n.push(sc),
            None => {}
        }
    }
    Ok(auc(&m, &n)?)
}

/// Injects the member half of `probe_train` for each configured lr, trains a
/// probe per candidate layer, and keeps the pair with the best validation
/// probe AUC (first wins on ties). Without a validation set only a single
/// candidate is allowed.
pub fn inject_and_select(
    cfg: &ExperimentConfig,
    target: &ModelState,
    probe_train: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    template: &PromptTemplate,
) -> Result<InjectionOutcome, ExperimentError> {
    let layers = cfg.candidate_layers();
    let n_candidates = layers.len() * cfg.injection.lrs.len();
    if n_candidates > 1 && validation.is_none() {
        return Err(ExperimentError::Config(
            "an injection grid needs a validation set (paths.validation or eval.validation_ratio)".into(),
        ));
    }
    let members = probe_train.members();
    if members.is_empty() {
        return Err(ExperimentError::Corpus(CorpusError::Precondition("no members to inject".into())));
    }
    let mut best: Option<(f64, InjectionOutcome)> = None;
    let mut log = Vec::new();
    for &lr in &cfg.injection.lrs {
        let hyper = ProxyHyper { lr, epochs: cfg.injection.epochs, grad_clip: cfg.injection.grad_clip };
        let proxy = train_proxy_with(target, &members, template, &hyper)?;
        let acts = activations_by_layer(&proxy, probe_train, template)?;
        for &layer in &layers {
            let probe = train_probe(&labeled_pairs(&acts[layer - 1], probe_train)?, &cfg.probe.hyper)?;
            let scorer = if cfg.probe.score_on_proxy { &proxy } else { target };
            let val_auc = match validation {
                Some(v) => Some(probe_auc(scorer, &probe, template, v)?),
                None => None,
            };
            log::info!("injection lr={lr} layer={layer} val_auc={val_auc:?}");
            log.push(InjectionCandidate { lr, layer, val_auc, selected: false });
            let key = val_auc.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _)| key > *b) {
                best = Some((key, InjectionOutcome { proxy: proxy.clone(), lr, layer, probe, log: Vec::new() }));
            }
        }
    }
    let (_, mut outcome) = best.expect("at least one candidate");
    for c in &mut log {
        c.selected = c.lr == outcome.lr && c.layer == outcome.layer;
    }
    outcome.log = log;
    Ok(outcome)
}

/// Trains the probe on activations of the labeled probe-training set at
/// `layer` of the proxy model.
pub fn train_probe_on(
    cfg: &ExperimentConfig,
    proxy: &ModelState,
    probe_train: &LabeledDataset,
    layer: usize,
    template: &PromptTemplate,
) -> Result<ProbeWeights, ExperimentError> {
    if layer == 0 || layer > proxy.config().n_layers {
        return Err(LmError::LayerRange { layer, n_layers: proxy.config().n_layers }.into());
    }
    let acts = activations_by_layer(proxy, probe_train, template)?;
    let mut probe = train_probe(&labeled_pairs(&acts[layer - 1], probe_train)?, &cfg.probe.hyper)?;
    probe.trained_on = probe_train.name().to_string();
    Ok(probe)
}

/// Attack scores, the report and per-attack permutation p-values.
#[derive(Debug, Clone)]
pub struct Detection {
    pub outcome: SuiteOutcome,
    pub report: Report,
    pub pvalues: BTreeMap<String, f64>,
}

impl Detection {
    pub fn auc(&self, attack: AttackKind) -> Option<f64> {
        self.report.get(attack.as_str()).map(|r| r.auc)
    }

    /// Sidecar for the score table: suite provenance, config provenance,
    /// p-values and the report.
    pub fn sidecar(&self, cfg: &ExperimentConfig, extra: serde_json::Value) -> serde_json::Value {
        let mut v = self.outcome.sidecar(cfg.provenance());
        if let Some(obj) = v.as_object_mut() {
            obj.insert("pvalues".into(), serde_json::json!(self.pvalues));
            obj.insert("report".into(), serde_json::to_value(&self.report).expect("report serializes"));
            if let serde_json::Value::Object(more) = extra {
                obj.extend(more);
            }
        }
        v
    }
}

/// Runs the enabled attacks on `eval` against `target` and evaluates them.
pub fn detect(
    cfg: &ExperimentConfig,
    target: &ModelState,
    probe: Option<(ProbeWeights, PromptTemplate)>,
    reference: Option<ModelState>,
    eval: &LabeledDataset,
    cache: &mut ScoreCache,
) -> Result<Detection, ExperimentError> {
    let registry = AttackRegistry::standard(&cfg.attack_params(), probe, reference);
    detect_with(cfg, target, &registry, eval, cache)
}

pub fn detect_with(
    cfg: &ExperimentConfig,
    target: &ModelState,
    registry: &AttackRegistry,
    eval: &LabeledDataset,
    cache: &mut ScoreCache,
) -> Result<Detection, ExperimentError> {
    let suite = SuiteConfig { enabled: cfg.attacks.enabled.clone() };
    let outcome = run_attack_suite(target, eval, registry, &suite, cache)?;
    let mut report = build_report(&outcome.report_rows(), &cfg.fpr_targets);
    for (kind, reason) in &outcome.skipped {
        report.errors.push((kind.to_string(), reason.clone()));
    }
    let mut pvalues = BTreeMap::new();
    if cfg.attacks.permutations > 0 {
        for r in &report.results {
            let kind: AttackKind = r.attack.parse().map_err(ExperimentError::Config)?;
            let (m, n) = outcome.split_scores(kind);
            pvalues.insert(r.attack.clone(), permutation_pvalue(&m, &n, cfg.attacks.permutations, cfg.seed("permutation"))?);
        }
    }
    Ok(Detection { outcome, report, pvalues })
}

/// In-memory inputs of one end-to-end run.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub corpus: Vec<String>,
    /// Labeled evaluation set (members are part of `corpus`).
    pub eval: LabeledDataset,
    /// Unlabeled probe-training set, disjoint from `eval`.
    pub probe_train: LabeledDataset,
    /// Optional labeled validation set; ignored when the config splits `eval`.
    pub validation: Option<LabeledDataset>,
}

/// Sizes of a synthetic experiment built from the toy sentence generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    /// Pretraining corpus size, eval members included.
    pub corpus_size: usize,
    pub eval_members: usize,
    pub eval_non_members: usize,
    pub probe_train: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec { corpus_size: 2000, eval_members: 200, eval_non_members: 200, probe_train: 200, seed: 0 }
    }
}

/// Draws distinct sentences for the corpus, held-out non-members and the
/// probe-training pool. Eval members are a prefix of the corpus, so all
/// three pools come from one distribution and never overlap.
pub fn toy_data(spec: &ToySpec) -> Result<ExperimentData, ExperimentError> {
    if spec.eval_members > spec.corpus_size {
        return Err(ExperimentError::Config("eval_members exceeds corpus_size".into()));
    }
    let total = spec.corpus_size + spec.eval_non_members + spec.probe_train;
    let all = crate::corpus::toy::sentences(total, spec.seed);
    let (corpus, rest) = all.split_at(spec.corpus_size);
    let (held_out, pool) = rest.split_at(spec.eval_non_members);
    let mut eval = Vec::with_capacity(spec.eval_members + spec.eval_non_members);
    for (i, t) in corpus[..spec.eval_members].iter().enumerate() {
        eval.push(crate::corpus::Sample::new(format!("m{i:04}"), t.clone(), Some(crate::corpus::Label::Member))?);
    }
    for (i, t) in held_out.iter().enumerate() {
        eval.push(crate::corpus::Sample::new(format!("n{i:04}"), t.clone(), Some(crate::corpus::Label::NonMember))?);
    }
    let probe_train = pool
        .iter()
        .enumerate()
        .map(|(i, t)| crate::corpus::Sample::new(format!("p{i:04}"), t.clone(), None))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentData {
        corpus: corpus.to_vec(),
        eval: LabeledDataset::new("toy-eval", eval)?,
        probe_train: LabeledDataset::new("toy-probe-train", probe_train)?,
        validation: None,
    })
}

/// Everything produced by [`run_end_to_end`].
#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub target: ModelState,
    pub reference: Option<ModelState>,
    pub train_log: Vec<StepLoss>,
    pub probe_train: LabeledDataset,
    pub validation: Option<LabeledDataset>,
    pub test: LabeledDataset,
    pub injection: InjectionOutcome,
    pub detection: Detection,
}

/// Pretrain, inject with search, train the probe, run every enabled attack.
pub fn run_end_to_end(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<EndToEnd, ExperimentError> {
    let (target, train_log) = pretrain_target(cfg, &data.corpus)?;
    let reference = pretrain_reference(cfg, &data.corpus)?;
    let mut run = run_from_target(cfg, target, reference, data, &cfg.probe_template(), &mut ScoreCache::in_memory())?;
    run.train_log = train_log;
    Ok(run)
}

/// [`run_end_to_end`] starting from already trained models.
pub fn run_from_target(
    cfg: &ExperimentConfig,
    target: ModelState,
    reference: Option<ModelState>,
    data: &ExperimentData,
    template: &PromptTemplate,
    cache: &mut ScoreCache,
) -> Result<EndToEnd, ExperimentError> {
    let probe_train = label_probe_train(cfg, &data.probe_train)?;
    let (validation, test) = eval_parts(cfg, &data.eval, data.validation.clone())?;
    let injection = inject_and_select(cfg, &target, &probe_train, validation.as_ref(), template)?;
    let mut probe = injection.probe.clone();
    probe.trained_on = probe_train.name().to_string();
    let scorer = if cfg.probe.score_on_proxy { injection.proxy.clone() } else { target.clone() };
    let detection = if cfg.probe.score_on_proxy {
        // probe scored against the proxy, baselines against the target
        let mut probe_cfg = cfg.clone();
        probe_cfg.attacks.enabled = vec![AttackKind::Probe];
        let p = detect(&probe_cfg, &scorer, Some((probe, template.clone())), None, &test, cache)?;
        let mut base_cfg = cfg.clone();
        base_cfg.attacks.enabled.retain(|k| *k != AttackKind::Probe);
        let b = detect(&base_cfg, &target, None, reference.clone(), &test, cache)?;
        merge_detections(cfg, p, b)
    } else {
        detect(cfg, &target, Some((probe, template.clone())), reference.clone(), &test, cache)?
    };
    Ok(EndToEnd { target, reference, train_log: Vec::new(), probe_train, validation, test, injection, detection })
}

fn merge_detections(cfg: &ExperimentConfig, a: Detection, b: Detection) -> Detection {
    let mut outcome = a.outcome;
    outcome.rows.extend(b.outcome.rows);
    outcome.skipped.extend(b.outcome.skipped);
    outcome.computed += b.outcome.computed;
    outcome.cached += b.outcome.cached;
    outcome.params.extend(b.outcome.params);
    let mut report = build_report(&outcome.report_rows(), &cfg.fpr_targets);
    for (kind, reason) in &outcome.skipped {
        report.errors.push((kind.to_string(), reason.clone()));
    }
    let mut pvalues = a.pvalues;
    pvalues.extend(b.pvalues);
    Detection { outcome, report, pvalues }
}

/// Probe AUC for one template of the ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRow {
    pub template: String,
    pub auc: f64,
    pub lr: f64,
    pub layer: usize,
}

/// Repeats inject → probe → detect for every template in `registry`, scoring
/// only the probe attack.
pub fn ablate_templates(
    cfg: &ExperimentConfig,
    target: &ModelState,
    data: &ExperimentData,
    registry: &TemplateRegistry,
) -> Result<Vec<TemplateRow>, ExperimentError> {
    if registry.is_empty() {
        return Err(ExperimentError::Config("template registry is empty".into()));
    }
    let mut probe_cfg = cfg.clone();
    probe_cfg.attacks.enabled = vec![AttackKind::Probe];
    probe_cfg.attacks.permutations = 0;
    let mut rows = Vec::new();
    for t in registry.iter() {
        let run = run_from_target(&probe_cfg, target.clone(), None, data, t, &mut ScoreCache::in_memory())?;
        let auc = run.detection.auc(AttackKind::Probe).ok_or_else(|| {
            ExperimentError::Config(format!("probe could not be evaluated for template {:?}", t.id()))
        })?;
        rows.push(TemplateRow { template: t.id().to_string(), auc, lr: run.injection.lr, layer: run.injection.layer });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ModelSize,
    TrainDataCount,
    MinK,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "model_size" => Ok(SweepAxis::ModelSize),
            "train_data_count" => Ok(SweepAxis::TrainDataCount),
            "min_k" => Ok(SweepAxis::MinK),
            _ => Err(format!("unknown sweep axis {s:?} (expected model_size, train_data_count or min_k)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub method: String,
    pub auc: f64,
    /// Seeds of the run, as `name=value` pairs joined by `;`.
    pub seeds: String,
}

fn seeds_field(cfg: &ExperimentConfig) -> String {
    cfg.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

/// Varies one axis and reports the probe and the configured baseline AUC
/// per value. `target` is reused for the axes that do not change the model.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    target: Option<&ModelState>,
    data: &ExperimentData,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let baseline = cfg.sweep.baseline;
    let mut run_cfg = cfg.clone();
    run_cfg.attacks.enabled = vec![AttackKind::Probe, baseline];
    run_cfg.attacks.permutations = 0;
    run_cfg.reference_model = None;
    if baseline == AttackKind::SmallerModel {
        return Err(ExperimentError::Config("sweep baseline cannot be smaller_model".into()));
    }
    let template = cfg.probe_template();
    let seeds = seeds_field(cfg);
    let mut rows = Vec::new();
    let mut push = |value: String, det: &Detection, methods: &[AttackKind]| {
        for &m in methods {
            if let Some(auc) = det.auc(m) {
                rows.push(SweepRow { axis, value: value.clone(), method: m.as_str().into(), auc, seeds: seeds.clone() });
            }
        }
    };
    let need_target = || -> Result<ModelState, ExperimentError> {
        match target {
            Some(t) => Ok(t.clone()),
            None => Ok(pretrain_target(cfg, &data.corpus)?.0),
        }
    };
    match axis {
        SweepAxis::ModelSize => {
            if cfg.sweep.model_size.is_empty() {
                return Err(ExperimentError::Config("sweep.model_size is empty".into()));
            }
            for &d in &cfg.sweep.model_size {
                let mut c = run_cfg.clone();
                c.model.d_model = d;
                c.model.d_ff = 4 * d;
                c.validate()?;
                let t = pretrain_target(&c, &data.corpus)?.0;
                let run = run_from_target(&c, t, None, data, &template, &mut ScoreCache::in_memory())?;
                push(d.to_string(), &run.detection, &[AttackKind::Probe, baseline]);
            }
        }
        SweepAxis::TrainDataCount => {
            if cfg.sweep.train_data_count.is_empty() {
                return Err(ExperimentError::Config("sweep.train_data_count is empty".into()));
            }
            let t = need_target()?;
            let mut cache = ScoreCache::in_memory();
            for &n in &cfg.sweep.train_data_count {
                if n > data.probe_train.len() {
                    return Err(ExperimentError::Config(format!(
                        "train_data_count {n} exceeds the {} available probe-training samples",
                        data.probe_train.len()
                    )));
                }
                let mut d = data.clone();
                d.probe_train = data.probe_train.truncated(n);
                let run = run_from_target(&run_cfg, t.clone(), None, &d, &template, &mut cache)?;
                push(n.to_string(), &run.detection, &[AttackKind::Probe, baseline]);
            }
        }
        SweepAxis::MinK => {
            if cfg.sweep.min_k.is_empty() {
                return Err(ExperimentError::Config("sweep.min_k is empty".into()));
            }
            let t = need_target()?;
            let mut c = run_cfg.clone();
            c.attacks.enabled = vec![AttackKind::Probe];
            let mut cache = ScoreCache::in_memory();
            let run = run_from_target(&c, t.clone(), None, data, &template, &mut cache)?;
            let probe_auc = run.detection.auc(AttackKind::Probe);
            for &k in &cfg.sweep.min_k {
                let mut reg = AttackRegistry::new();
                reg.register(Box::new(MinKAttack { k_percent: k }));
                let mut kc = run_cfg.clone();
                kc.attacks.enabled = vec![AttackKind::MinK];
                let det = detect_with(&kc, &t, &reg, &run.test, &mut cache)?;
                if let Some(auc) = probe_auc {
                    rows.push(SweepRow { axis, value: k.to_string(), method: "probe".into(), auc, seeds: seeds.clone() });
                }
                if let Some(auc) = det.auc(AttackKind::MinK) {
                    rows.push(SweepRow { axis, value: k.to_string(), method: "min_k".into(), auc, seeds: seeds.clone() });
                }
            }
        }
    }
    Ok(rows)
}
