use serde::{Deserialize, Serialize};

use super::neighbors::{ModelTopK, NeighborProvider};
use super::{
    lowercase_attack, loss_attack, min_k_prob, neighbor_attack, probe_attack, smaller_model_attack, zlib_attack,
    AttackError, AttackKind, AttackScore, ZLIB_LEVEL,
};
use crate::corpus::{PromptTemplate, Sample};
use crate::lm::ModelState;
use crate::probe::ProbeWeights;
use crate::util::{derive_seed, sha256_hex};

/// A membership attack run against a target model.
pub trait Attack: Send + Sync {
    fn kind(&self) -> AttackKind;

    fn name(&self) -> &'static str {
        self.kind().as_str()
    }

    /// Canonical description of everything besides the target model and the
    /// sample that the score depends on. Part of the score cache key.
    fn params(&self) -> String;

    fn score(&self, target: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError>;
}

pub struct LossAttack;

impl Attack for LossAttack {
    fn kind(&self) -> AttackKind {
        AttackKind::Loss
    }
    fn params(&self) -> String {
        String::new()
    }
    fn score(&self, target: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError> {
        loss_attack(target, sample)
    }
}

pub struct MinKAttack {
    pub k_percent: f64,
}

impl Attack for MinKAttack {
    fn kind(&self) -> AttackKind {
        AttackKind::MinK
    }
    fn params(&self) -> String {
        format!("k={}", self.k_percent)
    }
    fn score(&self, target: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError> {
        min_k_prob(target, sample, self.k_percent)
    }
}

/// Neighbors are regenerated per sample from `derive(seed, sample id)`.
pub struct NeighborAttack {
    pub provider: Box<dyn NeighborProvider>,
    pub count: usize,
    pub seed: u64,
}

impl Attack for NeighborAttack {
    fn kind(&self) -> AttackKind {
        AttackKind::Neighbor
    }
    fn params(&self) -> String {
        format!("provider={};count={};seed={}", self.provider.name(), self.count, self.seed)
    }
    fn score(&self, target: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError> {
        let seed = derive_seed(self.seed, &sample.id);
        let set = self.provider.generate(target, sample, self.count, seed)?;
        neighbor_attack(target, sample, &set)
    }
}

pub struct ZlibAttack;

impl Attack for ZlibAttack {
    fn kind(&self) -> AttackKind {
        AttackKind::Zlib
    }
    fn params(&self) -> String {
        format!("level={ZLIB_LEVEL}")
    }
    fn score(&self, target: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError> {
        zlib_attack(target, sample)
    }
}

pub struct LowercaseAttack;

impl Attack for LowercaseAttack {
    fn kind(&self) -> AttackKind {
        AttackKind::Lowercase
    }
    fn params(&self) -> String {
        "simple-lowercase".into()
    }
    fn score(&self, target: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError> {
        lowercase_attack(target, sample)
    }
}

pub struct SmallerModelAttack {
    reference: ModelState,
    reference_hash: String,
}

impl SmallerModelAttack {
    pub fn new(reference: ModelState) -> Self {
        let reference_hash = reference.content_hash();
        SmallerModelAttack { reference, reference_hash }
    }

    pub fn reference(&self) -> &ModelState {
        &self.reference
    }
}

impl Attack for SmallerModelAttack {
    fn kind(&self) -> AttackKind {
        AttackKind::SmallerModel
    }
    fn params(&self) -> String {
        format!("reference={}", self.reference_hash)
    }
    fn score(&self, target: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError> {
        smaller_model_attack(target, &self.reference, sample)
    }
}

pub struct ProbeAttack {
    probe: ProbeWeights,
    template: PromptTemplate,
    fingerprint: String,
}

impl ProbeAttack {
    pub fn new(probe: ProbeWeights, template: PromptTemplate) -> Self {
        let json = serde_json::to_vec(&probe).expect("probe serializes");
        let fingerprint =
            format!("probe={};template={}", &sha256_hex(&json)[..16], &sha256_hex(template.body().as_bytes())[..16]);
        ProbeAttack { probe, template, fingerprint }
    }

    pub fn probe(&self) -> &ProbeWeights {
        &self.probe
    }
}

impl Attack for ProbeAttack {
    fn kind(&self) -> AttackKind {
        AttackKind::Probe
    }
    fn params(&self) -> String {
        self.fingerprint.clone()
    }
    fn score(&self, target: &ModelState, sample: &Sample) -> Result<AttackScore, AttackError> {
        probe_attack(target, &self.probe, &self.template, sample)
    }
}

/// Tunable parameters of the built-in baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackParams {
    pub min_k_percent: f64,
    pub neighbor_count: usize,
    pub neighbor_top_k: usize,
    pub neighbor_seed: u64,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams { min_k_percent: 20.0, neighbor_count: 100, neighbor_top_k: 10, neighbor_seed: 0 }
    }
}

/// Attacks registered by name; registering a second attack of the same kind
/// replaces the first.
#[derive(Default)]
pub struct AttackRegistry {
    entries: Vec<Box<dyn Attack>>,
}

impl AttackRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Baselines that need nothing beyond the target model.
    pub fn baselines(params: &AttackParams) -> Self {
        let mut r = Self::new();
        r.register(Box::new(LossAttack));
        r.register(Box::new(MinKAttack { k_percent: params.min_k_percent }));
        r.register(Box::new(NeighborAttack {
            provider: Box::new(ModelTopK { top_k: params.neighbor_top_k }),
            count: params.neighbor_count,
            seed: params.neighbor_seed,
        }));
        r.register(Box::new(ZlibAttack));
        r.register(Box::new(LowercaseAttack));
        r
    }

    /// Baselines plus the probe and the reference-model attack when their
    /// inputs are available.
    pub fn standard(
        params: &AttackParams,
        probe: Option<(ProbeWeights, PromptTemplate)>,
        reference: Option<ModelState>,
    ) -> Self {
        let mut r = Self::baselines(params);
        if let Some((p, t)) = probe {
            r.register(Box::new(ProbeAttack::new(p, t)));
        }
        if let Some(m) = reference {
            r.register(Box::new(SmallerModelAttack::new(m)));
        }
        r
    }

    pub fn register(&mut self, attack: Box<dyn Attack>) {
        match self.entries.iter_mut().find(|a| a.kind() == attack.kind()) {
            Some(slot) => *slot = attack,
            None => self.entries.push(attack),
        }
    }

    pub fn get(&self, name: &str) -> Option<&dyn Attack> {
        self.entries.iter().find(|a| a.name() == name).map(|a| a.as_ref())
    }

    pub fn get_kind(&self, kind: AttackKind) -> Option<&dyn Attack> {
        self.get(kind.as_str())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|a| a.name()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
