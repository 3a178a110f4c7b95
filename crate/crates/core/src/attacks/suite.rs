//! Runs a set of attacks over a dataset, with a resumable score cache.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::registry::AttackRegistry;
use super::{AttackError, AttackKind, AttackScore, ZLIB_LEVEL};
use crate::corpus::{content_id, Label, LabeledDataset, Sample};
use crate::eval::ReportRow;
use crate::lm::ModelState;
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Attacks to run, in output order.
    pub enabled: Vec<AttackKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { enabled: AttackKind::ALL.to_vec() }
    }
}

/// Scores keyed by (model hash, attack, params) and then by sample id and
/// text hash. Optionally persisted as one JSON file per
/// (model, attack, params) table in `dir`; files are replaced atomically, so
/// concurrent writers resolve to last-write-wins.
#[derive(Debug, Default)]
pub struct ScoreCache {
    dir: Option<PathBuf>,
    tables: HashMap<String, BTreeMap<String, f64>>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        ScoreCache { dir: Some(dir.into()), tables: HashMap::new() }
    }

    fn table_key(model_hash: &str, attack: AttackKind, params: &str) -> String {
        sha256_hex(format!("{model_hash}\n{attack}\n{params}").as_bytes())[..32].to_string()
    }

    fn sample_key(sample: &Sample) -> String {
        format!("{}:{}", sample.id, content_id(&sample.text))
    }

    fn table(&mut self, key: &str) -> Result<&mut BTreeMap<String, f64>, AttackError> {
        if !self.tables.contains_key(key) {
            let mut loaded = BTreeMap::new();
            if let Some(dir) = &self.dir {
                let path = dir.join(format!("{key}.json"));
                if path.exists() {
                    let raw = fs::read(&path).map_err(|e| io_err(&path, e))?;
                    loaded = serde_json::from_slice(&raw).map_err(|e| io_err(&path, e))?;
                }
            }
            self.tables.insert(key.to_string(), loaded);
        }
        Ok(self.tables.get_mut(key).expect("inserted"))
    }

    fn flush(&self, key: &str) -> Result<(), AttackError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(format!("{key}.json"));
        let tmp = dir.join(format!("{key}.json.tmp-{}", std::process::id()));
        let body = serde_json::to_vec(&self.tables[key]).expect("scores serialize");
        fs::write(&tmp, body).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> AttackError {
    AttackError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// One (sample, attack) cell of the suite output.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub sample_id: String,
    pub attack: AttackKind,
    pub label: Option<Label>,
    /// The score, or the error message of a failed attack.
    pub score: Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub rows: Vec<SuiteRow>,
    /// Enabled attacks that were not run, with the reason.
    pub skipped: Vec<(AttackKind, String)>,
    /// Scores computed with the model in this run.
    pub computed: usize,
    /// Scores served from the cache.
    pub cached: usize,
    pub model_hash: String,
    /// Parameter string of every attack that ran.
    pub params: BTreeMap<String, String>,
}

/// Runs every enabled attack on every sample of `dataset` against `target`.
///
/// Enabled attacks missing from the registry are skipped with a diagnostic;
/// per-sample failures are recorded in the row. Rows are ordered by attack
/// (as enabled) and then by dataset order.
pub fn run_attack_suite(
    target: &ModelState,
    dataset: &LabeledDataset,
    registry: &AttackRegistry,
    config: &SuiteConfig,
    cache: &mut ScoreCache,
) -> Result<SuiteOutcome, AttackError> {
    let model_hash = target.content_hash();
    let mut out = SuiteOutcome {
        rows: Vec::with_capacity(config.enabled.len() * dataset.len()),
        skipped: Vec::new(),
        computed: 0,
        cached: 0,
        model_hash: model_hash.clone(),
        params: BTreeMap::new(),
    };
    for &kind in &config.enabled {
        let Some(attack) = registry.get_kind(kind) else {
            let why = match kind {
                AttackKind::Probe => "no probe artifact supplied",
                AttackKind::SmallerModel => "no reference model supplied",
                _ => "not registered",
            };
            log::warn!("skipping attack {kind}: {why}");
            out.skipped.push((kind, why.to_string()));
            continue;
        };
        let params = attack.params();
        out.params.insert(kind.as_str().to_string(), params.clone());
        let key = ScoreCache::table_key(&model_hash, kind, &params);
        let mut fresh = 0;
        for sample in dataset.samples() {
            let skey = ScoreCache::sample_key(sample);
            let table = cache.table(&key)?;
            let score = match table.get(&skey) {
                Some(&s) => {
                    out.cached += 1;
                    Ok(s)
                }
                None => {
                    out.computed += 1;
                    match attack.score(target, sample) {
                        Ok(s) => {
                            table.insert(skey, s.score);
                            fresh += 1;
                            Ok(s.score)
                        }
                        Err(e) => Err(e.to_string()),
                    }
                }
            };
            out.rows.push(SuiteRow { sample_id: sample.id.clone(), attack: kind, label: sample.label, score });
        }
        if fresh > 0 {
            cache.flush(&key)?;
        }
        log::info!("attack {kind}: {} samples ({fresh} computed)", dataset.len());
    }
    Ok(out)
}

impl SuiteOutcome {
    pub fn scores(&self) -> Vec<AttackScore> {
        self.rows
            .iter()
            .filter_map(|r| {
                r.score.as_ref().ok().map(|&score| AttackScore { sample_id: r.sample_id.clone(), attack: r.attack, score })
            })
            .collect()
    }

    pub fn errors(&self) -> Vec<&SuiteRow> {
        self.rows.iter().filter(|r| r.score.is_err()).collect()
    }

    /// Scores of one attack split by label: `(members, non_members)`.
    pub fn split_scores(&self, attack: AttackKind) -> (Vec<f64>, Vec<f64>) {
        let mut m = Vec::new();
        let mut n = Vec::new();
        for r in self.rows.iter().filter(|r| r.attack == attack) {
            match (&r.score, r.label) {
                (Ok(s), Some(Label::Member)) => m.push(*s),
                (Ok(s), Some(Label::NonMember)) => n.push(*s),
                _ => {}
            }
        }
        (m, n)
    }

    pub fn report_rows(&self) -> Vec<ReportRow<'_>> {
        self.rows
            .iter()
            .map(|r| ReportRow { attack: r.attack.as_str(), score: r.score.as_ref().ok().copied(), label: r.label })
            .collect()
    }

    /// `sample_id,attack,score,label`; failed rows are left out (they are
    /// listed in the sidecar). Scores use the shortest round-trip decimal.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_id", "attack", "score", "label"]).expect("in-memory write");
        for r in &self.rows {
            if let Ok(s) = r.score {
                let label = r.label.map(|l| l.as_u8().to_string()).unwrap_or_default();
                w.write_record([r.sample_id.as_str(), r.attack.as_str(), &s.to_string(), &label]).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// Provenance record: model hash, attack parameters, skipped attacks,
    /// failed rows and library version, plus caller-supplied fields.
    pub fn sidecar(&self, extra: serde_json::Value) -> serde_json::Value {
        let errors: Vec<_> = self
            .errors()
            .into_iter()
            .map(|r| serde_json::json!({"sample_id": r.sample_id, "attack": r.attack, "error": r.score.as_ref().unwrap_err()}))
            .collect();
        let skipped: Vec<_> =
            self.skipped.iter().map(|(k, why)| serde_json::json!({"attack": k, "reason": why})).collect();
        let mut v = serde_json::json!({
            "model_hash": self.model_hash,
            "attack_params": self.params,
            "zlib_level": ZLIB_LEVEL,
            "rows": self.rows.len(),
            "computed": self.computed,
            "cached": self.cached,
            "skipped": skipped,
            "errors": errors,
            "library_version": crate::VERSION,
        });
        if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
            obj.extend(more);
        }
        v
    }
}

/// One parsed row of a score CSV.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub attack: AttackKind,
    pub score: f64,
    #[serde(deserialize_with = "label_field")]
    pub label: Option<Label>,
}

fn label_field<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Label>, D::Error> {
    let raw = String::deserialize(d)?;
    match raw.as_str() {
        "" => Ok(None),
        other => other
            .parse::<u8>()
            .ok()
            .and_then(Label::from_u8)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("bad label {other:?}"))),
    }
}

/// Parses a score CSV written by [`SuiteOutcome::to_csv`].
pub fn read_score_csv(raw: &str) -> Result<Vec<ScoreRecord>, String> {
    let mut r = csv::Reader::from_reader(raw.as_bytes());
    let header = r.headers().map_err(|e| e.to_string())?;
    if header != vec!["sample_id", "attack", "score", "label"] {
        return Err(format!("unexpected score CSV header {header:?}"));
    }
    r.deserialize().map(|row| row.map_err(|e| e.to_string())).collect()
}
