//! Exit criteria. Each test writes one `PASS`/`FAIL` line to stderr
//! (uncaptured) before asserting.

mod common;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use memprobe::attacks::{
    lowercase_attack, loss_attack, min_k_prob, neighbor_attack, smaller_model_attack, NeighborSet,
};
use memprobe::corpus::{load_dataset, toy::sentences, DatasetFormat};
use memprobe::eval::{auc, format_percent, roc_curve, tpr_at_fpr, trapezoid_area};
use memprobe::experiment::{self, ExperimentConfig, ToySpec};
use memprobe::lm::{
    batch_loss_and_grad, load_checkpoint, loss, pretrain, save_checkpoint, tokenize, ActivationVector, ModelConfig,
    ModelState, TrainHyper,
};
use memprobe::probe::{score, train_probe};
use memprobe::{Label, LabeledDataset, ProbeHyper, ProbeWeights, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// A1
const A1_PERMUTATIONS: usize = 1000;
const A1_MAX_P: f64 = 0.01;
const A1_MAX_RUNTIME: Duration = Duration::from_secs(15 * 60);
// A2
const A2_SEEDS: [u64; 3] = [0, 1, 2];
// A3
const A3_STEP: f64 = 1e-4;
const A3_MAX_REL_ERR: f64 = 1e-4;
// A4
const A4_TOL: f64 = 1e-12;
// A5
const A5_TEXTS: usize = 50;
const A5_TOL: f64 = 1e-9;
// A6
const A6_PER_CLASS: usize = 100;
const A6_MAX_REL_DIST: f64 = 1e-3;

fn report(id: &str, pass: bool, detail: &str) {
    let line = format!("{id} {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Pretrain on ~2,000 sentences, 200/200 eval, 200 probe-training samples.
const A1_CONFIG: &str = r#"
fpr_targets = [0.05]

[model]
n_layers = 2
d_model = 64
n_heads = 4
d_ff = 256
max_seq_len = 192

[train]
steps = 300
batch_size = 16
lr = 0.003
log_every = 10

[reference_model]
n_layers = 1
d_model = 32
n_heads = 4
d_ff = 128
max_seq_len = 192

[paths]
corpus = "corpus.jsonl"
eval = "eval.jsonl"
probe_train = "probe_train.jsonl"

[probe]
layer = "grid"
template = "default"

# Inside the stable range of two Adam steps.
[injection]
lrs = [0.001, 0.003]

[attacks]
permutations = 1000
cache = false

[eval]
validation_ratio = [1, 4]
"#;

struct A1Run {
    root: PathBuf,
    out: PathBuf,
    elapsed: Duration,
}

fn a1_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_a1")
}

fn run_a1_pipeline(root: &Path, out: &str) -> Duration {
    let start = Instant::now();
    for cmd in ["pretrain", "inject", "train-probe", "detect"] {
        let o = run(root, &["--config", "config.toml", "--out", out, cmd]);
        assert_ok(&o);
    }
    start.elapsed()
}

fn a1_run() -> &'static A1Run {
    static RUN: OnceLock<A1Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = a1_root();
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        write_data(&root, &ToySpec::default());
        fs::write(root.join("config.toml"), A1_CONFIG).unwrap();
        let elapsed = run_a1_pipeline(&root, "run1");
        A1Run { out: root.join("run1"), root, elapsed }
    })
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn report_auc(sidecar: &serde_json::Value, attack: &str) -> f64 {
    sidecar["report"]["results"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["attack"] == attack)
        .and_then(|r| r["auc"].as_f64())
        .unwrap_or_else(|| panic!("no AUC for {attack}"))
}

#[test]
fn a1_probe_beats_loss_end_to_end() {
    let run = a1_run();
    let side = read_json(&run.out.join("scores.json"));
    let cfg = &side["attacks"];
    assert_eq!(cfg["permutations"].as_u64(), Some(A1_PERMUTATIONS as u64));
    let corpus = fs::read_to_string(run.root.join("corpus.jsonl")).unwrap().lines().count();
    let eval = load_dataset(&run.root.join("eval.jsonl"), DatasetFormat::Jsonl).unwrap();
    let model = &side["model"];
    let shape_ok = model["n_layers"].as_u64().unwrap() <= 4 && model["d_model"].as_u64().unwrap() <= 128;
    let data_ok = corpus == 2000 && eval.member_count() == 200 && eval.non_member_count() == 200;
    let attacks_run = side["report"]["results"].as_array().unwrap().len();

    let probe = report_auc(&side, "probe");
    let loss = report_auc(&side, "loss");
    let p = side["pvalues"]["probe"].as_f64().unwrap();
    let pass = shape_ok
        && data_ok
        && attacks_run == 7
        && probe > 0.5
        && p < A1_MAX_P
        && probe >= loss
        && run.elapsed <= A1_MAX_RUNTIME;
    report(
        "A1",
        pass,
        &format!(
            "probe AUC {} (p={p:.4}), loss AUC {}, {attacks_run} attacks, {:.0}s",
            format_percent(probe),
            format_percent(loss),
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(shape_ok && data_ok && attacks_run == 7, "A1 setup");
    assert!(run.elapsed <= A1_MAX_RUNTIME, "A1 runtime {:?}", run.elapsed);
    assert!(probe > 0.5 && p < A1_MAX_P, "probe AUC {probe} p {p}");
    assert!(probe >= loss, "probe AUC {probe} below loss AUC {loss}");
}

#[test]
fn a2_injection_lowers_member_loss() {
    let run = a1_run();
    let root = &run.root;
    let target = load_checkpoint(&run.out.join("target.ckpt")).unwrap();
    let probe_train = load_dataset(&root.join("probe_train.jsonl"), DatasetFormat::Jsonl).unwrap();
    let eval = load_dataset(&root.join("eval.jsonl"), DatasetFormat::Jsonl).unwrap();
    let base = ExperimentConfig::from_toml_str(A1_CONFIG, root).unwrap();
    let raw_loss = |m: &ModelState, s: &[Sample]| s.iter().map(|x| loss(m, &x.text).unwrap()).sum::<f64>() / s.len() as f64;

    let mut details = Vec::new();
    let mut pass = true;
    for seed in A2_SEEDS {
        let mut cfg = base.clone();
        cfg.seeds.insert("split".into(), seed);
        let cfg = cfg.resolve().unwrap();
        let labeled = experiment::label_probe_train(&cfg, &probe_train).unwrap();
        let (validation, _) = experiment::eval_parts(&cfg, &eval, None).unwrap();
        let inj =
            experiment::inject_and_select(&cfg, &target, &labeled, validation.as_ref(), &cfg.probe_template()).unwrap();
        let members = labeled.members();
        // Loss of the injected input: the rendered prompt around each text.
        let template = cfg.probe_template();
        let injected = |m: &ModelState, x: &Sample| loss(m, &template.render_text(&x.text)).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // Held-out pool: texts never trained on, neither in pretraining nor in
        // the injection batch.
        let pool: Vec<Sample> = labeled.non_members().into_iter().chain(eval.non_members()).collect();
        let matched = match_by_loss(
            &members.iter().map(|x| injected(&target, x)).collect::<Vec<_>>(),
            &pool.iter().map(|x| injected(&target, x)).collect::<Vec<_>>(),
        );
        let held: Vec<&Sample> = matched.iter().map(|&j| &pool[j]).collect();
        let before = mean(&members.iter().map(|x| injected(&target, x)).collect::<Vec<_>>());
        let held_before = mean(&held.iter().map(|x| injected(&target, x)).collect::<Vec<_>>());
        let after = mean(&members.iter().map(|x| injected(&inj.proxy, x)).collect::<Vec<_>>());
        let held_after = mean(&held.iter().map(|x| injected(&inj.proxy, x)).collect::<Vec<_>>());
        let half_after = mean(&labeled.non_members().iter().map(|x| injected(&inj.proxy, x)).collect::<Vec<_>>());
        let ok = after < before && after < held_after;
        pass &= ok;
        details.push(format!(
            "seed {seed} lr {}: members {before:.4}->{after:.4}, matched held-out {held_before:.4}->{held_after:.4} (unmatched half {half_after:.4}, raw text {:.4}->{:.4})",
            inj.lr,
            raw_loss(&target, &members),
            raw_loss(&inj.proxy, &members)
        ));
    }
    report("A2", pass, &details.join("; "));
    assert!(pass, "{details:?}");
}

/// Greedy nearest-loss matching without replacement: for each member (in
/// order) the unused pool index with the closest pre-injection loss.
fn match_by_loss(members: &[f64], pool: &[f64]) -> Vec<usize> {
    assert!(pool.len() >= members.len());
    let mut used = vec![false; pool.len()];
    members
        .iter()
        .map(|m| {
            let j = (0..pool.len())
                .filter(|&j| !used[j])
                .min_by(|&a, &b| (pool[a] - m).abs().total_cmp(&(pool[b] - m).abs()))
                .unwrap();
            used[j] = true;
            j
        })
        .collect()
}

#[test]
fn a3_gradients_match_finite_differences() {
    let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 16, seed: 11, ..Default::default() };
    let mut m = ModelState::init(cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for p in m.params_mut() {
        *p += r.random_range(-0.05..0.05);
    }
    let seqs = [tokenize("Owls fly."), tokenize("7 red ants")];
    let batch: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let mut analytic = vec![0.0; m.num_params()];
    batch_loss_and_grad(&m, &batch, &mut analytic);
    let mut scratch = vec![0.0; m.num_params()];
    let mut numeric = vec![0.0; m.num_params()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = m.params()[i];
        m.params_mut()[i] = orig + A3_STEP;
        let up = batch_loss_and_grad(&m, &batch, &mut scratch);
        m.params_mut()[i] = orig - A3_STEP;
        let down = batch_loss_and_grad(&m, &batch, &mut scratch);
        m.params_mut()[i] = orig;
        *slot = (up - down) / (2.0 * A3_STEP);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut worst = (String::new(), 0.0f64);
    for spec in m.tensors() {
        let range = spec.range();
        let (a, n) = (&analytic[range.clone()], &numeric[range]);
        let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(n));
        let rel = if scale < 1e-10 { norm(&diff) } else { norm(&diff) / scale };
        if rel > worst.1 {
            worst = (spec.name.clone(), rel);
        }
    }
    let pass = worst.1 < A3_MAX_REL_ERR;
    report("A3", pass, &format!("{} tensors, worst relative error {:.2e} ({})", m.tensors().len(), worst.1, worst.0));
    assert!(pass);
}

fn pairwise_auc(m: &[f64], n: &[f64]) -> f64 {
    let mut total = 0.0;
    for &a in m {
        for &b in n {
            total += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    total / (m.len() * n.len()) as f64
}

#[test]
fn a4_auc_matches_pairwise_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        // Coarse grid values force ties within and across classes.
        let draw = |r: &mut ChaCha8Rng, shift: i32| -> Vec<f64> {
            (0..100).map(|_| (r.random_range(0..25) + shift) as f64 / 4.0).collect()
        };
        let m = draw(&mut r, trial % 5);
        let n = draw(&mut r, 0);
        let got = auc(&m, &n).unwrap();
        let oracle = pairwise_auc(&m, &n);
        let area = trapezoid_area(&roc_curve(&m, &n).unwrap());
        worst = worst.max((got - oracle).abs()).max((area - got).abs());
    }
    let pass = worst <= A4_TOL;
    report("A4", pass, &format!("20 tied sets of 100+100, max deviation {worst:.1e}"));
    assert!(pass);
}

#[test]
fn a5_definitional_identities() {
    let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 128, seed: 2, ..Default::default() };
    let model = pretrain(cfg.clone(), &sentences(80, 4), &TrainHyper { steps: 20, batch_size: 8, ..Default::default() }).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(50);
    let mut min_k_dev: f64 = 0.0;
    for i in 0..A5_TEXTS {
        let len = r.random_range(1..100);
        let text: String = (0..len).map(|_| r.random_range(0x20u8..0x7f) as char).collect();
        let s = Sample::new(format!("t{i}"), text, None).unwrap();
        let mk = min_k_prob(&model, &s, 100.0).unwrap().score;
        min_k_dev = min_k_dev.max((mk + loss(&model, &s.text).unwrap()).abs());
    }
    let s = Sample::from_text("the lazy dog sleeps by the fire.", None).unwrap();
    let own = NeighborSet { original_id: s.id.clone(), neighbors: vec![s.text.clone(); 5], generator_seed: 0 };
    let neighbor = neighbor_attack(&model, &s, &own).unwrap().score;
    let lower = lowercase_attack(&model, &s).unwrap().score;
    let smaller = smaller_model_attack(&model, &model.clone(), &s).unwrap().score;
    let zero = ModelState::zeros(cfg.clone()).unwrap();
    let uniform = loss_attack(&zero, &s).unwrap().score;
    let uniform_dev = (-uniform - (cfg.vocab_size as f64).ln()).abs();

    let pass = min_k_dev < A5_TOL && neighbor == 0.0 && lower == -1.0 && smaller == -1.0 && uniform_dev < A5_TOL;
    report(
        "A5",
        pass,
        &format!(
            "min_k(100)+loss {min_k_dev:.1e}, self-neighbors {neighbor}, lowercase {lower}, same reference {smaller}, zero-model |loss-ln V| {uniform_dev:.1e}"
        ),
    );
    assert!(pass);
}

fn blobs(seed: u64) -> Vec<(ActivationVector, Label)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (c, label) in [(1.5, Label::Member), (-1.5, Label::NonMember)] {
        for i in 0..A6_PER_CLASS {
            let values = vec![c + r.random_range(-1.0..1.0), c + r.random_range(-1.0..1.0)];
            out.push((ActivationVector { values, layer: 1, source_sample_id: format!("{c}-{i}") }, label));
        }
    }
    out
}

#[test]
fn a6_probe_training() {
    let data = blobs(6);
    let probe = train_probe(&data, &ProbeHyper::default()).unwrap();
    let scored: Vec<(f64, Label)> = data.iter().map(|(x, l)| (score(&probe, x).unwrap(), *l)).collect();
    let accuracy = scored.iter().filter(|(s, l)| (*s >= 0.5) == l.is_member()).count() as f64 / data.len() as f64;
    let m: Vec<f64> = scored.iter().filter(|(_, l)| l.is_member()).map(|(s, _)| *s).collect();
    let n: Vec<f64> = scored.iter().filter(|(_, l)| !l.is_member()).map(|(s, _)| *s).collect();
    let train_auc = auc(&m, &n).unwrap();

    let hyper = ProbeHyper { lambda: 0.05, tol: 1e-7, ..Default::default() };
    let a = train_probe(&data, &hyper).unwrap();
    let b = train_probe(&data, &ProbeHyper { init_seed: Some(31), init_scale: 2.0, ..hyper }).unwrap();
    let flat = |p: &ProbeWeights| p.w.iter().copied().chain([p.bias]).collect::<Vec<f64>>();
    let (fa, fb) = (flat(&a), flat(&b));
    let dist = fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let rel = dist / fa.iter().map(|x| x * x).sum::<f64>().sqrt();

    let pass = accuracy == 1.0 && train_auc == 1.0 && rel < A6_MAX_REL_DIST;
    report("A6", pass, &format!("accuracy {accuracy}, AUC {train_auc}, init-to-init relative distance {rel:.1e}"));
    assert!(pass);
}

/// Max TPR over thresholds `t` (every score, plus +inf) with
/// FPR(score >= t) <= target.
fn sweep_oracle(m: &[f64], n: &[f64], target: f64) -> f64 {
    let mut best: f64 = 0.0;
    for t in m.iter().chain(n).copied().chain([f64::INFINITY]) {
        let fpr = n.iter().filter(|&&s| s >= t).count() as f64 / n.len() as f64;
        let tpr = m.iter().filter(|&&s| s >= t).count() as f64 / m.len() as f64;
        if fpr <= target {
            best = best.max(tpr);
        }
    }
    best
}

#[test]
fn a7_tpr_at_fpr_matches_threshold_sweep() {
    let sets: [(Vec<f64>, Vec<f64>); 3] = [
        (vec![3.0, 2.0], vec![2.5, 1.0]),
        (vec![0.9, 0.8, 0.8, 0.4, 0.3], vec![0.8, 0.5, 0.4, 0.1, 0.05]),
        (
            vec![5.0, 4.5, 4.5, 4.0, 3.0, 2.5, 2.0, 1.5, 1.0, 0.5],
            vec![4.5, 3.5, 3.0, 2.0, 2.0, 1.0, 0.5, 0.0, -1.0, -2.0],
        ),
    ];
    assert_eq!(tpr_at_fpr(&sets[0].0, &sets[0].1, 0.05).unwrap(), 0.5);
    let mut mismatches = Vec::new();
    let mut checks = 0;
    for (i, (m, n)) in sets.iter().enumerate() {
        for target in [0.05, 0.1, 0.2, 0.25, 0.5, 0.75] {
            checks += 1;
            let got = tpr_at_fpr(m, n, target).unwrap();
            let want = sweep_oracle(m, n, target);
            if got != want {
                mismatches.push(format!("set {i} @ {target}: {got} vs {want}"));
            }
        }
    }
    let pass = mismatches.is_empty();
    report("A7", pass, &format!("{checks} checks on 3 sets, [3,2]/[2.5,1] -> 0.5 at 0.05; mismatches {mismatches:?}"));
    assert!(pass);
}

#[test]
fn a8_reruns_are_byte_identical_with_provenance() {
    let first = a1_run();
    let _ = fs::remove_dir_all(first.root.join("run2"));
    run_a1_pipeline(&first.root, "run2");
    let second = first.root.join("run2");
    let mut differing = Vec::new();
    for f in ["scores.csv", "target.ckpt", "reference.ckpt", "proxy.ckpt", "probe.json", "report.csv"] {
        if fs::read(first.out.join(f)).unwrap() != fs::read(second.join(f)).unwrap() {
            differing.push(f);
        }
    }
    let mut missing = Vec::new();
    for f in ["pretrain.json", "inject.json", "train_probe.json", "scores.json"] {
        let v = read_json(&second.join(f));
        let seeds = if v["seeds"].is_object() { &v["seeds"] } else { &v["provenance"]["seeds"] };
        let has_hash = v["model_hash"].as_str().is_some_and(|h| h.len() == 64);
        if !has_hash || !seeds.is_object() || seeds.as_object().unwrap().is_empty() {
            missing.push(f);
        }
    }
    let pass = differing.is_empty() && missing.is_empty();
    report("A8", pass, &format!("rerun differing files {differing:?}, sidecars lacking hash/seeds {missing:?}"));
    assert!(pass);
}

#[test]
fn a9_format_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 64, seed: 9, ..Default::default() };
    let model = pretrain(cfg, &sentences(20, 9), &TrainHyper { steps: 5, batch_size: 4, ..Default::default() }).unwrap();
    let model = model.rounded_to_f32();
    let ck = dir.path().join("m.ckpt");
    save_checkpoint(&model, &ck).unwrap();
    let ckpt_ok = load_checkpoint(&ck).unwrap() == model;

    let data = blobs(9);
    let probe = train_probe(&data, &ProbeHyper { standardize: true, ..Default::default() }).unwrap();
    let pj = dir.path().join("probe.json");
    probe.save(&pj).unwrap();
    let back = ProbeWeights::load(&pj).unwrap();
    let probe_ok = back == probe && back.w.iter().zip(&probe.w).all(|(a, b)| a.to_bits() == b.to_bits());

    let samples = vec![
        Sample::new("m1", "Member text, with \"quotes\".", Some(Label::Member)).unwrap(),
        Sample::new("n1", "tab\tand ünïcode", Some(Label::NonMember)).unwrap(),
        Sample::new("u1", "unlabeled", None).unwrap(),
    ];
    let jl = dir.path().join("d.jsonl");
    LabeledDataset::new("d", samples.clone()).unwrap().write_jsonl(&jl).unwrap();
    let jsonl_ok = load_dataset(&jl, DatasetFormat::Jsonl).unwrap().samples() == &samples[..];

    let rendered = format_percent(0.698);
    let pass = ckpt_ok && probe_ok && jsonl_ok && rendered == "69.8";
    report(
        "A9",
        pass,
        &format!("checkpoint {ckpt_ok}, probe {probe_ok}, jsonl {jsonl_ok}, 0.698 renders as {rendered}"),
    );
    assert!(pass);
}
