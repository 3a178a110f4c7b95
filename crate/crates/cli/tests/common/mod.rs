#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memprobe::experiment::{toy_data, ToySpec};
use memprobe::{LabeledDataset, Sample};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_memprobe"));
    c.env("RUST_LOG", "warn").env_remove("MIA_SYNTH_ENDPOINT").env_remove("MIA_SYNTH_TOKEN");
    c
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn assert_ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

/// Writes toy corpus, eval and probe-training JSONL into `dir`.
pub fn write_data(dir: &Path, spec: &ToySpec) {
    let data = toy_data(spec).unwrap();
    let corpus: Vec<Sample> =
        data.corpus.iter().enumerate().map(|(i, t)| Sample::new(format!("c{i:04}"), t.clone(), None).unwrap()).collect();
    LabeledDataset::new("corpus", corpus).unwrap().write_jsonl(&dir.join("corpus.jsonl")).unwrap();
    data.eval.write_jsonl(&dir.join("eval.jsonl")).unwrap();
    data.probe_train.write_jsonl(&dir.join("probe_train.jsonl")).unwrap();
}

/// Tiny, fast configuration over the files written by [`write_data`].
pub const TINY_CONFIG: &str = r#"
[model]
n_layers = 2
d_model = 16
n_heads = 2
d_ff = 32
max_seq_len = 160

[train]
steps = 20
batch_size = 8
lr = 0.003

[reference_model]
n_layers = 1
d_model = 8
n_heads = 2
d_ff = 16
max_seq_len = 160

[paths]
corpus = "corpus.jsonl"
eval = "eval.jsonl"
probe_train = "probe_train.jsonl"
out = "out"

[probe]
layer = 1

[probe.hyper]
max_iter = 200

[injection]
lrs = [0.001]

[attacks]
neighbor_count = 4
permutations = 50
"#;

pub fn tiny_spec() -> ToySpec {
    ToySpec { corpus_size: 120, eval_members: 20, eval_non_members: 20, probe_train: 20, seed: 0 }
}

/// A temp dir holding the tiny data set and `config.toml`.
pub fn tiny_workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), &tiny_spec());
    let cfg = dir.path().join("config.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    (dir, cfg)
}
