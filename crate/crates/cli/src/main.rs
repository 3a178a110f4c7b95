//! `memprobe`: pretrain a micro LM, inject members, train the probe, run the
//! attacks and write reports.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memprobe::attacks::ScoreCache;
use memprobe::corpus::{load_dataset, CorpusError, DatasetFormat, LabeledDataset};
use memprobe::experiment::{
    self, ExperimentConfig, ExperimentData, ExperimentError, InjectionCandidate, SweepAxis,
};
use memprobe::lm::{load_checkpoint, save_checkpoint, LmError, ModelState};
use memprobe::probe::{ProbeError, ProbeWeights};

#[derive(Parser, Debug)]
#[command(name = "memprobe", version, about = "Pre-training data detection by probing activations")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named seed override, e.g. `--seed model=7`. Repeatable.
    #[arg(long = "seed", value_name = "NAME=VALUE", global = true)]
    seeds: Vec<String>,
    /// Output directory (overrides `paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the target (and optional reference) model on the corpus.
    Pretrain,
    /// Inject the member half of the probe-training set and pick (lr, layer).
    Inject(InjectArgs),
    /// Train the probe on proxy activations.
    TrainProbe(TrainProbeArgs),
    /// Run every enabled attack on the evaluation set and report.
    Detect(DetectArgs),
    /// Repeat inject, probe and detect for every prompt template.
    AblateTemplates(AblateArgs),
    /// Vary one axis and report probe and baseline AUC.
    Sweep(SweepArgs),
    /// Render synthesis prompts and optionally query an endpoint.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct InjectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Unlabeled probe-training samples.
    #[arg(long)]
    members: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainProbeArgs {
    #[arg(long)]
    proxy: Option<PathBuf>,
    /// Labeled probe-training set written by `inject`.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    layer: Option<usize>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    probe: Option<PathBuf>,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Min-K% k (overrides `attacks.min_k_percent`).
    #[arg(long)]
    min_k: Option<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Template ids to run (default: `templates.ids`, else all registered).
    #[arg(long = "template")]
    templates: Vec<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// model_size, train_data_count or min_k.
    #[arg(long)]
    axis: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated values replacing the configured ones.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Seed dataset the exemplars are drawn from.
    #[arg(long)]
    input: PathBuf,
    /// New data points requested per prompt.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    prompts: Option<usize>,
}

/// Error carrying its exit code.
#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError { code: if e.is_numerical() { 3 } else { 2 }, message: e.to_string() }
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        ExperimentError::from(e).into()
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        ExperimentError::from(e).into()
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        ExperimentError::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.paths.out_dir();
    fs::create_dir_all(&out).map_err(|e| CliError::usage(format!("cannot create {}: {e}", out.display())))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let ctx = Ctx { cfg, out, overrides: overrides_record(&cli) };
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&ctx),
        Command::Inject(a) => cmd_inject(&ctx, a),
        Command::TrainProbe(a) => cmd_train_probe(&ctx, a),
        Command::Detect(a) => cmd_detect(&ctx, a),
        Command::AblateTemplates(a) => cmd_ablate(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Synth(a) => synth::cmd_synth(&ctx, a),
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    overrides: serde_json::Value,
}

impl Ctx {
    fn sidecar_extra(&self, command: &str) -> serde_json::Value {
        serde_json::json!({ "command": command, "cli_overrides": self.overrides })
    }
}

fn overrides_record(cli: &Cli) -> serde_json::Value {
    serde_json::json!({
        "config": cli.config.as_ref().map(|p| p.display().to_string()),
        "seed": cli.seeds,
        "set": cli.sets,
        "out": cli.out.as_ref().map(|p| p.display().to_string()),
    })
}

/// Parses `KEY=VALUE`; VALUE is read as a TOML value, falling back to a
/// plain string.
fn parse_assignment(raw: &str) -> CliResult<(String, toml::Value)> {
    let (key, value) =
        raw.split_once('=').ok_or_else(|| CliError::usage(format!("expected KEY=VALUE, got {raw:?}")))?;
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.trim().to_string(), parsed))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("cannot set {key}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let (mut table, base) = match &cli.config {
        Some(path) => {
            let raw = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            let table: toml::Table =
                raw.parse().map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
            (table, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for raw in &cli.sets {
        let (key, value) = parse_assignment(raw)?;
        set_path(&mut table, &key, value)?;
    }
    for raw in &cli.seeds {
        let (name, value) = parse_assignment(raw)?;
        if value.as_integer().is_none_or(|v| v < 0) {
            return Err(CliError::usage(format!("seed {name} must be a non-negative integer")));
        }
        set_path(&mut table, &format!("seeds.{name}"), value)?;
    }
    let mut cfg = ExperimentConfig::from_toml_value(table, &base)?;
    if let Some(out) = &cli.out {
        cfg.paths.out = Some(out.clone());
    }
    Ok(cfg.resolve()?)
}

fn write_text(path: &Path, body: &str) -> CliResult<()> {
    fs::write(path, body).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("json serializes") + "\n"))
}

fn read_json(path: &Path) -> CliResult<serde_json::Value> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// First of: explicit flag, configured path, default file in the output dir.
fn pick(flag: &Option<PathBuf>, configured: &Option<PathBuf>, default: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let p = flag.clone().or_else(|| configured.clone()).or(default).ok_or_else(|| CliError::usage(format!("no {what} given")))?;
    if !p.exists() {
        return Err(CliError::usage(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_labeled(path: &Path) -> CliResult<LabeledDataset> {
    Ok(load_dataset(path, DatasetFormat::Jsonl)?)
}

fn load_model(path: &Path) -> CliResult<ModelState> {
    Ok(load_checkpoint(path)?)
}

fn corpus_texts(cfg: &ExperimentConfig) -> CliResult<Vec<String>> {
    let path = pick(&None, &cfg.paths.corpus, None, "corpus")?;
    let ds = load_labeled(&path)?;
    if ds.is_empty() {
        return Err(CliError::usage(format!("corpus {} is empty", path.display())));
    }
    Ok(ds.into_samples().into_iter().map(|s| s.text).collect())
}

fn cmd_pretrain(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let corpus = corpus_texts(cfg)?;
    let (target, log) = experiment::pretrain_target(cfg, &corpus)?;
    let ckpt = ctx.out.join("target.ckpt");
    save_checkpoint(&target, &ckpt)?;
    let mut csv = String::from("step,loss\n");
    for s in &log {
        csv.push_str(&format!("{},{}\n", s.step, s.loss));
    }
    write_text(&ctx.out.join("train_log.csv"), &csv)?;
    let mut meta = serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "model_hash": target.content_hash(),
        "corpus_size": corpus.len(),
        "final_loss": log.last().map(|s| s.loss),
        "provenance": cfg.provenance(),
    });
    if let Some(reference) = experiment::pretrain_reference(cfg, &corpus)? {
        let rpath = ctx.out.join("reference.ckpt");
        save_checkpoint(&reference, &rpath)?;
        meta["reference_checkpoint"] = rpath.display().to_string().into();
        meta["reference_hash"] = reference.content_hash().into();
    }
    meta.as_object_mut().unwrap().extend(ctx.sidecar_extra("pretrain").as_object().unwrap().clone());
    write_json(&ctx.out.join("pretrain.json"), &meta)?;
    log::info!("wrote {}", ckpt.display());
    Ok(())
}

fn validation_set(cfg: &ExperimentConfig) -> CliResult<Option<LabeledDataset>> {
    match &cfg.paths.validation {
        Some(p) => Ok(Some(load_labeled(&pick(&None, &Some(p.clone()), None, "validation set")?)?)),
        None => Ok(None),
    }
}

fn cmd_inject(ctx: &Ctx, a: &InjectArgs) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let ckpt = pick(&a.checkpoint, &cfg.paths.checkpoint, Some(ctx.out.join("target.ckpt")), "checkpoint")?;
    let members_path = pick(&a.members, &cfg.paths.probe_train, None, "member file")?;
    let target = load_model(&ckpt)?;
    let unlabeled = load_labeled(&members_path)?;
    if unlabeled.is_empty() {
        return Err(CliError::usage(format!("member file {} is empty", members_path.display())));
    }
    let labeled = experiment::label_probe_train(cfg, &unlabeled)?;
    let validation = if cfg.eval.validation_ratio.is_some() {
        let eval = load_labeled(&pick(&None, &cfg.paths.eval, None, "evaluation set")?)?;
        experiment::eval_parts(cfg, &eval, None)?.0
    } else {
        validation_set(cfg)?
    };
    let template = cfg.probe_template();
    let inj = experiment::inject_and_select(cfg, &target, &labeled, validation.as_ref(), &template)?;
    let proxy_path = ctx.out.join("proxy.ckpt");
    save_checkpoint(&inj.proxy, &proxy_path)?;
    let labeled_path = ctx.out.join("probe_train_labeled.jsonl");
    labeled.write_jsonl(&labeled_path)?;
    write_text(&ctx.out.join("injection_log.csv"), &injection_csv(&inj.log))?;
    let mut meta = serde_json::json!({
        "proxy_checkpoint": proxy_path.display().to_string(),
        "probe_train_labeled": labeled_path.display().to_string(),
        "selected_lr": inj.lr,
        "selected_layer": inj.layer,
        "template": template.id(),
        "model_hash": target.content_hash(),
        "proxy_hash": inj.proxy.content_hash(),
        "candidates": inj.log,
        "provenance": cfg.provenance(),
    });
    meta.as_object_mut().unwrap().extend(ctx.sidecar_extra("inject").as_object().unwrap().clone());
    write_json(&ctx.out.join("inject.json"), &meta)?;
    log::info!("selected lr={} layer={}", inj.lr, inj.layer);
    Ok(())
}

fn injection_csv(log: &[InjectionCandidate]) -> String {
    let mut s = String::from("lr,layer,val_auc,selected\n");
    for c in log {
        let auc = c.val_auc.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", c.lr, c.layer, auc, c.selected));
    }
    s
}

fn cmd_train_probe(ctx: &Ctx, a: &TrainProbeArgs) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let proxy_path = pick(&a.proxy, &cfg.paths.proxy_checkpoint, Some(ctx.out.join("proxy.ckpt")), "proxy checkpoint")?;
    let train_path = pick(
        &a.train,
        &cfg.paths.probe_train_labeled,
        Some(ctx.out.join("probe_train_labeled.jsonl")),
        "labeled probe-training set",
    )?;
    let layer = match a.layer {
        Some(l) => l,
        None => {
            let meta = ctx.out.join("inject.json");
            match meta.exists().then(|| read_json(&meta)).transpose()? {
                Some(v) => v["selected_layer"].as_u64().map(|l| l as usize).ok_or_else(|| {
                    CliError::usage(format!("{} has no selected_layer", meta.display()))
                })?,
                None => cfg.candidate_layers()[0],
            }
        }
    };
    let proxy = load_model(&proxy_path)?;
    let train = load_labeled(&train_path)?;
    let probe = experiment::train_probe_on(cfg, &proxy, &train, layer, &cfg.probe_template())?;
    let path = ctx.out.join("probe.json");
    probe.save(&path)?;
    let mut meta = serde_json::json!({
        "probe": path.display().to_string(),
        "proxy_checkpoint": proxy_path.display().to_string(),
        "model_hash": proxy.content_hash(),
        "train_set": train_path.display().to_string(),
        "train_size": train.len(),
        "layer": layer,
        "template": cfg.probe_template().id(),
        "iterations": probe.iterations,
        "converged": probe.converged,
        "provenance": cfg.provenance(),
    });
    meta.as_object_mut().unwrap().extend(ctx.sidecar_extra("train-probe").as_object().unwrap().clone());
    write_json(&ctx.out.join("train_probe.json"), &meta)?;
    log::info!("probe on layer {layer}: {} iterations, converged={}", probe.iterations, probe.converged);
    Ok(())
}

fn cmd_detect(ctx: &Ctx, a: &DetectArgs) -> CliResult<()> {
    let mut cfg = ctx.cfg.clone();
    if let Some(k) = a.min_k {
        cfg.attacks.min_k_percent = k;
        cfg.validate()?;
    }
    let ckpt = pick(&a.checkpoint, &cfg.paths.checkpoint, Some(ctx.out.join("target.ckpt")), "checkpoint")?;
    let eval_path = pick(&a.eval, &cfg.paths.eval, None, "evaluation set")?;
    let target = load_model(&ckpt)?;
    let eval = load_labeled(&eval_path)?;
    let (_, test) = experiment::eval_parts(&cfg, &eval, None)?;
    let probe_path = a.probe.clone().or_else(|| cfg.paths.probe.clone()).or_else(|| {
        let p = ctx.out.join("probe.json");
        p.exists().then_some(p)
    });
    let probe = match &probe_path {
        Some(p) => Some((ProbeWeights::load(&pick(&Some(p.clone()), &None, None, "probe artifact")?)?, cfg.probe_template())),
        None => None,
    };
    let ref_path = a.reference.clone().or_else(|| cfg.paths.reference_checkpoint.clone()).or_else(|| {
        let p = ctx.out.join("reference.ckpt");
        p.exists().then_some(p)
    });
    let reference = match &ref_path {
        Some(p) => Some(load_model(&pick(&Some(p.clone()), &None, None, "reference checkpoint")?)?),
        None => None,
    };
    let mut cache = if cfg.attacks.cache { ScoreCache::with_dir(ctx.out.join("cache")) } else { ScoreCache::in_memory() };
    let det = experiment::detect(&cfg, &target, probe, reference.clone(), &test, &mut cache)?;
    write_text(&ctx.out.join("scores.csv"), &det.outcome.to_csv())?;
    let extra = serde_json::json!({
        "command": "detect",
        "cli_overrides": ctx.overrides,
        "eval_set": test.name(),
        "eval_size": test.len(),
        "probe_artifact": probe_path.map(|p| p.display().to_string()),
        "template": cfg.probe_template().id(),
        "reference_hash": reference.map(|r| r.content_hash()),
    });
    write_json(&ctx.out.join("scores.json"), &det.sidecar(&cfg, extra))?;
    write_text(&ctx.out.join("report.csv"), &det.report.to_csv())?;
    write_text(&ctx.out.join("report.txt"), &det.report.to_text())?;
    write_json(&ctx.out.join("roc.json"), &det.report.roc_json())?;
    print!("{}", det.report.to_text());
    Ok(())
}

fn experiment_data(ctx: &Ctx, need_corpus: bool) -> CliResult<ExperimentData> {
    let cfg = &ctx.cfg;
    let corpus = if need_corpus { corpus_texts(cfg)? } else { Vec::new() };
    let eval = load_labeled(&pick(&None, &cfg.paths.eval, None, "evaluation set")?)?;
    let probe_train = load_labeled(&pick(&None, &cfg.paths.probe_train, None, "probe-training set")?)?;
    Ok(ExperimentData { corpus, eval, probe_train, validation: validation_set(cfg)? })
}

fn cmd_ablate(ctx: &Ctx, a: &AblateArgs) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let ids = if a.templates.is_empty() { cfg.templates.ids.clone() } else { a.templates.clone() };
    let all = cfg.template_registry();
    let registry = if ids.is_empty() { all } else { all.select(&ids)? };
    if registry.is_empty() {
        return Err(CliError::usage("template registry is empty"));
    }
    let ckpt = pick(&a.checkpoint, &cfg.paths.checkpoint, Some(ctx.out.join("target.ckpt")), "checkpoint")?;
    let target = load_model(&ckpt)?;
    let data = experiment_data(ctx, false)?;
    let rows = experiment::ablate_templates(cfg, &target, &data, &registry)?;
    let mut csv = String::from("template,auc,lr,layer\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.template, memprobe::eval::format_percent(r.auc), r.lr, r.layer));
    }
    write_text(&ctx.out.join("templates.csv"), &csv)?;
    let mut meta = serde_json::json!({ "rows": rows, "model_hash": target.content_hash(), "provenance": cfg.provenance() });
    meta.as_object_mut().unwrap().extend(ctx.sidecar_extra("ablate-templates").as_object().unwrap().clone());
    write_json(&ctx.out.join("templates.json"), &meta)?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, a: &SweepArgs) -> CliResult<()> {
    let axis: SweepAxis = a.axis.parse().map_err(CliError::usage)?;
    let mut cfg = ctx.cfg.clone();
    if !a.values.is_empty() {
        let bad = |v: &str| CliError::usage(format!("bad sweep value {v:?}"));
        match axis {
            SweepAxis::ModelSize => {
                cfg.sweep.model_size = a.values.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?
            }
            SweepAxis::TrainDataCount => {
                cfg.sweep.train_data_count =
                    a.values.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?
            }
            SweepAxis::MinK => {
                cfg.sweep.min_k = a.values.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_, _>>()?
            }
        }
    }
    let needs_corpus = axis == SweepAxis::ModelSize
        || (a.checkpoint.is_none() && cfg.paths.checkpoint.is_none() && !ctx.out.join("target.ckpt").exists());
    let target = if axis == SweepAxis::ModelSize {
        None
    } else {
        match a.checkpoint.clone().or_else(|| cfg.paths.checkpoint.clone()).or_else(|| {
            let p = ctx.out.join("target.ckpt");
            p.exists().then_some(p)
        }) {
            Some(p) => Some(load_model(&pick(&Some(p), &None, None, "checkpoint")?)?),
            None => None,
        }
    };
    let data = experiment_data(ctx, needs_corpus)?;
    let rows = experiment::sweep(&cfg, axis, target.as_ref(), &data)?;
    let mut csv = String::from("axis,value,method,auc,seeds\n");
    for r in &rows {
        let axis = serde_json::to_value(r.axis).unwrap();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            axis.as_str().unwrap(),
            r.value,
            r.method,
            memprobe::eval::format_percent(r.auc),
            r.seeds
        ));
    }
    let stem = format!("sweep_{}", serde_json::to_value(axis).unwrap().as_str().unwrap());
    write_text(&ctx.out.join(format!("{stem}.csv")), &csv)?;
    let mut meta = serde_json::json!({
        "rows": rows,
        "model_hash": target.as_ref().map(|t| t.content_hash()),
        "sweep": cfg.sweep,
        "provenance": cfg.provenance(),
    });
    meta.as_object_mut().unwrap().extend(ctx.sidecar_extra("sweep").as_object().unwrap().clone());
    write_json(&ctx.out.join(format!("{stem}.json")), &meta)?;
    print!("{csv}");
    Ok(())
}
