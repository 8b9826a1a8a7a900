//! Training, sampling, evaluation and synthetic-data commands behind the
//! `differ` binary. Each command is a plain function so tests can drive it
//! without a subprocess.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use differ::ensemble::{aggregate, ensemble_samples, evaluate, ranking_report, Aggregate, EvalSummary, Member, SampleOptions, Truth};
use differ::net::{load_checkpoint, save_checkpoint, Model, NetError};
use differ::smiles::{parse_smiles, SmilesError, Vocab};
use differ::train::{
    build_vocab, dataset_text, fingerprint, load_dataset, parse_dataset, synth_dataset, EpochMetrics, ReactionRecord, RunMode, TrainError,
    Trainer,
};
use serde::Serialize;

pub use config::RunConfig;

/// Overrides the output directory of `train`, `eval` and `synth`.
pub const OUT_ENV: &str = "DIFFER_OUT";

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,L_MSE,L_VLB,L_len,total";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVAL_FILE: &str = "eval.tsv";
pub const EVAL_DETAIL_FILE: &str = "eval-reactions.tsv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input: config, paths, SMILES, datasets. Exit code 1.
    #[error("{0}")]
    User(String),
    /// Anything else. Exit code 2.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Dataset(_) | TrainError::Smiles(_) | TrainError::Io(_) => CliError::User(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Checkpoint(_) | NetError::Io(_) => CliError::User(format!("checkpoint: {e}")),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<SmilesError> for CliError {
    fn from(e: SmilesError) -> Self {
        CliError::User(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::User(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// `explicit` if given, else the environment override, else `fallback`.
pub fn output_dir(explicit: Option<&Path>, fallback: &Path) -> PathBuf {
    match (explicit, std::env::var_os(OUT_ENV)) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(v)) if !v.is_empty() => PathBuf::from(v),
        _ => fallback.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mse: f64,
    pub vlb: f64,
    pub len: f64,
    pub total: f64,
}

impl From<EpochMetrics> for EpochRow {
    fn from(m: EpochMetrics) -> Self {
        EpochRow { epoch: m.epoch, mse: m.mse, vlb: m.vlb, len: m.len, total: m.total }
    }
}

/// Everything needed to rerun a training job and check it reproduced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub mode: String,
    pub dataset_fingerprint: String,
    pub train_records: usize,
    pub heldout_records: usize,
    pub vocab_size: usize,
    pub parameters: usize,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<EpochRow>,
}

pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.mse, r.vlb, r.len, r.total);
    }
    out
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

/// Loads the configured dataset and splits off the held-out tail.
pub fn load_records(cfg: &RunConfig) -> Result<(Vec<ReactionRecord>, Vec<ReactionRecord>, String), CliError> {
    let records = match &cfg.train {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
            let text = String::from_utf8(bytes).map_err(|_| CliError::User(format!("{} is not UTF-8", path.display())))?;
            parse_dataset(&text)?.records
        }
        None => synth_dataset(cfg.synth_records, cfg.synth_seed),
    };
    if cfg.holdout >= records.len() {
        return Err(CliError::User(format!("holdout of {} leaves no training records out of {}", cfg.holdout, records.len())));
    }
    let hash = fingerprint(dataset_text(&records)?.as_bytes());
    let split = records.len() - cfg.holdout;
    let mut train = records;
    let held = train.split_off(split);
    Ok((train, held, hash))
}

fn checkpoint_extra(vocab: &Vocab, cfg: &RunConfig, epoch: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("vocab".to_string(), vocab.to_text()),
        ("mode".to_string(), cfg.mode.clone()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("epoch".to_string(), epoch.to_string()),
    ])
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out: PathBuf,
    pub manifest: RunManifest,
    pub trainer: Trainer,
}

/// Trains one model. Writes a checkpoint and the metrics file after every
/// epoch, the held-out records (if any) and a manifest into the output dir.
pub fn cmd_train(cfg: &RunConfig, out_override: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let out = output_dir(out_override, &cfg.out);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let (train, held, hash) = load_records(cfg)?;
    if !held.is_empty() {
        write_file(&out.join("heldout.rxn"), &dataset_text(&held)?)?;
    }
    let vocab = build_vocab(&train, cfg.seed)?;
    let model = Model::new(cfg.model_config(vocab.len())?, cfg.seed)?;
    let mut trainer = Trainer::new(model, vocab, cfg.train_config()?)?;
    let mut manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        mode: cfg.mode()?.name().to_string(),
        dataset_fingerprint: hash,
        train_records: train.len(),
        heldout_records: held.len(),
        vocab_size: trainer.vocab.len(),
        parameters: trainer.model.parameter_count(),
        checkpoints: Vec::new(),
        metrics: Vec::new(),
    };
    log::info!("training {} parameters on {} records, K = {}", manifest.parameters, train.len(), manifest.vocab_size);
    for _ in 0..cfg.epochs {
        let m = trainer.epoch(&train)?;
        log::info!("epoch {}: mse {:.5} vlb {:.5} len {:.4} total {:.4}", m.epoch, m.mse, m.vlb, m.len, m.total);
        let name = checkpoint_name(m.epoch);
        save_checkpoint(&out.join(&name), &trainer.model, &checkpoint_extra(&trainer.vocab, cfg, m.epoch))?;
        manifest.checkpoints.push(PathBuf::from(name));
        manifest.metrics.push(m.into());
        write_file(&out.join(METRICS_FILE), &metrics_csv(&manifest.metrics))?;
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&out.join(MANIFEST_FILE), &(json + "\n"))?;
    Ok(TrainOutcome { out, manifest, trainer })
}

/// Reads a checkpoint written by `cmd_train` back into an ensemble member.
pub fn load_member(path: &Path) -> Result<Member, CliError> {
    let ck = load_checkpoint(path)?;
    let text = ck.extra.get("vocab").ok_or_else(|| CliError::User(format!("{} carries no vocabulary", path.display())))?;
    let vocab = Vocab::from_text(text);
    if vocab.len() != ck.model.config().vocab {
        return Err(CliError::User(format!("{}: vocabulary of {} does not match K = {}", path.display(), vocab.len(), ck.model.config().vocab)));
    }
    Ok(Member { model: ck.model, vocab })
}

pub fn load_members(paths: &[PathBuf]) -> Result<Vec<Member>, CliError> {
    if paths.is_empty() {
        return Err(CliError::User("at least one checkpoint is required".into()));
    }
    paths.iter().map(|p| load_member(p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleArgs {
    pub seed: u64,
    pub n_aug: usize,
    pub oracle_length: Option<usize>,
}

/// Runs the ensemble on one product and returns the aggregate with its
/// tab-separated report.
pub fn cmd_sample(members: &[Member], product: &str, args: &SampleArgs) -> Result<(Aggregate, String), CliError> {
    let graph = parse_smiles(product).map_err(|e| CliError::User(format!("cannot parse product {product:?}: {e}")))?;
    let mode = if args.oracle_length.is_some() { RunMode::OracleLength } else { RunMode::VariantPad };
    let opts = SampleOptions { n_aug: args.n_aug, seed: args.seed, mode, ..SampleOptions::default() };
    let truth = args.oracle_length.map_or(Truth::None, Truth::Length);
    let samples = ensemble_samples(members, &graph, &opts, truth).map_err(|e| match e {
        TrainError::Smiles(s) => CliError::User(format!("product {product:?}: {s}")),
        other => other.into(),
    })?;
    let agg = aggregate(&samples);
    let report = ranking_report(&agg);
    Ok((agg, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArgs {
    pub mode: RunMode,
    pub seed: u64,
    pub n_aug: usize,
    /// Evaluate only the first `limit` records when set.
    pub limit: Option<usize>,
}

/// Scores the ensemble on a test file. Writes the summary table and the
/// per-reaction ranks into `out` when given.
pub fn cmd_eval(members: &[Member], test: &Path, args: &EvalArgs, out: Option<&Path>) -> Result<EvalSummary, CliError> {
    let mut records = load_dataset(test).map_err(|e| CliError::User(format!("{}: {e}", test.display())))?.records;
    if let Some(n) = args.limit {
        records.truncate(n);
    }
    if records.is_empty() {
        return Err(CliError::User(format!("{} holds no reactions", test.display())));
    }
    if args.mode == RunMode::BaselineLength && members.iter().any(|m| m.model.config().pad_limit != 0) {
        log::warn!("baseline-length evaluation of a model trained with pads");
    }
    let opts = SampleOptions { n_aug: args.n_aug, seed: args.seed, mode: args.mode, ..SampleOptions::default() };
    let (summary, per) = evaluate(members, &records, &opts)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_file(&dir.join(EVAL_FILE), &format!("{}\n{}\n", EvalSummary::header(), summary.row()))?;
        let mut detail = String::from("index\ttruth\ttop\trank\n");
        for (i, r) in per.iter().enumerate() {
            let keys = r.aggregate.keys();
            let rank = keys.iter().position(|k| *k == r.truth).map_or("-".to_string(), |p| (p + 1).to_string());
            let _ = writeln!(detail, "{i}\t{}\t{}\t{rank}", r.truth, keys.first().map_or("-", String::as_str));
        }
        write_file(&dir.join(EVAL_DETAIL_FILE), &detail)?;
    }
    Ok(summary)
}

/// Writes `n` synthetic template reactions to `path`.
pub fn cmd_synth(path: &Path, n: usize, seed: u64) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_file(path, &dataset_text(&synth_dataset(n, seed))?)
}
