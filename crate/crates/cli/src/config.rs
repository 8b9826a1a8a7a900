use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use differ::net::ModelConfig;
use differ::train::{MseKind, RunMode, TrainConfig};
use serde::Serialize;

use crate::CliError;

/// Keys accepted in a run config, one `key = value` per line.
pub const KEYS: &[&str] = &[
    "train", "test", "out", "synth_records", "synth_seed", "holdout", "layers", "heads", "d_model", "d_ff", "max_len", "l_max",
    "steps", "pad_limit", "dropout", "lr", "batch_size", "epochs", "lambda_mse", "lambda_len", "mse", "seed", "mode",
    "n_aug", "eval_records",
];

/// Everything a training run needs. Either `train` names a reaction file or
/// `synth_records` asks for a generated dataset; `holdout` records are cut
/// from the end for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: PathBuf,
    pub synth_records: usize,
    pub synth_seed: u64,
    pub holdout: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub l_max: usize,
    pub steps: usize,
    pub pad_limit: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_mse: f64,
    pub lambda_len: f64,
    pub mse: String,
    pub seed: u64,
    pub mode: String,
    pub n_aug: usize,
    pub eval_records: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ModelConfig::toy(0);
        RunConfig {
            train: None,
            test: None,
            out: PathBuf::from("runs/default"),
            synth_records: 0,
            synth_seed: 0,
            holdout: 0,
            layers: toy.layers,
            heads: toy.heads,
            d_model: toy.d_model,
            d_ff: toy.d_ff,
            max_len: toy.max_len,
            l_max: toy.l_max,
            steps: toy.steps,
            pad_limit: toy.pad_limit,
            dropout: toy.dropout,
            lr: 1e-4,
            batch_size: 16,
            epochs: 1,
            lambda_mse: 1.0,
            lambda_len: 1.0,
            mse: "squared".into(),
            seed: 0,
            mode: RunMode::VariantPad.name().into(),
            n_aug: 20,
            eval_records: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::User(format!("line {line}: cannot read {value:?} as the value of {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| CliError::User(format!("line {n}: expected `key = value`")))?;
            if let Some(prev) = seen.insert(key.to_string(), n) {
                return Err(CliError::User(format!("line {n}: {key} already set on line {prev}")));
            }
            match key {
                "train" => c.train = Some(PathBuf::from(value)),
                "test" => c.test = Some(PathBuf::from(value)),
                "out" => c.out = PathBuf::from(value),
                "synth_records" => c.synth_records = parse_value(key, value, n)?,
                "synth_seed" => c.synth_seed = parse_value(key, value, n)?,
                "holdout" => c.holdout = parse_value(key, value, n)?,
                "layers" => c.layers = parse_value(key, value, n)?,
                "heads" => c.heads = parse_value(key, value, n)?,
                "d_model" => c.d_model = parse_value(key, value, n)?,
                "d_ff" => c.d_ff = parse_value(key, value, n)?,
                "max_len" => c.max_len = parse_value(key, value, n)?,
                "l_max" => c.l_max = parse_value(key, value, n)?,
                "steps" => c.steps = parse_value(key, value, n)?,
                "pad_limit" => c.pad_limit = parse_value(key, value, n)?,
                "dropout" => c.dropout = parse_value(key, value, n)?,
                "lr" => c.lr = parse_value(key, value, n)?,
                "batch_size" => c.batch_size = parse_value(key, value, n)?,
                "epochs" => c.epochs = parse_value(key, value, n)?,
                "lambda_mse" => c.lambda_mse = parse_value(key, value, n)?,
                "lambda_len" => c.lambda_len = parse_value(key, value, n)?,
                "mse" => c.mse = value.to_string(),
                "seed" => c.seed = parse_value(key, value, n)?,
                "mode" => c.mode = value.to_string(),
                "n_aug" => c.n_aug = parse_value(key, value, n)?,
                "eval_records" => c.eval_records = parse_value(key, value, n)?,
                _ => {
                    return Err(CliError::User(format!("line {n}: unknown key {key:?}; valid keys: {}", KEYS.join(", "))));
                }
            }
        }
        c.mode()?;
        c.mse_kind()?;
        if c.train.is_none() && c.synth_records == 0 {
            return Err(CliError::User("config needs `train = FILE` or `synth_records = N`".into()));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        // Relative dataset paths are read from the config's directory.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.train, &mut c.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn mode(&self) -> Result<RunMode, CliError> {
        self.mode.parse().map_err(CliError::User)
    }

    pub fn mse_kind(&self) -> Result<MseKind, CliError> {
        match self.mse.as_str() {
            "squared" => Ok(MseKind::Squared),
            "literal" => Ok(MseKind::LiteralSquares),
            other => Err(CliError::User(format!("mse must be `squared` or `literal`, not {other:?}"))),
        }
    }

    /// Model shape for a vocabulary of `k`. Baseline runs train without pads.
    pub fn model_config(&self, k: usize) -> Result<ModelConfig, CliError> {
        let pad_limit = if self.mode()? == RunMode::BaselineLength { 0 } else { self.pad_limit };
        let m = ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab: k,
            max_len: self.max_len,
            l_max: self.l_max,
            steps: self.steps,
            pad_limit,
            dropout: self.dropout,
        };
        m.validate().map_err(|e| CliError::User(format!("invalid model config: {e}")))?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        if self.batch_size == 0 || self.epochs == 0 || !(self.lr >= 0.0) {
            return Err(CliError::User("batch_size and epochs must be positive and lr non-negative".into()));
        }
        Ok(TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lambda_mse: self.lambda_mse,
            lambda_len: self.lambda_len,
            mse_kind: self.mse_kind()?,
            seed: self.seed,
        })
    }
}
