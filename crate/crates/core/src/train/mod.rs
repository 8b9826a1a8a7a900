//! Losses, random-pad augmentation, timestep sampling, data handling and the
//! training loop.

mod data;
mod sampler;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffusion::{posterior, q_from_start, sample_categorical, CategoricalSeq, DiffusionError, NoiseSchedule};
use crate::net::{Model, NetError};
use crate::parallel;
use crate::smiles::{random_rooted_with, root_align_with, BranchOrder, SmilesError, Vocab, PAD};
use crate::tensor::{adam_step, assign_grads, AdamConfig, AdamState, Gradients, Mode, Tape, TensorError, Var};

pub use data::{dataset_text, fingerprint, load_dataset, parse_dataset, write_dataset, Dataset, ReactionRecord, MAX_MALFORMED};
pub use sampler::{TimeSampler, HISTORY, UNIFORM_MIX};
pub use synth::{forward_products, synth_dataset, synth_reaction, Template};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss at batch record {record}: {source}")]
    NonFinite { record: usize, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Smiles(#[from] SmilesError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Inference-time length policy; the three rows of the length ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunMode {
    /// Trained with random pads, noise length from the length head.
    VariantPad,
    /// Trained without pads, noise length from the length head.
    BaselineLength,
    /// Noise length from the true target.
    OracleLength,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::VariantPad => "variant-pad",
            RunMode::BaselineLength => "baseline-length",
            RunMode::OracleLength => "oracle-length",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "variant-pad" | "variant" => Ok(RunMode::VariantPad),
            "baseline-length" | "baseline" => Ok(RunMode::BaselineLength),
            "oracle-length" | "oracle" => Ok(RunMode::OracleLength),
            _ => Err(format!("unknown mode {s:?}; expected variant-pad, baseline-length or oracle-length")),
        }
    }
}

/// Which reading of the squared-error term to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MseKind {
    /// `mean (y₀ − ŷ₀)²`
    Squared,
    /// `mean (y₀² − ŷ₀²)²`, the literal superscripts.
    LiteralSquares,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_mse: f64,
    pub lambda_len: f64,
    pub mse_kind: MseKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, batch_size: 16, epochs: 1, lambda_mse: 1.0, lambda_len: 1.0, mse_kind: MseKind::Squared, seed: 0 }
    }
}

/// Floor applied to predicted probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_shapes(a: &CategoricalSeq, b: &CategoricalSeq) -> Result<()> {
    if a.k() != b.k() || a.len() != b.len() {
        return Err(TrainError::Contract(format!("shape mismatch: {}×{} vs {}×{}", a.len(), a.k(), b.len(), b.k())));
    }
    Ok(())
}

/// Mean over all `K·ℓ` entries of `(y₀ − ŷ₀)²`.
pub fn mse_loss(y0: &CategoricalSeq, y0_hat: &CategoricalSeq) -> Result<f64> {
    check_shapes(y0, y0_hat)?;
    let n = y0.probs().len() as f64;
    Ok(y0.probs().iter().zip(y0_hat.probs()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `Σ p·(ln p − ln q)` with both sides floored at [`LOG_FLOOR`].
fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi.max(LOG_FLOOR).ln() - qi.max(LOG_FLOOR).ln())).sum()
}

/// Per-sample bound term at `t`: the reconstruction NLL at `t = 1`, else the
/// KL between the true and predicted posteriors; both averaged over
/// positions.
pub fn vlb_loss(y0: &CategoricalSeq, y_t: &CategoricalSeq, y0_hat: &CategoricalSeq, t: usize, sched: &NoiseSchedule) -> Result<f64> {
    check_shapes(y0, y0_hat)?;
    check_shapes(y0, y_t)?;
    if t == 0 || t > sched.steps() {
        return Err(TrainError::Contract(format!("timestep {t} outside 1..={}", sched.steps())));
    }
    let (k, len) = (y0.k(), y0.len() as f64);
    if t == 1 {
        let nll: f64 = y0.probs().iter().zip(y0_hat.probs()).filter(|(&y, _)| y > 0.0).map(|(&y, &p)| -y * p.max(LOG_FLOOR).ln()).sum();
        return Ok(nll / len);
    }
    let p = posterior(y_t, y0, t, sched)?;
    let q = posterior(y_t, y0_hat, t, sched)?;
    Ok(p.probs().chunks(k).zip(q.probs().chunks(k)).map(|(a, b)| kl(a, b)).sum::<f64>() / len)
}

/// Cross-entropy of the length logits against class `delta + l_max`;
/// deltas beyond the bound are clamped.
pub fn length_loss(logits: &[f64], delta: i64, l_max: usize) -> Result<f64> {
    if logits.len() != 2 * l_max + 1 {
        return Err(TrainError::Contract(format!("{} length logits for l_max {l_max}", logits.len())));
    }
    let class = length_class(delta, l_max);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[class])
}

pub fn length_class(delta: i64, l_max: usize) -> usize {
    let l = l_max as i64;
    if delta.abs() > l {
        log::warn!("length delta {delta} clamped to ±{l}");
    }
    (delta.clamp(-l, l) + l) as usize
}

/// A target with its random pads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub tokens: Vec<u32>,
    pub pads: usize,
    /// `(ℓ_y + n) − ℓ_x`
    pub delta: i64,
}

/// Appends `n ~ U{1..limit}` PAD tokens (none when `limit` is 0) and
/// returns the padded length delta against a source of `source_len`.
pub fn pad_augment<R: Rng + ?Sized>(target: &[u32], source_len: usize, limit: usize, max_len: usize, rng: &mut R) -> Result<Padded> {
    let pads = if limit == 0 { 0 } else { rng.gen_range(1..=limit) };
    let len = target.len() + pads;
    if len > max_len {
        return Err(TrainError::Contract(format!("padded target of {len} tokens exceeds max_len {max_len}")));
    }
    let mut tokens = target.to_vec();
    tokens.resize(len, PAD);
    Ok(Padded { tokens, pads, delta: len as i64 - source_len as i64 })
}

/// Product and reactant strings rooted at a uniformly drawn product atom
/// with a random branch order. Falls back to independent random rootings
/// when the atom maps do not allow alignment.
pub fn aligned_pair<R: Rng + ?Sized>(rec: &ReactionRecord, rng: &mut R) -> Result<(String, String)> {
    let n = rec.product.len();
    if n == 0 || rec.reactants.is_empty() {
        return Err(TrainError::Contract("empty product or reactants".into()));
    }
    let root = rng.gen_range(0..n);
    let order = BranchOrder::Priority((0..n).map(|_| rng.gen()).collect());
    match root_align_with(&rec.product, &rec.reactants, root, &order) {
        Ok(pair) => Ok(pair),
        Err(SmilesError::Alignment(_)) => {
            let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
            let p = random_rooted_with(&crate::smiles::strip_atom_maps(&rec.product), &mut r)?;
            let q = random_rooted_with(&crate::smiles::strip_atom_maps(&rec.reactants), &mut r)?;
            Ok((p, q))
        }
        Err(e) => Err(e.into()),
    }
}

/// Vocabulary over canonical forms plus a few aligned rootings per record,
/// so ring digits and branch symbols of random rootings are covered.
pub fn build_vocab(records: &[ReactionRecord], seed: u64) -> Result<Vocab> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::new();
    for r in records {
        corpus.push(r.product_key());
        corpus.push(r.reactant_key());
        for _ in 0..4 {
            let (p, q) = aligned_pair(r, &mut rng)?;
            corpus.push(p);
            corpus.push(q);
        }
    }
    Ok(Vocab::build(corpus.iter().map(String::as_str))?)
}

/// Token pair ready for a training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

/// Everything random about one record's contribution to a step, drawn up
/// front so the loss is a deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    pub source: Vec<u32>,
    pub y0: Vec<u32>,
    pub y_t: Vec<u32>,
    pub t: usize,
    pub weight: f64,
    pub delta: i64,
}

impl PreparedRecord {
    pub fn draw<R: Rng + ?Sized>(
        ex: &Example,
        model: &Model,
        sched: &NoiseSchedule,
        sampler: &TimeSampler,
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = model.config();
        let padded = pad_augment(&ex.target, ex.source.len(), cfg.pad_limit, cfg.max_len, rng)?;
        let (t, weight) = sampler.sample(rng);
        let y0 = CategoricalSeq::one_hot(&padded.tokens, cfg.vocab)?;
        let y_t = sample_categorical(&q_from_start(&y0, t, sched)?, rng)?.argmax();
        Ok(PreparedRecord { source: ex.source.clone(), y0: padded.tokens, y_t, t, weight, delta: padded.delta })
    }
}

/// Tape handles of one record's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub vlb: Var,
    pub len: Var,
}

/// Builds `w·L_VLB + λ_MSE·L_MSE + λ_len·L_ℓ` for one record.
pub fn record_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    vars: &[Var],
    rec: &PreparedRecord,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let mc = model.config();
    let (k, len) = (mc.vocab, rec.y0.len());
    let (memory, len_logits) = model.encode(tape, vars, &rec.source)?;
    let logits = model.decode(tape, vars, &rec.y_t, rec.t, memory)?;
    let probs = tape.softmax(logits)?;
    let mut y0 = vec![0.0; len * k];
    for (i, &tok) in rec.y0.iter().enumerate() {
        y0[i * k + tok as usize] = 1.0;
    }

    let target = tape.constant(y0.clone(), len, k)?;
    let pred = match cfg.mse_kind {
        MseKind::Squared => probs,
        MseKind::LiteralSquares => tape.mul(probs, probs)?,
    };
    let diff = tape.sub(target, pred)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq)?;

    let vlb = if rec.t == 1 {
        tape.soft_cross_entropy(probs, y0, LOG_FLOOR)?
    } else {
        let (a, ab) = (sched.alpha(rec.t), sched.alpha_bar(rec.t - 1));
        let yt_oh = CategoricalSeq::one_hot(&rec.y_t, k)?;
        let y0_oh = CategoricalSeq::one_hot(&rec.y0, k)?;
        let p = posterior(&yt_oh, &y0_oh, rec.t, sched)?;
        let left: Vec<f64> = yt_oh.probs().iter().map(|y| a * y + (1.0 - a) / k as f64).collect();
        let mixed = tape.affine(probs, ab, (1.0 - ab) / k as f64)?;
        let unnorm = tape.mul_const(mixed, left)?;
        let q = tape.row_normalize(unnorm)?;
        let neg_entropy: f64 = p.probs().iter().filter(|&&x| x > 0.0).map(|&x| x * x.max(LOG_FLOOR).ln()).sum::<f64>() / len as f64;
        let ce = tape.soft_cross_entropy(q, p.probs().to_vec(), LOG_FLOOR)?;
        tape.affine(ce, 1.0, neg_entropy)?
    };

    let class = length_class(rec.delta, mc.l_max);
    let len_loss = tape.cross_entropy(len_logits, &[class])?;

    let a = tape.scale(vlb, rec.weight)?;
    let b = tape.scale(mse, cfg.lambda_mse)?;
    let c = tape.scale(len_loss, cfg.lambda_len)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossVars { total, mse, vlb, len: len_loss })
}

/// Batch means of each loss component.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub mse: f64,
    pub vlb: f64,
    pub len: f64,
    pub total: f64,
    pub records: usize,
}

struct RecordOutcome {
    grads: Gradients,
    mse: f64,
    vlb: f64,
    len: f64,
    total: f64,
    t: usize,
}

fn record_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One optimizer step over `batch`. Records are processed independently
/// (in parallel with the `parallel` feature) and their gradients averaged in
/// batch order. `stream` seeds the per-record generators.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    sampler: &mut TimeSampler,
    sched: &NoiseSchedule,
    batch: &[Example],
    cfg: &TrainConfig,
    stream: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(TrainError::Contract("empty batch".into()));
    }
    let shared: &Model = model;
    let frozen: &TimeSampler = sampler;
    let outcomes = parallel::map(batch, |i, ex| -> Result<Option<RecordOutcome>> {
        let mut rng = record_rng(cfg.seed, stream + i as u64);
        let rec = match PreparedRecord::draw(ex, shared, sched, frozen, &mut rng) {
            Ok(r) => r,
            Err(TrainError::Contract(msg)) => {
                log::warn!("skipping record: {msg}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let mut tape = Tape::with_rng(Mode::Train, ChaCha8Rng::seed_from_u64(rng.gen()));
        let vars = shared.register(&mut tape)?;
        let lv = record_loss(shared, &mut tape, &vars, &rec, sched, cfg).map_err(|e| match e {
            TrainError::Tensor(source) | TrainError::Net(NetError::Tensor(source)) => TrainError::NonFinite { record: i, source },
            other => other,
        })?;
        let grads = tape.backward(lv.total).map_err(|source| TrainError::NonFinite { record: i, source })?;
        Ok(Some(RecordOutcome {
            grads,
            mse: tape.scalar(lv.mse),
            vlb: tape.scalar(lv.vlb),
            len: tape.scalar(lv.len),
            total: tape.scalar(lv.total),
            t: rec.t,
        }))
    });

    let mut sum = Gradients::zeros_like(&model.params);
    let mut out = LossBreakdown::default();
    let mut seen = Vec::new();
    for o in outcomes {
        let Some(o) = o? else { continue };
        sum.accumulate(&o.grads);
        out.mse += o.mse;
        out.vlb += o.vlb;
        out.len += o.len;
        out.total += o.total;
        out.records += 1;
        // The sampler tracks the unweighted diffusion loss of each draw.
        seen.push((o.t, o.vlb + cfg.lambda_mse * o.mse));
    }
    if out.records == 0 {
        return Err(TrainError::Contract("every record in the batch was skipped".into()));
    }
    let n = out.records as f64;
    sum.scale(1.0 / n);
    assign_grads(&mut model.params, &sum);
    adam_step(&mut model.params, adam, &AdamConfig { lr: cfg.lr, ..AdamConfig::default() })?;
    for (t, l) in seen {
        sampler.record(t, l);
    }
    out.mse /= n;
    out.vlb /= n;
    out.len /= n;
    out.total /= n;
    Ok(out)
}

/// Per-epoch means, one row of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mse: f64,
    pub vlb: f64,
    pub len: f64,
    pub total: f64,
    pub records: usize,
}

/// Model, optimizer and sampler state carried across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub vocab: Vocab,
    pub adam: AdamState,
    pub sampler: TimeSampler,
    pub sched: NoiseSchedule,
    pub cfg: TrainConfig,
    pub epochs_done: usize,
    streams_used: u64,
}

impl Trainer {
    pub fn new(model: Model, vocab: Vocab, cfg: TrainConfig) -> Result<Self> {
        if vocab.len() != model.config().vocab {
            return Err(TrainError::Contract(format!("vocabulary of {} vs model K = {}", vocab.len(), model.config().vocab)));
        }
        if cfg.batch_size == 0 {
            return Err(TrainError::Contract("batch size must be positive".into()));
        }
        let sched = NoiseSchedule::cosine(model.config().steps)?;
        Ok(Trainer {
            adam: AdamState::new(&model.params),
            sampler: TimeSampler::new(model.config().steps),
            sched,
            model,
            vocab,
            cfg,
            epochs_done: 0,
            streams_used: 0,
        })
    }

    /// Fresh aligned rootings of every record, shuffled. Pairs too long for
    /// the model are dropped with a warning.
    pub fn examples(&self, records: &[ReactionRecord], epoch: usize) -> Result<Vec<Example>> {
        let mut rng = record_rng(self.cfg.seed ^ 0x5eed, epoch as u64);
        let max = self.model.config().max_len;
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let (p, q) = aligned_pair(r, &mut rng)?;
            let (source, target) = (self.vocab.encode(&p)?, self.vocab.encode(&q)?);
            if source.len() + 1 > max || target.len() + self.model.config().pad_limit > max || target.is_empty() {
                log::warn!("skipping pair of {} and {} tokens (max_len {max})", source.len(), target.len());
                continue;
            }
            out.push(Example { source, target });
        }
        out.shuffle(&mut rng);
        Ok(out)
    }

    /// One pass over `records` in batches.
    pub fn epoch(&mut self, records: &[ReactionRecord]) -> Result<EpochMetrics> {
        let epoch = self.epochs_done + 1;
        let examples = self.examples(records, epoch)?;
        let mut acc = LossBreakdown::default();
        for batch in examples.chunks(self.cfg.batch_size) {
            let b = train_step(&mut self.model, &mut self.adam, &mut self.sampler, &self.sched, batch, &self.cfg, self.streams_used)?;
            self.streams_used += batch.len() as u64;
            let w = b.records as f64;
            acc.mse += b.mse * w;
            acc.vlb += b.vlb * w;
            acc.len += b.len * w;
            acc.total += b.total * w;
            acc.records += b.records;
        }
        self.epochs_done = epoch;
        let n = acc.records.max(1) as f64;
        Ok(EpochMetrics { epoch, mse: acc.mse / n, vlb: acc.vlb / n, len: acc.len / n, total: acc.total / n, records: acc.records })
    }
}
