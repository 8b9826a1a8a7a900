//! Repeated sampling over augmented inputs, canonical aggregation, ranking
//! with runoff tie-breaks, and top-k scoring.

mod vote;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{generate, NoiseSchedule};
use crate::net::{LengthChoice, Model};
use crate::parallel;
use crate::smiles::{canonical, parse_smiles, random_rooted_with, strip_atom_maps, MolGraph, Vocab};
use crate::train::{aligned_pair, ReactionRecord, RunMode, TrainError};

pub use vote::{break_ties, Ballot};

type Result<T> = std::result::Result<T, TrainError>;

/// A trained model with the vocabulary it was trained on.
#[derive(Debug, Clone)]
pub struct Member {
    pub model: Model,
    pub vocab: Vocab,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub model: usize,
    pub text: String,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    pub n_aug: usize,
    pub samples_per_aug: usize,
    pub seed: u64,
    pub mode: RunMode,
    pub length: LengthChoice,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { n_aug: 20, samples_per_aug: 1, seed: 0, mode: RunMode::VariantPad, length: LengthChoice::Argmax }
    }
}

/// Where an oracle-length run gets the true target length.
#[derive(Debug, Clone, Copy)]
pub enum Truth<'a> {
    None,
    /// A fixed reactant token count.
    Length(usize),
    /// Mapped reactants; each augmentation uses the length of the reactant
    /// string aligned to its own product rooting.
    Reactants(&'a MolGraph),
}

/// Noise length that puts an oracle target in the model's training
/// distribution: the true length plus the middle of the pad range.
pub fn oracle_noise_length(model: &Model, target_len: usize) -> usize {
    let n = model.config().pad_limit;
    let pads = if n == 0 { 0 } else { n.div_ceil(2) };
    (target_len + pads).clamp(1, model.config().max_len)
}

/// A sample is valid when it decodes to reserved-free text that parses.
pub fn is_valid(vocab: &Vocab, tokens: &[u32]) -> bool {
    !tokens.is_empty() && tokens.iter().all(|&t| t > crate::smiles::UNK) && parse_smiles(&vocab.decode(tokens)).is_ok()
}

/// `n_aug` random rootings of `product`, `samples_per_aug` reverse chains
/// each. Invalid outputs are kept and tagged.
pub fn sample_candidates(member: &Member, model_id: usize, product: &MolGraph, opts: &SampleOptions, truth: Truth<'_>) -> Result<Vec<Sample>> {
    if opts.n_aug == 0 || opts.samples_per_aug == 0 {
        return Err(TrainError::Contract("n_aug and samples_per_aug must be positive".into()));
    }
    if opts.mode == RunMode::OracleLength && matches!(truth, Truth::None) {
        return Err(TrainError::Contract("oracle-length sampling needs the true length".into()));
    }
    let (model, vocab) = (&member.model, &member.vocab);
    let cfg = model.config();
    let sched = NoiseSchedule::cosine(cfg.steps)?;
    let bare = strip_atom_maps(product);
    let mut out = Vec::with_capacity(opts.n_aug * opts.samples_per_aug);
    for aug in 0..opts.n_aug {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(aug as u64);
        let (text, true_len) = match truth {
            Truth::Reactants(r) => {
                let rec = ReactionRecord { product: product.clone(), reactants: r.clone() };
                let (p, q) = aligned_pair(&rec, &mut rng)?;
                (p, Some(vocab.encode(&q)?.len()))
            }
            Truth::Length(l) => (random_rooted_with(&bare, &mut rng)?, Some(l)),
            Truth::None => (random_rooted_with(&bare, &mut rng)?, None),
        };
        let source = vocab.encode(&text)?;
        let den = model.denoiser(&source)?;
        let len = match (opts.mode, true_len) {
            (RunMode::OracleLength, Some(l)) => oracle_noise_length(model, l),
            _ => {
                let choice = match opts.length {
                    LengthChoice::Argmax => LengthChoice::Argmax,
                    LengthChoice::Sample(s) => LengthChoice::Sample(s ^ rng.gen::<u64>()),
                };
                model.length_from_logits(source.len(), den.length_logits(), choice)
            }
        };
        for _ in 0..opts.samples_per_aug {
            let tokens = generate(cfg.vocab, len, cfg.max_len, &sched, &den, &mut rng)?;
            let valid = is_valid(vocab, &tokens);
            out.push(Sample { model: model_id, text: vocab.decode(&tokens), valid });
        }
    }
    Ok(out)
}

/// Samples from every member, one member per work item.
pub fn ensemble_samples(members: &[Member], product: &MolGraph, opts: &SampleOptions, truth: Truth<'_>) -> Result<Vec<Sample>> {
    let per_model = parallel::map(members, |i, m| {
        let o = SampleOptions { seed: opts.seed.wrapping_add(i as u64), ..opts.clone() };
        sample_candidates(m, i, product, &o, truth)
    });
    let mut all = Vec::new();
    for s in per_model {
        all.extend(s?);
    }
    Ok(all)
}

/// Canonical reactant set: components canonicalized, sorted and joined.
pub fn set_key(smiles: &str) -> Option<String> {
    parse_smiles(smiles).ok().map(|g| canonical(&g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub key: String,
    pub count: usize,
    /// Count over all samples, invalid ones included.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregate {
    pub ranking: Vec<Candidate>,
    pub ballots: Vec<Ballot>,
    pub total: usize,
    pub valid: usize,
}

impl Aggregate {
    pub fn validity(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.valid as f64 / self.total as f64
        }
    }

    pub fn keys(&self) -> Vec<String> {
        self.ranking.iter().map(|c| c.key.clone()).collect()
    }
}

fn ranked_by_count(counts: &BTreeMap<String, usize>) -> Vec<(String, usize)> {
    let mut v: Vec<(String, usize)> = counts.iter().map(|(k, &c)| (k.clone(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Counts valid samples by canonical set, builds one ballot per model and
/// orders candidates by count, breaking equal counts by runoff.
pub fn aggregate(samples: &[Sample]) -> Aggregate {
    let mut global: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_model: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    let mut valid = 0;
    for s in samples.iter().filter(|s| s.valid) {
        let Some(key) = set_key(&s.text) else { continue };
        valid += 1;
        *global.entry(key.clone()).or_default() += 1;
        *per_model.entry(s.model).or_default().entry(key).or_default() += 1;
    }
    if valid == 0 {
        log::info!("no valid samples among {}", samples.len());
    }
    let ballots: Vec<Ballot> = per_model
        .iter()
        .map(|(&model, counts)| Ballot { model, candidates: ranked_by_count(counts).into_iter().map(|(k, _)| k).collect() })
        .collect();

    let ordered = ranked_by_count(&global);
    let mut ranking = Vec::with_capacity(ordered.len());
    let mut i = 0;
    while i < ordered.len() {
        let j = ordered[i..].iter().position(|x| x.1 != ordered[i].1).map_or(ordered.len(), |p| i + p);
        let group: Vec<String> = ordered[i..j].iter().map(|x| x.0.clone()).collect();
        let group = if group.len() > 1 { break_ties(&group, &ballots) } else { group };
        for key in group {
            ranking.push(Candidate { key, count: ordered[i].1, frequency: ordered[i].1 as f64 / samples.len() as f64 });
        }
        i = j;
    }
    Aggregate { ranking, ballots, total: samples.len(), valid }
}

pub const TOP_K: [usize; 4] = [1, 3, 5, 10];

/// Share of reactions whose true set is among the first `k` candidates.
pub fn topk_accuracy(rankings: &[Vec<String>], truths: &[String], ks: &[usize]) -> Vec<f64> {
    assert_eq!(rankings.len(), truths.len(), "one ranking per reaction");
    ks.iter()
        .map(|&k| {
            let hits = rankings.iter().zip(truths).filter(|(r, t)| r.iter().take(k).any(|c| c == *t)).count();
            if truths.is_empty() {
                0.0
            } else {
                hits as f64 / truths.len() as f64
            }
        })
        .collect()
}

/// Tab-separated ranking lines, `rank  key  count  frequency`.
pub fn ranking_report(agg: &Aggregate) -> String {
    let mut out = String::new();
    for (i, c) in agg.ranking.iter().enumerate() {
        let _ = writeln!(out, "{}\t{}\t{}\t{:.4}", i + 1, c.key, c.count, c.frequency);
    }
    let _ = writeln!(out, "# samples\t{}\tvalid\t{}\tcandidates\t{}", agg.total, agg.valid, agg.ranking.len());
    out
}

/// The columns of the per-model comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub topk: Vec<(usize, f64)>,
    pub validity: f64,
    pub avg_candidates: f64,
    pub reactions: usize,
}

impl EvalSummary {
    pub fn header() -> &'static str {
        "Top-1\tTop-3\tTop-5\tTop-10\tSample Validity\tAvg. Num. Reactants"
    }

    pub fn row(&self) -> String {
        let mut cols: Vec<String> = self.topk.iter().map(|(_, a)| format!("{:.1}", 100.0 * a)).collect();
        cols.push(format!("{:.1}", 100.0 * self.validity));
        cols.push(format!("{:.2}", self.avg_candidates));
        cols.join("\t")
    }
}

/// Per-reaction result of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub truth: String,
    pub aggregate: Aggregate,
}

/// Runs the ensemble on every record and scores it. Reactions are spread
/// over the worker pool; each uses a seed derived from its index.
pub fn evaluate(members: &[Member], records: &[ReactionRecord], opts: &SampleOptions) -> Result<(EvalSummary, Vec<Evaluated>)> {
    let results = parallel::map(records, |i, rec| -> Result<Evaluated> {
        let o = SampleOptions { seed: opts.seed.wrapping_add((i as u64) << 20), ..opts.clone() };
        let truth = if opts.mode == RunMode::OracleLength { Truth::Reactants(&rec.reactants) } else { Truth::None };
        let samples = ensemble_samples(members, &rec.product, &o, truth)?;
        Ok(Evaluated { truth: rec.reactant_key(), aggregate: aggregate(&samples) })
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rankings: Vec<Vec<String>> = results.iter().map(|r| r.aggregate.keys()).collect();
    let truths: Vec<String> = results.iter().map(|r| r.truth.clone()).collect();
    let acc = topk_accuracy(&rankings, &truths, &TOP_K);
    let n = results.len().max(1) as f64;
    let (total, valid): (usize, usize) = results.iter().fold((0, 0), |(t, v), r| (t + r.aggregate.total, v + r.aggregate.valid));
    let summary = EvalSummary {
        topk: TOP_K.iter().copied().zip(acc).collect(),
        validity: if total == 0 { 0.0 } else { valid as f64 / total as f64 },
        avg_candidates: results.iter().map(|r| r.aggregate.ranking.len() as f64).sum::<f64>() / n,
        reactions: results.len(),
    };
    Ok((summary, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(model: usize, text: &str) -> Sample {
        Sample { model, text: text.into(), valid: parse_smiles(text).is_ok() }
    }

    #[test]
    fn counts_and_order() {
        let samples: Vec<Sample> = ["CC", "CC", "CC", "CO", "CO", "CN"].iter().map(|t| s(0, t)).collect();
        let agg = aggregate(&samples);
        let counts: Vec<usize> = agg.ranking.iter().map(|c| c.count).collect();
        assert_eq!(counts, vec![3, 2, 1]);
        assert_eq!(agg.keys(), vec![set_key("CC").unwrap(), set_key("CO").unwrap(), set_key("CN").unwrap()]);
    }

    #[test]
    fn set_semantics() {
        assert_eq!(set_key("CCO.CC"), set_key("CC.OCC"));
        let agg = aggregate(&[s(0, "CCO.CC"), s(1, "CC.OCC"), s(0, "C(")]);
        assert_eq!(agg.ranking.len(), 1);
        assert_eq!(agg.ranking[0].count, 2);
        assert_eq!((agg.valid, agg.total), (2, 3));
    }
}
