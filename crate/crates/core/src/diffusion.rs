//! Multinomial diffusion over token sequences: noise schedules, the
//! forward kernels, the posterior over the previous step and the reverse
//! sampling loop.

use rand::distributions::Open01;
use rand::Rng;
use thiserror::Error;

use crate::smiles::PAD;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("denoiser failed: {0}")]
    Denoiser(String),
}

type Result<T> = std::result::Result<T, DiffusionError>;

/// Per-step noise levels for `t = 1..=T`, with `ᾱ₀ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// `ᾱₜ = f(t)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(DiffusionError::Contract("schedule needs at least one step".into()));
        }
        let f = |t: f64| {
            let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let betas = (1..=steps)
            .map(|t| (1.0 - (f(t as f64) / f0) / (f((t - 1) as f64) / f0)).min(MAX_BETA))
            .collect();
        Self::from_betas(betas)
    }

    /// Builds the cumulative products from `β₁..β_T`, each in `(0, 1]`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(DiffusionError::Contract("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(DiffusionError::Contract(format!("beta {b} outside (0, 1]")));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for b in &beta {
            let prev = *alpha_bar.last().expect("starts with one entry");
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `βₜ` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// `ᾱₜ` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::Contract(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqKind {
    OneHot,
    Distribution,
}

/// One categorical distribution over `K` classes per sequence position,
/// stored position-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalSeq {
    k: usize,
    probs: Vec<f64>,
    kind: SeqKind,
}

const COLUMN_TOL: f64 = 1e-9;

impl CategoricalSeq {
    pub fn one_hot(tokens: &[u32], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(DiffusionError::Contract("K must be positive".into()));
        }
        let mut probs = vec![0.0; tokens.len() * k];
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= k {
                return Err(DiffusionError::Contract(format!("token {tok} outside vocabulary of {k}")));
            }
            probs[i * k + tok as usize] = 1.0;
        }
        Ok(CategoricalSeq { k, probs, kind: SeqKind::OneHot })
    }

    /// Checks that every position is a distribution.
    pub fn from_probs(k: usize, probs: Vec<f64>) -> Result<Self> {
        if k == 0 || probs.len() % k != 0 {
            return Err(DiffusionError::Contract(format!("{} values do not split into columns of {k}", probs.len())));
        }
        for (pos, col) in probs.chunks(k).enumerate() {
            if col.iter().any(|p| !(0.0..=1.0 + COLUMN_TOL).contains(p)) {
                return Err(DiffusionError::Contract(format!("position {pos} has an entry outside [0, 1]")));
            }
            let s: f64 = col.iter().sum();
            if (s - 1.0).abs() > COLUMN_TOL {
                return Err(DiffusionError::Contract(format!("position {pos} sums to {s}")));
            }
        }
        Ok(CategoricalSeq { k, probs, kind: SeqKind::Distribution })
    }

    pub fn uniform(k: usize, len: usize) -> Self {
        CategoricalSeq { k, probs: vec![1.0 / k as f64; k * len], kind: SeqKind::Distribution }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn kind(&self) -> SeqKind {
        self.kind
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn column(&self, pos: usize) -> &[f64] {
        &self.probs[pos * self.k..(pos + 1) * self.k]
    }

    /// Most probable class per position (the token for one-hot sequences).
    pub fn argmax(&self) -> Vec<u32> {
        self.probs
            .chunks(self.k)
            .map(|col| {
                let mut best = 0;
                for (i, &p) in col.iter().enumerate() {
                    if p > col[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// `(1−βₜ)·y + βₜ/K` per position.
pub fn q_step(y_prev: &CategoricalSeq, t: usize, sched: &NoiseSchedule) -> Result<CategoricalSeq> {
    sched.check_step(t)?;
    Ok(mix_uniform(y_prev, 1.0 - sched.beta(t)))
}

/// `ᾱₜ·y₀ + (1−ᾱₜ)/K` per position.
pub fn q_from_start(y0: &CategoricalSeq, t: usize, sched: &NoiseSchedule) -> Result<CategoricalSeq> {
    sched.check_step(t)?;
    Ok(mix_uniform(y0, sched.alpha_bar(t)))
}

fn mix_uniform(y: &CategoricalSeq, keep: f64) -> CategoricalSeq {
    let floor = (1.0 - keep) / y.k as f64;
    CategoricalSeq { k: y.k, probs: y.probs.iter().map(|p| keep * p + floor).collect(), kind: SeqKind::Distribution }
}

/// Gumbel-max sampling: per position, `argmax(log pₖ + gₖ)` with standard
/// Gumbel noise.
pub fn sample_categorical<R: Rng + ?Sized>(dist: &CategoricalSeq, rng: &mut R) -> Result<CategoricalSeq> {
    let mut tokens = Vec::with_capacity(dist.len());
    for (pos, col) in dist.probs.chunks(dist.k).enumerate() {
        if col.iter().any(|&p| p < 0.0 || p.is_nan()) || col.iter().sum::<f64>() <= 0.0 {
            return Err(DiffusionError::Contract(format!("position {pos} is not a distribution")));
        }
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, &p) in col.iter().enumerate() {
            let u: f64 = rng.sample(Open01);
            let score = p.ln() - (-u.ln()).ln();
            if score > best.0 {
                best = (score, i);
            }
        }
        tokens.push(best.1 as u32);
    }
    CategoricalSeq::one_hot(&tokens, dist.k)
}

/// `θ_post ∝ [αₜ·yₜ + (1−αₜ)/K] ⊙ [ᾱₜ₋₁·ŷ₀ + (1−ᾱₜ₋₁)/K]`, normalized per
/// position.
pub fn posterior(y_t: &CategoricalSeq, y0_hat: &CategoricalSeq, t: usize, sched: &NoiseSchedule) -> Result<CategoricalSeq> {
    sched.check_step(t)?;
    if y_t.k != y0_hat.k || y_t.len() != y0_hat.len() {
        return Err(DiffusionError::Contract(format!(
            "shape mismatch: y_t {}×{} vs prediction {}×{}",
            y_t.len(),
            y_t.k,
            y0_hat.len(),
            y0_hat.k
        )));
    }
    let k = y_t.k;
    let (a, ab) = (sched.alpha(t), sched.alpha_bar(t - 1));
    let (fa, fab) = ((1.0 - a) / k as f64, (1.0 - ab) / k as f64);
    let mut probs = Vec::with_capacity(y_t.probs.len());
    for (pos, (yc, pc)) in y_t.probs.chunks(k).zip(y0_hat.probs.chunks(k)).enumerate() {
        let start = probs.len();
        probs.extend(yc.iter().zip(pc).map(|(y, p)| (a * y + fa) * (ab * p + fab)));
        let z: f64 = probs[start..].iter().sum();
        if !(z > 0.0 && z.is_finite()) {
            return Err(DiffusionError::Numeric(format!("posterior at position {pos} has normalizer {z}")));
        }
        for v in &mut probs[start..] {
            *v /= z;
        }
    }
    Ok(CategoricalSeq { k, probs, kind: SeqKind::Distribution })
}

/// Predicts `ŷ₀` from a noised sequence; implementations hold whatever
/// conditioning they need.
pub trait Denoiser {
    fn denoise(&self, y_t: &CategoricalSeq, t: usize) -> Result<CategoricalSeq>;
}

impl<F> Denoiser for F
where
    F: Fn(&CategoricalSeq, usize) -> Result<CategoricalSeq>,
{
    fn denoise(&self, y_t: &CategoricalSeq, t: usize) -> Result<CategoricalSeq> {
        self(y_t, t)
    }
}

/// One reverse step. Returns `(y_{t−1}, ŷ₀)`.
pub fn reverse_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    y_t: &CategoricalSeq,
    t: usize,
    sched: &NoiseSchedule,
    denoiser: &D,
    rng: &mut R,
) -> Result<(CategoricalSeq, CategoricalSeq)> {
    let y0_hat = denoiser.denoise(y_t, t)?;
    if y0_hat.k != y_t.k || y0_hat.len() != y_t.len() {
        return Err(DiffusionError::Contract(format!(
            "denoiser returned {}×{} for input {}×{}",
            y0_hat.len(),
            y0_hat.k,
            y_t.len(),
            y_t.k
        )));
    }
    let post = posterior(y_t, &y0_hat, t, sched)?;
    Ok((sample_categorical(&post, rng)?, y0_hat))
}

/// Runs the reverse chain from uniform noise of length `len` down to
/// `t = 0` and returns the tokens with the trailing PAD run removed.
pub fn generate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    k: usize,
    len: usize,
    max_len: usize,
    sched: &NoiseSchedule,
    denoiser: &D,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if len == 0 || len > max_len {
        return Err(DiffusionError::Contract(format!("target length {len} outside 1..={max_len}")));
    }
    let mut y = sample_categorical(&CategoricalSeq::uniform(k, len), rng)?;
    for t in (1..=sched.steps()).rev() {
        y = reverse_step(&y, t, sched, denoiser, rng)?.0;
    }
    Ok(strip_trailing_pad(y.argmax()))
}

pub fn strip_trailing_pad(mut tokens: Vec<u32>) -> Vec<u32> {
    while tokens.last() == Some(&PAD) {
        tokens.pop();
    }
    tokens
}

/// Sinusoidal encoding of a scalar: pairs `[sin(t·ωᵢ), cos(t·ωᵢ)]` with
/// `ωᵢ = 10000^(−2i/dim)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(DiffusionError::Contract(format!("embedding width {dim} is odd")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out.push((t * w).sin());
        out.push((t * w).cos());
    }
    Ok(out)
}
