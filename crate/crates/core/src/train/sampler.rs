use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

/// Recorded losses kept per timestep before importance sampling starts.
pub const HISTORY: usize = 10;
/// Share of probability mass spread uniformly so no timestep starves.
pub const UNIFORM_MIX: f64 = 0.001;

/// Loss-aware timestep sampler. Uniform until every `t` has [`HISTORY`]
/// losses on record, then `pₜ ∝ sqrt(mean Lₜ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSampler {
    steps: usize,
    history: Vec<[f64; HISTORY]>,
    counts: Vec<u64>,
}

impl TimeSampler {
    pub fn new(steps: usize) -> Self {
        assert!(steps > 0, "a sampler needs at least one timestep");
        TimeSampler { steps, history: vec![[0.0; HISTORY]; steps], counts: vec![0; steps] }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn warmed_up(&self) -> bool {
        self.counts.iter().all(|&c| c >= HISTORY as u64)
    }

    /// Stores the loss observed at `t`, overwriting the oldest entry.
    pub fn record(&mut self, t: usize, loss: f64) {
        assert!((1..=self.steps).contains(&t), "timestep {t} outside 1..={}", self.steps);
        if !loss.is_finite() {
            return;
        }
        let i = t - 1;
        self.history[i][(self.counts[i] % HISTORY as u64) as usize] = loss;
        self.counts[i] += 1;
    }

    /// Sampling probabilities for `t = 1..=T`.
    pub fn probabilities(&self) -> Vec<f64> {
        let uniform = vec![1.0 / self.steps as f64; self.steps];
        if !self.warmed_up() {
            return uniform;
        }
        let w: Vec<f64> = self.history.iter().map(|h| (h.iter().map(|l| l * l).sum::<f64>() / HISTORY as f64).sqrt()).collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return uniform;
        }
        w.iter().map(|x| (1.0 - UNIFORM_MIX) * x / total + UNIFORM_MIX / self.steps as f64).collect()
    }

    /// Draws `t` and its importance weight `1/(T·pₜ)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        if !self.warmed_up() {
            return (rng.gen_range(1..=self.steps), 1.0);
        }
        let p = self.probabilities();
        let i = WeightedIndex::new(&p).expect("positive probabilities").sample(rng);
        (i + 1, 1.0 / (self.steps as f64 * p[i]))
    }

    /// Flattened state for checkpoints: counts then histories.
    pub fn to_text(&self) -> String {
        let mut parts: Vec<String> = self.counts.iter().map(u64::to_string).collect();
        parts.extend(self.history.iter().flatten().map(|x| format!("{:016x}", x.to_bits())));
        parts.join(" ")
    }

    pub fn from_text(steps: usize, text: &str) -> Option<Self> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        if parts.len() != steps * (1 + HISTORY) {
            return None;
        }
        let counts = parts[..steps].iter().map(|p| p.parse().ok()).collect::<Option<Vec<u64>>>()?;
        let vals = parts[steps..].iter().map(|p| u64::from_str_radix(p, 16).ok().map(f64::from_bits)).collect::<Option<Vec<f64>>>()?;
        let history = vals.chunks(HISTORY).map(|c| c.try_into().expect("chunk of HISTORY")).collect();
        Some(TimeSampler { steps, history, counts })
    }
}
