//! Encoder-decoder transformer with a length head.
//!
//! The encoder reads `[LENGTH] + product` and yields a memory matrix whose
//! first row feeds the length classifier. The decoder reads the noised
//! target plus positional and timestep encodings, attends to the memory
//! without any causal mask, and emits per-position logits over the
//! vocabulary.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffusion::{timestep_embedding, CategoricalSeq, DiffusionError, Denoiser};
use crate::smiles::LENGTH;
use crate::tensor::{Mode, Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Vocabulary size `K`.
    pub vocab: usize,
    pub max_len: usize,
    /// Length deltas are classified over `-l_max..=l_max`.
    pub l_max: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
    /// Upper bound of the random pad count.
    pub pad_limit: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small defaults suitable for desk-scale runs.
    pub fn toy(vocab: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 128,
            vocab,
            max_len: 96,
            l_max: 64,
            steps: 50,
            pad_limit: 20,
            dropout: 0.0,
        }
    }

    pub fn length_classes(&self) -> usize {
        2 * self.l_max + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NetError::Contract(m));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layers, heads, d_model and d_ff must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_model % 2 != 0 {
            return fail(format!("d_model {} must be even for sinusoidal encodings", self.d_model));
        }
        if self.vocab < 5 {
            return fail(format!("vocabulary of {} leaves no room for tokens", self.vocab));
        }
        if self.l_max < self.pad_limit {
            return fail(format!("l_max {} is below the pad limit {}", self.l_max, self.pad_limit));
        }
        if self.steps == 0 || self.max_len < 2 {
            return fail("steps must be positive and max_len at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ff: FeedForward,
}

/// Parameter indices; the order of creation is the order of registration
/// on a tape and in checkpoints.
#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    length_hidden: Linear,
    length_out: Linear,
    time: Linear,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out: Linear,
}

/// Creates named parameter tensors and records their positions.
struct Builder<'r> {
    params: Vec<Tensor>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match (&mut self.rng, init) {
            (_, Init::Zeros) => vec![0.0; n],
            (_, Init::Ones) => vec![1.0; n],
            (None, _) => vec![0.0; n],
            (Some(rng), Init::Uniform(a)) => (0..n).map(|_| rng.gen_range(-a..a)).collect(),
        };
        self.params.push(Tensor::new(name, shape, data).expect("finite initial values of the declared shape"));
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: self.push(format!("{name}.w"), vec![fan_in, fan_out], Init::Uniform(a)),
            b: self.push(format!("{name}.b"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm { g: self.push(format!("{name}.g"), vec![d], Init::Ones), b: self.push(format!("{name}.b"), vec![d], Init::Zeros) }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward { up: self.linear(&format!("{name}.up"), d, d_ff), down: self.linear(&format!("{name}.down"), d_ff, d) }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Uniform(f64),
}

fn build_layout(cfg: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (Layout, Vec<Tensor>) {
    let d = cfg.d_model;
    let mut b = Builder { params: Vec::new(), rng };
    // Unit-variance embeddings, comparable in scale to the sinusoidal terms.
    let tok_emb = b.push("tok_emb".into(), vec![cfg.vocab, d], Init::Uniform(3f64.sqrt()));
    let encoder = (0..cfg.layers)
        .map(|l| EncoderLayer {
            ln1: b.norm(&format!("enc.{l}.ln1"), d),
            attn: b.attention(&format!("enc.{l}.attn"), d),
            ln2: b.norm(&format!("enc.{l}.ln2"), d),
            ff: b.feed_forward(&format!("enc.{l}.ff"), d, cfg.d_ff),
        })
        .collect();
    let enc_norm = b.norm("enc.norm", d);
    let length_hidden = b.linear("length.hidden", d, d);
    let length_out = b.linear("length.out", d, cfg.length_classes());
    let time = b.linear("time", d, d);
    let decoder = (0..cfg.layers)
        .map(|l| DecoderLayer {
            ln1: b.norm(&format!("dec.{l}.ln1"), d),
            self_attn: b.attention(&format!("dec.{l}.self"), d),
            ln2: b.norm(&format!("dec.{l}.ln2"), d),
            cross_attn: b.attention(&format!("dec.{l}.cross"), d),
            ln3: b.norm(&format!("dec.{l}.ln3"), d),
            ff: b.feed_forward(&format!("dec.{l}.ff"), d, cfg.d_ff),
        })
        .collect();
    let dec_norm = b.norm("dec.norm", d);
    let out = b.linear("out", d, cfg.vocab);
    let layout = Layout { tok_emb, encoder, enc_norm, length_hidden, length_out, time, decoder, dec_norm, out };
    (layout, b.params)
}

const LN_EPS: f64 = 1e-5;

/// How the target length is chosen from the length distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthChoice {
    Argmax,
    /// Draw from the softmax of the length logits (seeded).
    Sample(u64),
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    pub params: Vec<Tensor>,
    /// Sinusoidal position table, `max_len × d_model`.
    positions: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = build_layout(&config, Some(&mut rng));
        Ok(Self::assemble(config, layout, params))
    }

    /// Rebuilds a model around existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let (layout, expected) = build_layout(&config, None);
        if expected.len() != params.len() {
            return Err(NetError::Checkpoint(format!("expected {} arrays, found {}", expected.len(), params.len())));
        }
        for (e, p) in expected.iter().zip(&params) {
            if e.name() != p.name() || e.shape() != p.shape() {
                return Err(NetError::Checkpoint(format!(
                    "array {} {:?} does not match expected {} {:?}",
                    p.name(),
                    p.shape(),
                    e.name(),
                    e.shape()
                )));
            }
        }
        Ok(Self::assemble(config, layout, params))
    }

    fn assemble(config: ModelConfig, layout: Layout, params: Vec<Tensor>) -> Self {
        let d = config.d_model;
        let positions = (0..config.max_len)
            .flat_map(|p| timestep_embedding(p as f64, d).expect("d_model is even"))
            .collect();
        Model { config, layout, params, positions }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape`, in layout order.
    pub fn register<'p>(&'p self, tape: &mut Tape<'p>) -> Result<Vec<Var>> {
        Ok(self.params.iter().map(|p| tape.param(p)).collect::<std::result::Result<_, _>>()?)
    }

    /// Encoder pass on a tape. Returns `(memory, length_logits)` with shapes
    /// `(ℓ_x+1)×d_model` and `1×(2·l_max+1)`.
    pub fn encode(&self, tape: &mut Tape<'_>, vars: &[Var], product: &[u32]) -> Result<(Var, Var)> {
        let len = product.len() + 1;
        if len > self.config.max_len {
            return Err(NetError::Contract(format!("source of {} tokens exceeds max_len {}", len, self.config.max_len)));
        }
        let ids: Vec<usize> = std::iter::once(LENGTH).chain(product.iter().copied()).map(|t| t as usize).collect();
        self.check_ids(&ids)?;
        let lay = &self.layout;
        let emb = tape.embedding(vars[lay.tok_emb], &ids)?;
        let pe = tape.constant(self.positions[..len * self.config.d_model].to_vec(), len, self.config.d_model)?;
        let mut x = tape.add(emb, pe)?;
        for layer in &lay.encoder {
            let h = norm(tape, vars, layer.ln1, x)?;
            let a = self.attention(tape, vars, &layer.attn, h, h)?;
            let a = tape.dropout(a, self.config.dropout)?;
            x = tape.add(x, a)?;
            let h = norm(tape, vars, layer.ln2, x)?;
            let f = feed_forward(tape, vars, &layer.ff, h)?;
            let f = tape.dropout(f, self.config.dropout)?;
            x = tape.add(x, f)?;
        }
        let memory = norm(tape, vars, lay.enc_norm, x)?;
        let first = tape.slice_rows(memory, 0, 1)?;
        let logits = self.length_head(tape, vars, first)?;
        Ok((memory, logits))
    }

    fn length_head(&self, tape: &mut Tape<'_>, vars: &[Var], row: Var) -> Result<Var> {
        let h = linear(tape, vars, self.layout.length_hidden, row)?;
        let h = tape.gelu(h)?;
        linear(tape, vars, self.layout.length_out, h)
    }

    /// Decoder pass with positions `0..ℓ`.
    pub fn decode(&self, tape: &mut Tape<'_>, vars: &[Var], y_t: &[u32], t: usize, memory: Var) -> Result<Var> {
        let positions: Vec<usize> = (0..y_t.len()).collect();
        self.decode_at(tape, vars, y_t, &positions, t, memory)
    }

    /// Decoder pass with explicit position indices per target slot. Returns
    /// `ℓ×K` logits.
    pub fn decode_at(
        &self,
        tape: &mut Tape<'_>,
        vars: &[Var],
        y_t: &[u32],
        positions: &[usize],
        t: usize,
        memory: Var,
    ) -> Result<Var> {
        let (len, d) = (y_t.len(), self.config.d_model);
        if len == 0 || len > self.config.max_len || positions.len() != len {
            return Err(NetError::Contract(format!("target of {len} tokens outside 1..={}", self.config.max_len)));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_len) {
            return Err(NetError::Contract(format!("position {p} outside the encoding table")));
        }
        if tape.shape(memory).1 != d {
            return Err(NetError::Contract(format!("memory width {} differs from d_model {d}", tape.shape(memory).1)));
        }
        let ids: Vec<usize> = y_t.iter().map(|&t| t as usize).collect();
        self.check_ids(&ids)?;
        let lay = &self.layout;
        let emb = tape.embedding(vars[lay.tok_emb], &ids)?;
        let mut pe = Vec::with_capacity(len * d);
        for &p in positions {
            pe.extend_from_slice(&self.positions[p * d..(p + 1) * d]);
        }
        let pe = tape.constant(pe, len, d)?;
        // Projected so the timestep term is not a copy of a position code.
        let time = tape.constant(timestep_embedding(t as f64, d).expect("d_model is even"), 1, d)?;
        let time = linear(tape, vars, lay.time, time)?;
        let x = tape.add(emb, pe)?;
        let mut x = tape.add_row(x, time)?;
        for layer in &lay.decoder {
            let h = norm(tape, vars, layer.ln1, x)?;
            let a = self.attention(tape, vars, &layer.self_attn, h, h)?;
            let a = tape.dropout(a, self.config.dropout)?;
            x = tape.add(x, a)?;
            let h = norm(tape, vars, layer.ln2, x)?;
            let c = self.attention(tape, vars, &layer.cross_attn, h, memory)?;
            let c = tape.dropout(c, self.config.dropout)?;
            x = tape.add(x, c)?;
            let h = norm(tape, vars, layer.ln3, x)?;
            let f = feed_forward(tape, vars, &layer.ff, h)?;
            let f = tape.dropout(f, self.config.dropout)?;
            x = tape.add(x, f)?;
        }
        let h = norm(tape, vars, lay.dec_norm, x)?;
        linear(tape, vars, lay.out, h)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab) {
            Some(bad) => Err(NetError::Contract(format!("token id {bad} outside vocabulary of {}", self.config.vocab))),
            None => Ok(()),
        }
    }

    /// Multi-head scaled dot-product attention, no mask.
    fn attention(&self, tape: &mut Tape<'_>, vars: &[Var], a: &Attention, query: Var, context: Var) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let q = linear(tape, vars, a.q, query)?;
        let k = linear(tape, vars, a.k, context)?;
        let v = linear(tape, vars, a.v, context)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, h * dh, dh)?, tape.slice_cols(k, h * dh, dh)?, tape.slice_cols(v, h * dh, dh)?)
            };
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let p = tape.softmax(s)?;
            outs.push(tape.matmul(p, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        linear(tape, vars, a.o, cat)
    }

    /// Runs the encoder without recording and returns the memory matrix
    /// (row-major) and the length logits.
    pub fn encode_values(&self, product: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(Mode::Inference);
        let vars = self.register(&mut tape)?;
        let (memory, logits) = self.encode(&mut tape, &vars, product)?;
        Ok((tape.value(memory).to_vec(), tape.value(logits).to_vec()))
    }

    /// Length logits computed from a single memory row.
    pub fn length_logits_from_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(Mode::Inference);
        let vars = self.register(&mut tape)?;
        let r = tape.constant(row.to_vec(), 1, row.len())?;
        let logits = self.length_head(&mut tape, &vars, r)?;
        Ok(tape.value(logits).to_vec())
    }

    /// Maps length logits to a target length: `ℓ_x + (class − l_max)`,
    /// clamped to `1..=max_len`.
    pub fn length_from_logits(&self, source_len: usize, logits: &[f64], choice: LengthChoice) -> usize {
        let class = match choice {
            LengthChoice::Argmax => argmax(logits),
            LengthChoice::Sample(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let mut u = rng.gen::<f64>() * w.iter().sum::<f64>();
                let mut pick = w.len() - 1;
                for (i, wi) in w.iter().enumerate() {
                    if u < *wi {
                        pick = i;
                        break;
                    }
                    u -= wi;
                }
                pick
            }
        };
        let len = source_len as i64 + class as i64 - self.config.l_max as i64;
        len.clamp(1, self.config.max_len as i64) as usize
    }

    pub fn predict_length(&self, product: &[u32], choice: LengthChoice) -> Result<usize> {
        let (_, logits) = self.encode_values(product)?;
        Ok(self.length_from_logits(product.len(), &logits, choice))
    }

    /// A denoiser bound to one encoded product.
    pub fn denoiser(&self, product: &[u32]) -> Result<ModelDenoiser<'_>> {
        let (memory, length_logits) = self.encode_values(product)?;
        Ok(ModelDenoiser { model: self, rows: product.len() + 1, memory, length_logits })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn linear(tape: &mut Tape<'_>, vars: &[Var], l: Linear, x: Var) -> Result<Var> {
    let y = tape.matmul(x, vars[l.w])?;
    Ok(tape.add_row(y, vars[l.b])?)
}

fn norm(tape: &mut Tape<'_>, vars: &[Var], n: Norm, x: Var) -> Result<Var> {
    Ok(tape.layer_norm(x, vars[n.g], vars[n.b], LN_EPS)?)
}

fn feed_forward(tape: &mut Tape<'_>, vars: &[Var], f: &FeedForward, x: Var) -> Result<Var> {
    let h = linear(tape, vars, f.up, x)?;
    let h = tape.gelu(h)?;
    linear(tape, vars, f.down, h)
}

/// Decoder bound to a fixed encoder memory; plugs into the reverse chain.
pub struct ModelDenoiser<'m> {
    model: &'m Model,
    rows: usize,
    memory: Vec<f64>,
    length_logits: Vec<f64>,
}

impl ModelDenoiser<'_> {
    /// Length logits from the same encoder pass.
    pub fn length_logits(&self) -> &[f64] {
        &self.length_logits
    }

    /// Softmax of the decoder logits for the tokens of `y_t`.
    pub fn predict(&self, y_t: &[u32], t: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new(Mode::Inference);
        let vars = self.model.register(&mut tape)?;
        let memory = tape.constant_ref(&self.memory, self.rows, self.model.config.d_model)?;
        let logits = self.model.decode(&mut tape, &vars, y_t, t, memory)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).to_vec())
    }
}

impl Denoiser for ModelDenoiser<'_> {
    fn denoise(&self, y_t: &CategoricalSeq, t: usize) -> std::result::Result<CategoricalSeq, DiffusionError> {
        let probs = self.predict(&y_t.argmax(), t).map_err(|e| DiffusionError::Denoiser(e.to_string()))?;
        CategoricalSeq::from_probs(self.model.config.vocab, probs)
    }
}
