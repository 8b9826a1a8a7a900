//! Binary checkpoint container.
//!
//! Layout (all integers little-endian u64, floats little-endian f64):
//! magic line, metadata count, `key`/`value` string pairs, array count, then
//! per array `name`, rank, dims, data; finally the SHA-256 of everything
//! before it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, NetError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"differ-ckpt-v1\n";

/// Parameters, config and free-form metadata (vocabulary, run mode, ...).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub extra: BTreeMap<String, String>,
}

const CONFIG_KEYS: [&str; 10] = ["layers", "heads", "d_model", "d_ff", "vocab", "max_len", "l_max", "steps", "pad_limit", "dropout"];

fn config_entries(c: &ModelConfig) -> Vec<(String, String)> {
    let vals = [
        c.layers.to_string(),
        c.heads.to_string(),
        c.d_model.to_string(),
        c.d_ff.to_string(),
        c.vocab.to_string(),
        c.max_len.to_string(),
        c.l_max.to_string(),
        c.steps.to_string(),
        c.pad_limit.to_string(),
        // Round-trips exactly through Display/FromStr.
        c.dropout.to_string(),
    ];
    CONFIG_KEYS.iter().map(|k| format!("config.{k}")).zip(vals).collect()
}

fn config_from(meta: &BTreeMap<String, String>) -> Result<ModelConfig, NetError> {
    let get = |k: &str| -> Result<&str, NetError> {
        meta.get(&format!("config.{k}")).map(String::as_str).ok_or_else(|| NetError::Checkpoint(format!("missing config.{k}")))
    };
    let int = |k: &str| -> Result<usize, NetError> {
        get(k)?.parse().map_err(|_| NetError::Checkpoint(format!("config.{k} is not an integer")))
    };
    Ok(ModelConfig {
        layers: int("layers")?,
        heads: int("heads")?,
        d_model: int("d_model")?,
        d_ff: int("d_ff")?,
        vocab: int("vocab")?,
        max_len: int("max_len")?,
        l_max: int("l_max")?,
        steps: int("steps")?,
        pad_limit: int("pad_limit")?,
        dropout: get("dropout")?.parse().map_err(|_| NetError::Checkpoint("config.dropout is not a number".into()))?,
    })
}

fn put_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

pub fn write_checkpoint(model: &Model, extra: &BTreeMap<String, String>) -> Result<Vec<u8>, NetError> {
    let mut meta: Vec<(String, String)> = config_entries(model.config());
    for (k, v) in extra {
        if k.starts_with("config.") {
            return Err(NetError::Contract(format!("metadata key {k} collides with the config namespace")));
        }
        meta.push((k.clone(), v.clone()));
    }
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    put_u64(&mut buf, meta.len() as u64);
    for (k, v) in &meta {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    put_u64(&mut buf, model.params.len() as u64);
    for p in &model.params {
        put_str(&mut buf, p.name());
        put_u64(&mut buf, p.shape().len() as u64);
        for &d in p.shape() {
            put_u64(&mut buf, d as u64);
        }
        for &x in p.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NetError> {
        if self.buf.len() - self.pos < n {
            return Err(NetError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length field, bounded by the bytes that remain.
    fn len(&mut self, unit: usize) -> Result<usize, NetError> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > left) {
            return Err(NetError::Checkpoint(format!("length {n} at byte {} exceeds the file", self.pos - 8)));
        }
        Ok(n as usize)
    }

    fn string(&mut self) -> Result<String, NetError> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NetError::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NetError> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        let line = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
        return Err(NetError::Checkpoint(format!(
            "unsupported version tag {:?}, expected {:?}",
            String::from_utf8_lossy(&line[..line.len().min(40)]),
            "differ-ckpt-v1"
        )));
    }
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
        return Err(NetError::Checkpoint("truncated file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(NetError::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { buf: body, pos: CHECKPOINT_MAGIC.len() };
    let mut meta = BTreeMap::new();
    for _ in 0..r.len(16)? {
        let k = r.string()?;
        let v = r.string()?;
        meta.insert(k, v);
    }
    let config = config_from(&meta)?;
    let mut params = Vec::new();
    for _ in 0..r.len(16)? {
        let name = r.string()?;
        let rank = r.len(8)?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| NetError::Checkpoint("shape overflow".into()))?;
        if n.checked_mul(8).is_none_or(|b| b > body.len() - r.pos) {
            return Err(NetError::Checkpoint(format!("array {name} exceeds the file")));
        }
        let data = r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push(Tensor::new(name, shape, data).map_err(|e| NetError::Checkpoint(e.to_string()))?);
    }
    if r.pos != body.len() {
        return Err(NetError::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let extra = meta.into_iter().filter(|(k, _)| !k.starts_with("config.")).collect();
    Ok(Checkpoint { model: Model::from_params(config, params)?, extra })
}

pub fn save_checkpoint(path: &Path, model: &Model, extra: &BTreeMap<String, String>) -> Result<(), NetError> {
    let bytes = write_checkpoint(model, extra)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetError> {
    read_checkpoint(&std::fs::read(path)?)
}
