//! Checkpoint container: `MCKPT1 <manifest bytes>\n`, a JSON manifest
//! (model config, seed, phase, step, tensor tables), then every tensor as
//! little-endian `f32` in manifest order, parameters first and optimizer
//! moments after.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{MamocNet, ModelConfig};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &str = "MCKPT1";
const MAX_MANIFEST: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub phase: Phase,
    pub step: u64,
    pub params: ParamStore<f32>,
    /// Lion momentum, laid out like `params`.
    pub momentum: Option<ParamStore<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    seed: u64,
    phase: Phase,
    step: u64,
    tensors: Vec<TensorEntry>,
    momentum: Vec<TensorEntry>,
}

fn entries(p: &ParamStore<f32>) -> Vec<TensorEntry> {
    (0..p.len()).map(|i| TensorEntry { name: p.name(i).to_owned(), shape: p.shape(i).to_vec() }).collect()
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let manifest = Manifest {
        config: ck.config.clone(),
        seed: ck.seed,
        phase: ck.phase,
        step: ck.step,
        tensors: entries(&ck.params),
        momentum: ck.momentum.as_ref().map(entries).unwrap_or_default(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = format!("{CHECKPOINT_MAGIC} {}\n", json.len()).into_bytes();
    out.extend_from_slice(&json);
    let stores = std::iter::once(&ck.params).chain(ck.momentum.as_ref());
    for store in stores {
        for t in store.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::CheckpointError(msg.into())
}

fn read_store(net: &MamocNet, table: &[TensorEntry], payload: &mut &[u8], what: &str) -> Result<ParamStore<f32>> {
    let specs = net.registry().specs();
    if table.len() != specs.len() {
        return Err(bad(format!("{what}: {} tensors, model has {}", table.len(), specs.len())));
    }
    let mut tensors = Vec::with_capacity(table.len());
    for (e, s) in table.iter().zip(specs) {
        if e.name != s.name || e.shape != s.shape {
            return Err(bad(format!("{what}: tensor {} {:?} does not match model {} {:?}", e.name, e.shape, s.name, s.shape)));
        }
        let bytes = s.numel() * 4;
        if payload.len() < bytes {
            return Err(Error::TruncatedStream { expected: bytes, found: payload.len() });
        }
        let (head, rest) = payload.split_at(bytes);
        tensors.push(head.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect());
        *payload = rest;
    }
    ParamStore::from_parts(
        specs.iter().map(|s| s.name.clone()).collect(),
        specs.iter().map(|s| s.shape.clone()).collect(),
        tensors,
    )
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let limit = bytes.len().min(64);
    let nl = bytes[..limit].iter().position(|&b| b == b'\n').ok_or_else(|| {
        if bytes.starts_with(CHECKPOINT_MAGIC.as_bytes()) {
            bad("header line not terminated")
        } else {
            Error::BadMagic("expected MCKPT1".into())
        }
    })?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
    let len = match line.split_once(' ') {
        Some((CHECKPOINT_MAGIC, n)) => n.parse::<usize>().map_err(|_| bad(format!("bad manifest length {n:?}")))?,
        _ => return Err(Error::BadMagic("expected MCKPT1".into())),
    };
    let body = &bytes[nl + 1..];
    if len > MAX_MANIFEST || len > body.len() {
        return Err(Error::TruncatedStream { expected: len, found: body.len() });
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
    let net = MamocNet::new(manifest.config.clone()).map_err(|e| bad(format!("config: {e}")))?;
    let mut payload = &body[len..];
    let params = read_store(&net, &manifest.tensors, &mut payload, "parameters")?;
    let momentum = if manifest.momentum.is_empty() {
        None
    } else {
        Some(read_store(&net, &manifest.momentum, &mut payload, "momentum")?)
    };
    if !payload.is_empty() {
        return Err(bad(format!("{} trailing bytes", payload.len())));
    }
    Ok(Checkpoint { config: manifest.config, seed: manifest.seed, phase: manifest.phase, step: manifest.step, params, momentum })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = ModelConfig { side: 8, base_channels: 4, depth: 1, blocks_per_stage: 1, window: 2, heads: 2, ..Default::default() };
        let net = MamocNet::new(config.clone()).unwrap();
        let params = net.init_parameters(11);
        let mut m = params.clone();
        m.scale(-0.5);
        Checkpoint { config, seed: 11, phase: Phase::Pretrain, step: 42, params, momentum: Some(m) }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);
        let plain = Checkpoint { momentum: None, ..ck };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&plain)).unwrap(), plain);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample());
        assert!(matches!(decode_checkpoint(b"NOPE 3\n{}"), Err(Error::BadMagic(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 2]), Err(Error::TruncatedStream { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::CheckpointError(_))));
        let text = String::from_utf8_lossy(&bytes).replace("\"step\":42", "\"step\":4x");
        assert!(decode_checkpoint(text.as_bytes()).is_err());
    }
}
