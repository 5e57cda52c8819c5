//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MCTCCKPT"
//! version      u32
//! header_len   u64
//! header       JSON: config, vocabulary, seed, training state, tensor index
//! blobs        per tensor: u32 name_len, name, f64 × numel
//! digest       32 bytes SHA-256 over everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MCTCCKPT";
const DIGEST_LEN: usize = 32;
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

/// Optimizer progress carried across resumes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub seed: u64,
    /// Parameters in model registration order.
    pub params: Vec<(String, Tensor)>,
    pub train_state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    seed: u64,
    epoch: Option<usize>,
    step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl ModelCheckpoint {
    fn all_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(state) = &self.train_state {
            out.extend(state.first_moment.iter().map(|(n, t)| (format!("{MOMENT1}{n}"), t)));
            out.extend(state.second_moment.iter().map(|(n, t)| (format!("{MOMENT2}{n}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.all_tensors();
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            seed: self.seed,
            epoch: self.train_state.as_ref().map(|s| s.epoch),
            step: self.train_state.as_ref().map(|s| s.step),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch"));
        }
        let mut reader = Reader { bytes: body, pos: 12 };
        let header_len = reader.u64()? as usize;
        let header: Header = serde_json::from_slice(reader.take(header_len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        header.vocab.validate()?;

        let mut params = Vec::new();
        let mut first_moment = BTreeMap::new();
        let mut second_moment = BTreeMap::new();
        for entry in &header.tensors {
            let name_len = reader.u32()? as usize;
            let name = std::str::from_utf8(reader.take(name_len)?).map_err(|_| corrupt("tensor name"))?;
            if name != entry.name {
                return Err(corrupt(&format!("blob {name} out of order, expected {}", entry.name)));
            }
            let numel: usize = entry.shape.iter().product();
            let raw = reader.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)?;
            if let Some(n) = name.strip_prefix(MOMENT1) {
                first_moment.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(MOMENT2) {
                second_moment.insert(n.to_string(), t);
            } else {
                params.push((name.to_string(), t));
            }
        }
        if reader.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let train_state = match (header.epoch, header.step) {
            (Some(epoch), Some(step)) => Some(TrainState {
                epoch,
                step,
                first_moment,
                second_moment,
            }),
            _ => None,
        };
        Ok(ModelCheckpoint {
            format_version: version,
            config: header.config,
            vocab: header.vocab,
            seed: header.seed,
            params,
            train_state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Elementwise mean of parameters. Uses a running mean so that averaging
/// identical checkpoints reproduces them bitwise. Training state is dropped.
pub fn average_checkpoints(ckpts: &[ModelCheckpoint]) -> Result<ModelCheckpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::Contract("nothing to average".into()))?;
    let mut params = first.params.clone();
    for (k, c) in ckpts.iter().enumerate().skip(1) {
        if c.config != first.config || c.vocab != first.vocab || c.params.len() != params.len() {
            return Err(Error::Data("checkpoints have different architectures".into()));
        }
        let weight = 1.0 / (k + 1) as f64;
        for ((name, acc), (other_name, t)) in params.iter_mut().zip(&c.params) {
            if name != other_name || acc.shape() != t.shape() {
                return Err(Error::Data(format!("parameter {name} does not line up with {other_name}")));
            }
            for (a, &x) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += (x - *a) * weight;
            }
        }
    }
    Ok(ModelCheckpoint {
        format_version: FORMAT_VERSION,
        config: first.config.clone(),
        vocab: first.vocab.clone(),
        seed: first.seed,
        params,
        train_state: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, Vocabulary};

    fn sample() -> ModelCheckpoint {
        let mut cfg = ModelConfig::new(4);
        cfg.encoder.attn_dim = 8;
        cfg.encoder.num_heads = 2;
        cfg.encoder.ffn_dim = 8;
        cfg.encoder.num_layers = 1;
        cfg.decoder.num_heads = 2;
        cfg.decoder.ffn_dim = 8;
        cfg.decoder.num_layers = 1;
        Model::new(cfg, Vocabulary::synthetic(3).unwrap(), 11)
            .unwrap()
            .to_checkpoint()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut ckpt = sample();
        let moments: BTreeMap<_, _> = ckpt.params.iter().take(2).cloned().collect();
        ckpt.train_state = Some(TrainState {
            epoch: 3,
            step: 42,
            first_moment: moments.clone(),
            second_moment: moments,
        });
        let back = ModelCheckpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        for ((_, a), (_, b)) in back.params.iter().zip(&ckpt.params) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn detects_corruption_and_version() {
        let bytes = sample().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&flipped),
            Err(Error::CorruptCheckpoint(_))
        ));
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&versioned),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn averaging_identical_checkpoints_is_identity() {
        let c = sample();
        let avg = average_checkpoints(&[c.clone(), c.clone(), c.clone()]).unwrap();
        for ((_, a), (_, b)) in avg.params.iter().zip(&c.params) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn averaging_two_checkpoints_takes_the_midpoint() {
        let a = sample();
        let mut b = a.clone();
        for (_, t) in &mut b.params {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        let avg = average_checkpoints(&[a.clone(), b]).unwrap();
        let (x, y) = (&avg.params[0].1, &a.params[0].1);
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q - 0.5).abs() < 1e-12);
        }
    }
}
