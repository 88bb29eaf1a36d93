//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `PFLJSCC\0`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the UTF-8 JSON manifest,
//! then every tensor's values as little-endian `f64` in manifest order.

use std::path::Path;

use pfljscc_core::federation::TrainingState;
use pfljscc_core::tensor::ParamMap;
use pfljscc_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const MAGIC: [u8; 8] = *b"PFLJSCC\0";
pub const VERSION: u32 = 1;

/// Parameter block a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Block {
    /// Shared block.
    U,
    /// Personalized block of one client.
    V { client: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub block: Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Completed rounds.
    pub round: usize,
    pub config: ExperimentConfig,
    pub tensors: Vec<TensorEntry>,
}

/// A saved training state with the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: TrainingState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut values: Vec<&Tensor> = Vec::new();
        let mut push = |map: &ParamMap, block: Block| {
            for (name, t) in map {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    block,
                });
            }
        };
        push(&self.state.u, Block::U);
        for (client, v) in self.state.v.iter().enumerate() {
            push(v, Block::V { client });
        }
        values.extend(self.state.u.values());
        for v in &self.state.v {
            values.extend(v.values());
        }
        let manifest = Manifest {
            round: self.state.round,
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out =
            Vec::with_capacity(20 + json.len() + 8 * values.iter().map(|t| t.len()).sum::<usize>());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in values {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| HarnessError::checkpoint(path, m);
        if bytes.len() < 20 || bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(len))
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| bad(&format!("manifest: {e}")))?;
        let mut rest = &bytes[20 + len..];
        let mut u = ParamMap::new();
        let mut v = vec![ParamMap::new(); manifest.config.clients];
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if rest.len() < 8 * n {
                return Err(bad(&format!("truncated data for `{}`", e.name)));
            }
            let data = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[8 * n..];
            let t = Tensor::new(&e.shape, data)?;
            match e.block {
                Block::U => {
                    u.insert(e.name.clone(), t);
                }
                Block::V { client } => {
                    v.get_mut(client)
                        .ok_or_else(|| bad(&format!("client {client} out of range")))?
                        .insert(e.name.clone(), t);
                }
            }
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let mut state = TrainingState::new(u, v);
        state.round = manifest.round;
        Ok(Self {
            config: manifest.config,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut config = ExperimentConfig::paper_defaults();
        config.clients = 2;
        let mut u = ParamMap::new();
        u.insert(
            "enc.w".into(),
            Tensor::new(&[2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]).unwrap(),
        );
        let mut v0 = ParamMap::new();
        v0.insert("enc.aux.w".into(), Tensor::from_slice(&[0.1, 0.2, 0.3]));
        let mut v1 = ParamMap::new();
        v1.insert("enc.aux.w".into(), Tensor::from_slice(&[-0.1, -0.2, -0.3]));
        let mut state = TrainingState::new(u, vec![v0, v1]);
        state.round = 7;
        Checkpoint { config, state }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        let mut ver = bytes;
        ver[8] = 9;
        assert!(Checkpoint::from_bytes(&ver, p).is_err());
    }
}
