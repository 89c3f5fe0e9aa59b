//! Versioned, checksummed training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `EVCLIPCK` |
//! | 4     | format version (u32) |
//! | 8     | header length `h` (u64) |
//! | h     | UTF-8 JSON header |
//! | 8·n   | f64 payload: parameters, then Adam first and second moments |
//! | 32    | SHA-256 of every preceding byte |
//!
//! The header holds the training config, category list, backend identifier
//! and preprocessing, parameter names and shapes, optimizer step and the
//! global step. All randomness during training is derived from
//! `(config.seed, step)`, so the step is the complete RNG state.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::Preprocessing;
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::pipeline::TrainConfig;
use crate::reconstruction::{Param, ReconNet, ReconNetConfig};

const MAGIC: &[u8; 8] = b"EVCLIPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub categories: Vec<String>,
    pub params: Vec<Param>,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub backend: String,
    pub preprocessing: Preprocessing,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    categories: Vec<String>,
    params: Vec<ParamMeta>,
    optimizer_step: u64,
    step: u64,
    backend: String,
    preprocessing: Preprocessing,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Rebuilds the network described by the stored config.
    pub fn network(&self) -> Result<ReconNet> {
        self.network_for(&self.config.recon_config())
    }

    /// Rebuilds the network for `expected`, which must agree with the
    /// stored architecture.
    pub fn network_for(&self, expected: &ReconNetConfig) -> Result<ReconNet> {
        let stored = self.config.recon_config();
        if stored.input_channels() != expected.input_channels() {
            return Err(Error::ChannelMismatch {
                expected: expected.input_channels(),
                actual: stored.input_channels(),
            });
        }
        let mut net = ReconNet::init(expected.clone(), 0)?;
        net.load_params(self.params.clone())?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            categories: self.categories.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            optimizer_step: self.optimizer.step,
            step: self.step,
            backend: self.backend.clone(),
            preprocessing: self.preprocessing.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let arrays = self
            .params
            .iter()
            .map(|p| &p.data)
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for a in arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(20..20 + hlen)
            .ok_or_else(|| Error::Integrity("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::Integrity(format!("bad header: {e}")))?;
        let payload = &body[20 + hlen..];
        let sizes: Vec<usize> = header
            .params
            .iter()
            .map(|p| p.shape.iter().product())
            .collect();
        let total: usize = sizes.iter().sum();
        if payload.len() != 3 * total * 8 {
            return Err(Error::Integrity(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                3 * total * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let params = header
            .params
            .into_iter()
            .zip(&sizes)
            .map(|(m, &n)| Param {
                name: m.name,
                shape: m.shape,
                data: take(n),
            })
            .collect();
        let m = sizes.iter().map(|&n| take(n)).collect();
        let v = sizes.iter().map(|&n| take(n)).collect();
        Ok(Self {
            config: header.config,
            categories: header.categories,
            params,
            optimizer: OptimizerState {
                step: header.optimizer_step,
                m,
                v,
            },
            step: header.step,
            backend: header.backend,
            preprocessing: header.preprocessing,
        })
    }
}

/// Writes through a temporary file so a crash never leaves a partial
/// checkpoint under the final name.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
