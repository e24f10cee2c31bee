//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `PAMACKPT`, a little-endian `u64` header length,
//! a JSON header, then the parameters as little-endian `f64`s. Policy
//! checkpoints store `theta` followed by the frozen reference copy; theory
//! checkpoints store the final iterate only.

use std::path::Path;

use pama_core::autodiff::{Architecture, PolicyBundle};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"PAMACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Policy,
    Theory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: u32,
    pub kind: CheckpointKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub value_hidden: usize,
    pub n_value_heads: usize,
    pub seed: u64,
    pub stop_value_gradient: bool,
    /// Length of one parameter vector.
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Policy(PolicyBundle),
    Theory { theta: Vec<f64> },
}

impl Checkpoint {
    pub fn header(&self) -> Header {
        match self {
            Checkpoint::Policy(b) => {
                let a = b.arch();
                Header {
                    format: FORMAT_VERSION,
                    kind: CheckpointKind::Policy,
                    vocab_size: a.vocab_size,
                    embed_dim: a.embed_dim,
                    hidden_dim: a.hidden_dim,
                    value_hidden: a.value_hidden,
                    n_value_heads: a.n_value_heads,
                    seed: b.seed,
                    stop_value_gradient: b.stop_value_gradient,
                    param_count: b.param_count(),
                }
            }
            Checkpoint::Theory { theta } => Header {
                format: FORMAT_VERSION,
                kind: CheckpointKind::Theory,
                vocab_size: 0,
                embed_dim: 0,
                hidden_dim: 0,
                value_hidden: 0,
                n_value_heads: 0,
                seed: 0,
                stop_value_gradient: false,
                param_count: theta.len(),
            },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header always serializes");
        let params: Vec<&[f64]> = match self {
            Checkpoint::Policy(b) => vec![&b.theta, b.ref_theta()],
            Checkpoint::Theory { theta } => vec![theta],
        };
        let n: usize = params.iter().map(|p| p.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for x in params.into_iter().flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Decodes a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing PAMACKPT magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad(format!("header length {hlen} exceeds file size")));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("corrupted header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format)));
        }
        let payload = &body[hlen..];
        let copies = match header.kind {
            CheckpointKind::Policy => 2,
            CheckpointKind::Theory => 1,
        };
        let expected = header
            .param_count
            .checked_mul(8 * copies)
            .ok_or_else(|| bad("parameter count overflows".into()))?;
        if payload.len() != expected {
            return Err(bad(format!(
                "payload has {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match header.kind {
            CheckpointKind::Theory => Ok(Checkpoint::Theory { theta: values }),
            CheckpointKind::Policy => {
                let arch = Architecture {
                    vocab_size: header.vocab_size,
                    embed_dim: header.embed_dim,
                    hidden_dim: header.hidden_dim,
                    value_hidden: header.value_hidden,
                    n_value_heads: header.n_value_heads,
                };
                let (theta, ref_theta) = values.split_at(header.param_count);
                let mut bundle = PolicyBundle::from_parts(arch, theta.to_vec(), ref_theta.to_vec(), header.seed)
                    .map_err(|e| bad(format!("inconsistent architecture: {e}")))?;
                bundle.stop_value_gradient = header.stop_value_gradient;
                Ok(Checkpoint::Policy(bundle))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
