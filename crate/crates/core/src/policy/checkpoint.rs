//! Binary checkpoint layout shared by policy and reward models.
//!
//! ```text
//! "RLHAIF01" | version: u32 | config_len: u32 | config JSON
//! repeated: name_len: u32 | name | ndim: u32 | dims: u32 * ndim | f32 * prod(dims)
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::TransformerConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"RLHAIF01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Policy,
    Reward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub kind: ModelKind,
    pub model: TransformerConfig,
    /// Training stage that produced the file, e.g. "sft" or "ppo".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub params: ParamSet,
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&u32_of(cfg.len(), "config length")?.to_le_bytes());
        out.extend_from_slice(&cfg);
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_of(t.shape().len(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&u32_of(d, "dim")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let cfg_bytes = take(&mut r, cfg_len)?;
        let config: CheckpointConfig = serde_json::from_slice(cfg_bytes)?;
        let mut params = ParamSet::new();
        while !r.is_empty() {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut r)? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = take(&mut r, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::new(dims, data)?)?;
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let b = take(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint(format!("truncated: wanted {n} bytes, {} left", r.len())));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyModel;

    #[test]
    fn header_layout() {
        let cfg = TransformerConfig { vocab_size: 5, d_model: 4, n_layers: 0, n_heads: 1, context_length: 4 };
        let m = PolicyModel::new(cfg.clone(), 0).unwrap();
        let ck = Checkpoint {
            config: CheckpointConfig { kind: ModelKind::Policy, model: cfg, stage: Some("sft".into()) },
            params: m.params.clone(),
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"RLHAIF01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        let cfg_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let doc: serde_json::Value = serde_json::from_slice(&bytes[16..16 + cfg_len]).unwrap();
        assert_eq!(doc["kind"], "policy");
        // first tensor in name order is head.b
        let name_len = u32::from_le_bytes(bytes[16 + cfg_len..20 + cfg_len].try_into().unwrap()) as usize;
        assert_eq!(&bytes[20 + cfg_len..20 + cfg_len + name_len], b"head.b");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Checkpoint::from_bytes(b"NOTMAGIC\x01\0\0\0").is_err());
        let cfg = TransformerConfig { vocab_size: 5, d_model: 4, n_layers: 0, n_heads: 1, context_length: 4 };
        let m = PolicyModel::new(cfg.clone(), 0).unwrap();
        let ck = Checkpoint {
            config: CheckpointConfig { kind: ModelKind::Reward, model: cfg, stage: None },
            params: m.params,
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
