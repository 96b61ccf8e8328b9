//! Versioned binary checkpoints: header, JSON metadata, shape-tagged
//! little-endian tensors, observation moments.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{NetConfig, PolicyParams, RunningMoments};

const MAGIC: &[u8; 8] = b"PEDITCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match configuration: {0}")]
    ConfigMismatch(String),
}

/// Shape of the problem the policy was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: String,
    pub net: NetConfig,
    pub n_exemplars: usize,
    pub pool_size: usize,
    pub num_verbalizers: usize,
    pub num_labels: usize,
    pub horizon: usize,
    pub iteration: usize,
}

impl CheckpointMeta {
    /// Errors unless `n`, `N`, `V` and label count agree with `other`.
    pub fn ensure_compatible(&self, other: &CheckpointMeta) -> Result<(), CheckpointError> {
        let pairs = [
            ("n_exemplars", self.n_exemplars, other.n_exemplars),
            ("pool_size", self.pool_size, other.pool_size),
            ("num_verbalizers", self.num_verbalizers, other.num_verbalizers),
            ("num_labels", self.num_labels, other.num_labels),
            ("obs_dim", self.net.obs_dim, other.net.obs_dim),
            ("cand_dim", self.net.cand_dim, other.net.cand_dim),
        ];
        for (name, a, b) in pairs {
            if a != b {
                return Err(CheckpointError::ConfigMismatch(format!("{name}: checkpoint {a}, run {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: PolicyParams,
    pub moments: RunningMoments,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s<'a>(out: &mut Vec<u8>, vs: impl IntoIterator<Item = &'a f64>) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.params.tensors().len() as u32);
        for (name, t) in self.params.names().zip(self.params.tensors()) {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.nrows() as u32);
            put_u32(&mut out, t.ncols() as u32);
            put_f64s(&mut out, t.iter());
        }
        put_u64(&mut out, self.moments.count);
        put_u32(&mut out, self.moments.dim() as u32);
        put_f64s(&mut out, &self.moments.mean);
        put_f64s(&mut out, &self.moments.m2);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r.f64s(rows * cols)?;
            tensors.push(Array2::from_shape_vec((rows, cols), data).expect("length matches shape"));
            names.push(name);
        }
        let params = PolicyParams::from_tensors(meta.net, tensors)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if let Some((want, got)) = params.names().zip(&names).find(|(a, b)| a != b) {
            return Err(CheckpointError::Corrupt(format!("tensor {got:?} where {want:?} expected")));
        }
        let m_count = r.u64()?;
        let dim = r.u32()? as usize;
        let moments = RunningMoments {
            count: m_count,
            mean: r.f64s(dim)?,
            m2: r.f64s(dim)?,
        };
        if r.pos != buf.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        if dim != meta.net.obs_dim {
            return Err(CheckpointError::Corrupt(format!(
                "moments track {dim} dims, network expects {}",
                meta.net.obs_dim
            )));
        }
        Ok(Self { meta, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let net = NetConfig {
            obs_dim: 4,
            cand_dim: 3,
            latent_dim: 6,
            heads: 2,
            layers: 2,
            ffn_dim: 8,
            history_capacity: 2,
        };
        let mut moments = RunningMoments::new(4);
        moments.update(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        moments.update(&[1.0, -2.0, 3.5, 1e-300]).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                task: "toy".into(),
                net,
                n_exemplars: 2,
                pool_size: 6,
                num_verbalizers: 3,
                num_labels: 2,
                horizon: 3,
                iteration: 7,
            },
            params: PolicyParams::init(net, 5).unwrap(),
            moments,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Corrupt(_))
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CheckpointError::UnsupportedVersion(2))));
    }

    #[test]
    fn mismatch_is_reported() {
        let a = sample().meta;
        let mut b = a.clone();
        b.pool_size = 8;
        assert!(matches!(a.ensure_compatible(&b), Err(CheckpointError::ConfigMismatch(_))));
        assert!(a.ensure_compatible(&a.clone()).is_ok());
    }
}
