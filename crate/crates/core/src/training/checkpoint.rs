//! Versioned binary checkpoints.
//!
//! Layout (little-endian): the magic `DMCKPT1`; `u32` group count; per group
//! a `u64` length and that many `f64` parameters; the same for the momentum
//! buffers; then `u64` epochs done and `u64` optimizer steps done.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"DMCKPT1";
/// Groups beyond this count, or longer than this many values, are corrupt.
const MAX_GROUPS: u32 = 16;
const MAX_GROUP_LEN: u64 = 1 << 28;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint")]
    Truncated,
    #[error("{0} bytes of trailing data after checkpoint")]
    Trailing(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Group 0: exponents; group 1: flattened extractor weights (empty if fixed).
    pub params: Vec<Vec<f64>>,
    pub velocity: Vec<Vec<f64>>,
    pub epochs_done: u64,
    pub steps_done: u64,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for groups in [&self.params, &self.velocity] {
            out.extend((groups.len() as u32).to_le_bytes());
            for g in groups {
                out.extend((g.len() as u64).to_le_bytes());
                for v in g {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        out.extend(self.epochs_done.to_le_bytes());
        out.extend(self.steps_done.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut pos = MAGIC.len();
        let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
            let s = bytes.get(pos..pos + n).ok_or(CheckpointError::Truncated)?;
            pos += n;
            Ok(s)
        };
        let mut sections = Vec::new();
        for _ in 0..2 {
            let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
            if count > MAX_GROUPS {
                return Err(CheckpointError::Corrupt(format!("{count} parameter groups")));
            }
            let mut groups = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
                if len > MAX_GROUP_LEN {
                    return Err(CheckpointError::Corrupt(format!("group of {len} values")));
                }
                let raw = take(len as usize * 8)?;
                let g: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(CheckpointError::Corrupt("non-finite parameter".into()));
                }
                groups.push(g);
            }
            sections.push(groups);
        }
        let epochs_done = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let steps_done = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        if pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - pos));
        }
        let velocity = sections.pop().expect("two sections");
        let params = sections.pop().expect("two sections");
        if velocity.len() != params.len()
            || velocity.iter().zip(&params).any(|(v, p)| v.len() != p.len())
        {
            return Err(CheckpointError::Corrupt(
                "velocity buffers do not match parameter groups".into(),
            ));
        }
        Ok(Self {
            params,
            velocity,
            epochs_done,
            steps_done,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::decode(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            params: vec![vec![1.4, 1.25], vec![0.5, -0.25, 3.0]],
            velocity: vec![vec![0.0, 1e-3], vec![0.1, 0.2, -0.3]],
            epochs_done: 2,
            steps_done: 40,
        }
    }

    #[test]
    fn roundtrip() {
        let c = sample();
        assert_eq!(Checkpoint::decode(&c.encode()).unwrap(), c);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn rejects_damage() {
        let b = sample().encode();
        assert_eq!(Checkpoint::decode(b"DMCKPT2"), Err(CheckpointError::BadMagic));
        for cut in [7, 10, 20, b.len() - 1] {
            assert_eq!(Checkpoint::decode(&b[..cut]), Err(CheckpointError::Truncated), "{cut}");
        }
        let mut t = b.clone();
        t.push(0);
        assert_eq!(Checkpoint::decode(&t), Err(CheckpointError::Trailing(1)));
        let mut huge = b.clone();
        huge[7..11].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&huge), Err(CheckpointError::Corrupt(_))));
    }
}
