//! Binary checkpoint: magic `GSSM`, fingerprints, configs, then named
//! parameter blocks as little-endian `f32`, optionally followed by the
//! Adam moments in the same block order.

use std::path::Path;

use thiserror::Error;

use super::optim::{Adam, TrainConfig};
use super::{Model, ModelConfig, NetError};
use crate::dataset::{io_err, write_atomic, DatasetError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSSM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected GSSM, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error("config fingerprint mismatch: stored {stored:016x}, computed {computed:016x}")]
    ConfigFingerprint { stored: u64, computed: u64 },
    #[error("block {index}: stored as {stored}, model expects {expected}")]
    BlockName {
        index: usize,
        stored: String,
        expected: String,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] DatasetError),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub schema_fingerprint: u64,
    pub train_config: TrainConfig,
    pub epochs_completed: u32,
    pub model: Model<f32>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&cfg.fingerprint().to_le_bytes());
        out.extend_from_slice(&self.schema_fingerprint.to_le_bytes());
        put_str(&mut out, &cfg.to_json());
        put_str(&mut out, &serde_json::to_string(&self.train_config).expect("config serializes"));
        out.extend_from_slice(&self.epochs_completed.to_le_bytes());
        out.extend_from_slice(&(self.model.blocks.len() as u32).to_le_bytes());
        for b in &self.model.blocks {
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.shape.len() as u8);
            for &d in &b.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, &b.data);
        }
        match &self.adam {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step.to_le_bytes());
                for m in &adam.m {
                    put_f32s(&mut out, m);
                }
                for v in &adam.v {
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let stored_fp = r.u64()?;
        let schema_fingerprint = r.u64()?;
        let config: ModelConfig =
            serde_json::from_str(&r.string()?).map_err(|e| CheckpointError::Malformed(format!("model config: {e}")))?;
        let computed = config.fingerprint();
        if computed != stored_fp {
            return Err(CheckpointError::ConfigFingerprint {
                stored: stored_fp,
                computed,
            });
        }
        let train_config: TrainConfig =
            serde_json::from_str(&r.string()?).map_err(|e| CheckpointError::Malformed(format!("train config: {e}")))?;
        let epochs_completed = r.u32()?;
        config.validate()?;
        let reference = config.block_layout();
        let count = r.u32()? as usize;
        if count != reference.len() {
            return Err(CheckpointError::Malformed(format!(
                "{count} blocks stored, model has {}",
                reference.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for (index, (expected_name, expected_len)) in reference.iter().enumerate() {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("block name is not UTF-8".into()))?;
            if &name != expected_name {
                return Err(CheckpointError::BlockName {
                    index,
                    stored: name,
                    expected: expected_name.clone(),
                });
            }
            let ndim = r.take(1)?[0] as usize;
            let mut len = 1usize;
            for _ in 0..ndim {
                len = len.saturating_mul(r.u32()? as usize);
            }
            if len != *expected_len {
                return Err(CheckpointError::Malformed(format!("block {name} holds {len} values")));
            }
            values.push(r.f32s(len)?);
        }
        let model = Model::from_blocks(config, values)?;
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = reference.iter().map(|(_, n)| r.f32s(*n)).collect::<Result<Vec<_>, _>>()?;
                let v = reference.iter().map(|(_, n)| r.f32s(*n)).collect::<Result<Vec<_>, _>>()?;
                Some(Adam { step, m, v })
            }
            f => return Err(CheckpointError::Malformed(format!("optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        if !model.all_finite() {
            return Err(CheckpointError::Malformed("non-finite parameter".into()));
        }
        Ok(Self {
            schema_fingerprint,
            train_config,
            epochs_completed,
            model,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(io_err(path)).map_err(CheckpointError::Io)?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("string is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
