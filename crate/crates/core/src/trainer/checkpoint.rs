//! Binary checkpoint: `IMLX`, u16 version, u32 metadata length, JSON
//! metadata, then little-endian f32 parameter blocks in `PARAM_GROUPS` order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, MemberSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::fsutil::{read_bytes, write_atomic};
use crate::nncore::{RefNetArch, RefNetParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMLX";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub member: MemberSpec,
    pub config: TrainConfig,
    pub labels: Vec<String>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters are stored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub params: RefNetParams<f32>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    member: MemberSpec,
    config: TrainConfig,
    arch: RefNetArch,
    labels: Vec<String>,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_val_loss: f64,
    stopped_early: bool,
}

impl Checkpoint {
    /// Number of epochs actually run.
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            member: self.member.clone(),
            config: self.config.clone(),
            arch: self.params.arch,
            labels: self.labels.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            best_val_loss: self.best_val_loss,
            stopped_early: self.stopped_early,
        })?;
        let meta_len = u32::try_from(meta.len()).map_err(|_| Error::invalid("checkpoint metadata too large"))?;
        let mut out = Vec::with_capacity(10 + meta.len() + 4 * self.params.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&meta);
        for block in self.params.groups() {
            for v in block.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let bad = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: 0,
            message,
        };
        if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let meta_end = 10usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated metadata".into()))?;
        let meta: Meta = serde_json::from_slice(&bytes[10..meta_end]).map_err(|e| bad(format!("metadata: {e}")))?;
        meta.arch.validate()?;
        let shapes = RefNetParams::<f32>::zeros(meta.arch)?;
        let mut offset = meta_end;
        let mut blocks = Vec::with_capacity(8);
        for block in shapes.groups() {
            let len = block.len();
            let end = offset + 4 * len;
            if end > bytes.len() {
                return Err(bad("truncated parameter blocks".into()));
            }
            blocks.push(
                bytes[offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self {
            member: meta.member,
            config: meta.config,
            labels: meta.labels,
            history: meta.history,
            best_epoch: meta.best_epoch,
            best_val_loss: meta.best_val_loss,
            stopped_early: meta.stopped_early,
            params: RefNetParams::from_blocks(meta.arch, blocks)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, &path.display().to_string())
    }
}
