//! Versioned binary checkpoints.
//!
//! ```text
//! "GCMAECKP" | u32 version | u64 header_len | header (JSON)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u8 dtype (0 = f64, 1 = u64)
//!             | u8 ndim | u64 dims[ndim] | little-endian payload
//! ```
//!
//! Writes go to a sibling temp file that is renamed into place, so a crash
//! never leaves a truncated checkpoint behind.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{hex_digest, RunConfig};
use crate::error::{GcmaeError, Result};
use crate::membank::MemoryBank;
use crate::nn::ParamTree;
use crate::patching::NormStats;
use crate::tensor::Matrix;
use crate::training::{Gcmae, Trainer};

pub const MAGIC: &[u8; 8] = b"GCMAECKP";
pub const VERSION: u32 = 1;

const NO_EPOCH: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Tensor {
    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor::F64 {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Option<Matrix> {
        match self {
            Tensor::F64 { shape, data } if shape.len() == 2 => Some(Matrix::from_vec(shape[0], shape[1], data.clone())),
            _ => None,
        }
    }
}

/// Header metadata stored as JSON ahead of the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: RunConfig,
    pub norm_stats: NormStats,
    /// Completed epochs.
    pub epoch: u64,
    /// Optimizer steps taken.
    pub step: u64,
    pub lr: f64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn corrupt(msg: impl Into<String>) -> GcmaeError {
    GcmaeError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (dtype, shape) = match t {
                Tensor::F64 { shape, .. } => (0u8, shape),
                Tensor::U64 { shape, .. } => (1u8, shape),
            };
            out.push(dtype);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                Tensor::F64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Tensor::U64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let header_len = read_u64(&mut r)? as usize;
        if header_len > r.len() {
            return Err(corrupt("header length exceeds file"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..header_len])?;
        r = &r[header_len..];
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err(corrupt("tensor name exceeds file"));
            }
            let name = String::from_utf8(r[..name_len].to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            r = &r[name_len..];
            let mut tag = [0u8; 2];
            read_exact(&mut r, &mut tag)?;
            let shape: Vec<usize> = (0..tag[1]).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("tensor size overflows"))?;
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(corrupt(format!("tensor {name} truncated")));
            }
            let t = match tag[0] {
                0 => Tensor::F64 {
                    shape,
                    data: (0..n).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<Result<_>>()?,
                },
                1 => Tensor::U64 {
                    shape,
                    data: (0..n).map(|_| read_u64(&mut r)).collect::<Result<_>>()?,
                },
                d => return Err(corrupt(format!("unknown dtype {d} for {name}"))),
            };
            tensors.insert(name, t);
        }
        if !r.is_empty() {
            return Err(corrupt("trailing bytes after last tensor"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.tensors
            .get(name)
            .and_then(Tensor::to_matrix)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))
    }

    pub fn matrices(&self) -> BTreeMap<String, Matrix> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| t.to_matrix().map(|m| (k.clone(), m)))
            .collect()
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| corrupt("unexpected end of file"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes `bytes` to `path` via a temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".tmp");
        path.with_file_name(name)
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path)?))
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const BANK_FILE: &str = "bank.ckpt";

fn header_for(t: &Trainer, stats: &NormStats, kind: &str) -> CheckpointHeader {
    CheckpointHeader {
        kind: kind.into(),
        config: t.config.clone(),
        norm_stats: stats.clone(),
        epoch: t.epoch,
        step: t.step,
        lr: t.optim.lr,
        extra: serde_json::json!({ "optimizer_step": t.optim.step }),
    }
}

/// Writes `model.ckpt` (parameters and optimizer moments) and, when the
/// trainer has one, `bank.ckpt` into `dir`.
pub fn save_trainer(dir: &Path, trainer: &Trainer, stats: &NormStats) -> Result<()> {
    fs::create_dir_all(dir)?;
    let model = Checkpoint {
        header: header_for(trainer, stats, "model"),
        tensors: trainer
            .state_tensors()
            .iter()
            .map(|(k, m)| (k.clone(), Tensor::from_matrix(m)))
            .collect(),
    };
    model.save(&dir.join(MODEL_FILE))?;
    if let Some(bank) = &trainer.bank {
        let mut tensors = BTreeMap::new();
        tensors.insert("bank.table".into(), Tensor::from_matrix(&bank.table));
        tensors.insert(
            "bank.epoch_tag".into(),
            Tensor::U64 {
                shape: vec![bank.len()],
                data: bank.epoch_tag.iter().map(|e| e.unwrap_or(NO_EPOCH)).collect(),
            },
        );
        let mut header = header_for(trainer, stats, "bank");
        header.extra = serde_json::json!({ "momentum": bank.momentum });
        Checkpoint { header, tensors }.save(&dir.join(BANK_FILE))?;
    }
    Ok(())
}

/// Restores a trainer saved by [`save_trainer`] for `n_samples` samples.
pub fn load_trainer(dir: &Path, n_samples: usize) -> Result<(Trainer, NormStats)> {
    let ckpt = Checkpoint::load(&dir.join(MODEL_FILE))?;
    let h = &ckpt.header;
    let mut t = Trainer::new(h.config.clone(), n_samples)?;
    t.load_state_tensors(&ckpt.matrices())?;
    t.epoch = h.epoch;
    t.step = h.step;
    t.optim.lr = h.lr;
    t.optim.step = h.extra.get("optimizer_step").and_then(|v| v.as_u64()).unwrap_or(h.step);
    if let Some(bank) = t.bank.as_mut() {
        let b = Checkpoint::load(&dir.join(BANK_FILE))?;
        load_bank(bank, &b)?;
    }
    Ok((t, h.norm_stats.clone()))
}

fn load_bank(bank: &mut MemoryBank, ckpt: &Checkpoint) -> Result<()> {
    let table = ckpt.matrix("bank.table")?;
    if table.shape() != bank.table.shape() {
        return Err(corrupt(format!(
            "bank is {:?}, checkpoint holds {:?}",
            bank.table.shape(),
            table.shape()
        )));
    }
    let tags = match ckpt.tensors.get("bank.epoch_tag") {
        Some(Tensor::U64 { data, .. }) if data.len() == bank.len() => data,
        _ => return Err(corrupt("missing bank.epoch_tag")),
    };
    bank.table = table;
    bank.epoch_tag = tags.iter().map(|&e| (e != NO_EPOCH).then_some(e)).collect();
    if let Some(m) = ckpt.header.extra.get("momentum").and_then(|v| v.as_f64()) {
        bank.momentum = m;
    }
    Ok(())
}

/// Pretrained model (encoder and decoder) plus the header it was saved with.
pub fn load_model(path: &Path) -> Result<(Gcmae, CheckpointHeader)> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = Gcmae::new(&ckpt.header.config)?;
    let tensors = ckpt.matrices();
    let mut missing = None;
    model.visit_mut("", &mut |name, m| match tensors.get(&name) {
        Some(t) if t.shape() == m.shape() => m.as_mut_slice().copy_from_slice(t.as_slice()),
        _ => missing = missing.take().or(Some(name)),
    });
    if let Some(name) = missing {
        return Err(corrupt(format!("missing or misshapen tensor {name}")));
    }
    Ok((model, ckpt.header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("a".into(), Tensor::from_matrix(&Matrix::from_rows(&[vec![1.0, -2.5], vec![f64::MIN_POSITIVE, 3.0]])));
        tensors.insert("tags".into(), Tensor::U64 { shape: vec![3], data: vec![0, 7, u64::MAX] });
        Checkpoint {
            header: CheckpointHeader {
                kind: "model".into(),
                config: RunConfig::toy(),
                norm_stats: NormStats::identity(3),
                epoch: 2,
                step: 10,
                lr: 1e-3,
                extra: serde_json::Value::Null,
            },
            tensors,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[8] = 9;
        assert!(Checkpoint::from_bytes(&v2).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn atomic_save_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), sample());
        assert!(!dir.path().join("x.ckpt.tmp").exists());
        assert_eq!(file_sha256(&p).unwrap().len(), 64);
    }
}
