//! Network checkpoints: a binary weight container plus a JSON sidecar.
//!
//! Binary layout (little-endian): `b"SPCN"`, `u32` version, `u32` m,
//! `u32` N, `u32` layer count, then `(u32 in, u32 out)` per layer, a `u8`
//! flag for the training mean; then `f64` data: masks (`m·N`), each layer's
//! weight (`out·in`) and bias (`out`), the training mean (`N`, if flagged)
//! and the input scale.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::net::{Dense, Loss, Preprocessor, ScannerConfig, SensingNet};
use super::train::{EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: String,
    pub loss: Loss,
    pub train_masks: bool,
    pub dropout: f64,
    pub scanner: ScannerConfig,
    pub config: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
}

pub fn encode_checkpoint<T: Scalar>(net: &SensingNet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    u32le(&mut out, net.num_masks());
    u32le(&mut out, net.num_pixels());
    u32le(&mut out, net.layers.len());
    for l in &net.layers {
        u32le(&mut out, l.inputs());
        u32le(&mut out, l.outputs());
    }
    out.push(net.preprocessor.mean.is_some() as u8);
    let mut put = |vals: &[T]| {
        for v in vals {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    };
    put(net.masks.as_slice());
    for l in &net.layers {
        put(l.weight.as_slice());
        put(&l.bias);
    }
    if let Some(m) = &net.preprocessor.mean {
        put(m);
    }
    put(&[net.preprocessor.scale]);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.name.to_string(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let len = n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

/// Rebuilds a network from its binary weights and metadata.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], meta: &CheckpointMeta, source_name: &str) -> Result<SensingNet<T>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        name: source_name,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.err("unexpected magic, expected SPCN"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let m = r.u32()?;
    let n = r.u32()?;
    let count = r.u32()?;
    let dims = (0..count)
        .map(|_| Ok((r.u32()?, r.u32()?)))
        .collect::<Result<Vec<_>>>()?;
    let has_mean = r.take(1)?[0] != 0;
    let masks = Matrix::new(m, n, r.f64s(m * n)?)?;
    let mut layers = Vec::with_capacity(count);
    for (i, o) in dims {
        let weight = Matrix::new(o, i, r.f64s(o * i)?)?;
        let bias = r.f64s(o)?;
        layers.push(Dense { weight, bias });
    }
    let mean = if has_mean { Some(r.f64s(n)?) } else { None };
    let scale = r.f64s::<T>(1)?[0];
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after checkpoint payload"));
    }
    let net = SensingNet {
        masks,
        train_masks: meta.train_masks,
        layers,
        loss: meta.loss,
        scanner: meta.scanner,
        preprocessor: Preprocessor { mean, scale },
        dropout: meta.dropout,
    };
    net.validate()?;
    Ok(net)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint<T: Scalar>(
    net: &SensingNet<T>,
    config: Option<&TrainConfig>,
    history: &[EpochRecord],
    path: &Path,
) -> Result<()> {
    fs::write(path, encode_checkpoint(net)).map_err(|e| Error::io(path, e))?;
    let meta = CheckpointMeta {
        version: env!("CARGO_PKG_VERSION").to_string(),
        loss: net.loss,
        train_masks: net.train_masks,
        dropout: net.dropout,
        scanner: net.scanner,
        config: config.cloned(),
        history: history.to_vec(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(SensingNet<T>, CheckpointMeta)> {
    let side = sidecar_path(path);
    let meta: CheckpointMeta =
        serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let net = decode_checkpoint(&bytes, &meta, &path.display().to_string())?;
    Ok((net, meta))
}
