//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DUETCKP1`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor in directory order as
//! row-major little-endian data. Model weights are `f32`; Adam moments are
//! `f64` so a resumed run continues bit-identically.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DuetConfig;
use crate::data::{SplitSpec, Standardizer};
use crate::error::{DuetError, Result};
use crate::model::ModelParams;
use crate::train::{AdamState, EpochLog, TrainState};

const MAGIC: &[u8; 8] = b"DUETCKP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: DuetConfig,
    scaler: Standardizer,
    split: Option<String>,
    epoch: usize,
    adam_step: u64,
    best_val_mse: Option<f64>,
    epochs_since_best: usize,
    history: Vec<EpochLog>,
    tensors: Vec<TensorEntry>,
}

/// A training state plus the scaler fitted on its training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub scaler: Standardizer,
    /// Split the scaler was fitted under, if known.
    pub split: Option<SplitSpec>,
}

fn push_params(prefix: &str, p: &ModelParams, dir: &mut Vec<TensorEntry>, data: &mut Vec<u8>) {
    p.for_each_tensor(|name, shape, values| {
        dir.push(TensorEntry {
            name: format!("{prefix}/{name}"),
            shape: shape.to_vec(),
            dtype: Dtype::F32,
        });
        for &v in values {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
}

fn push_f64(name: &str, values: &[f64], dir: &mut Vec<TensorEntry>, data: &mut Vec<u8>) {
    dir.push(TensorEntry {
        name: name.to_owned(),
        shape: vec![values.len()],
        dtype: Dtype::F64,
    });
    for &v in values {
        data.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `ckpt` to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let st = &ckpt.state;
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    push_params("current", &st.params, &mut tensors, &mut data);
    push_params("best", &st.best_params, &mut tensors, &mut data);
    push_f64("adam/m", &st.adam.m, &mut tensors, &mut data);
    push_f64("adam/v", &st.adam.v, &mut tensors, &mut data);
    let manifest = Manifest {
        format_version: 1,
        config: st.config.clone(),
        scaler: ckpt.scaler.clone(),
        split: ckpt.split.map(|s| s.to_string()),
        epoch: st.epoch,
        adam_step: st.adam.step,
        best_val_mse: st.best_val_mse.is_finite().then_some(st.best_val_mse),
        epochs_since_best: st.epochs_since_best,
        history: st.history.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| DuetError::CorruptCheckpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DuetError::CorruptCheckpoint(format!("truncated while reading {what}"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn read_tensor(r: &mut Reader, e: &TensorEntry) -> Result<Vec<f64>> {
    let count: usize = e.shape.iter().product();
    let raw = r.take(count * e.dtype.width(), &format!("tensor {}", e.name))?;
    Ok(match e.dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}

fn fill_params(
    prefix: &str,
    cfg: &DuetConfig,
    entries: &mut std::slice::Iter<TensorEntry>,
    r: &mut Reader,
) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(cfg);
    let mut err = None;
    p.for_each_tensor_mut(|name, shape, values| {
        if err.is_some() {
            return;
        }
        let want = format!("{prefix}/{name}");
        let Some(e) = entries.next() else {
            err = Some(DuetError::CorruptCheckpoint(format!("missing tensor {want}")));
            return;
        };
        if e.name != want || e.shape != shape || e.dtype != Dtype::F32 {
            err = Some(DuetError::CorruptCheckpoint(format!(
                "tensor {} has shape {:?}, config implies {want} with shape {shape:?}",
                e.name, e.shape
            )));
            return;
        }
        match read_tensor(r, e) {
            Ok(v) => values.copy_from_slice(&v),
            Err(x) => err = Some(x),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(p),
    }
}

fn read_moments(name: &str, len: usize, entries: &mut std::slice::Iter<TensorEntry>, r: &mut Reader) -> Result<Vec<f64>> {
    match entries.next() {
        Some(e) if e.name == name && e.shape == [len] && e.dtype == Dtype::F64 => read_tensor(r, e),
        Some(e) => Err(DuetError::CorruptCheckpoint(format!(
            "tensor {} has shape {:?}, expected {name} with shape [{len}]",
            e.name, e.shape
        ))),
        None => Err(DuetError::CorruptCheckpoint(format!("missing tensor {name}"))),
    }
}

/// Parses bytes written by [`encode_checkpoint`], re-validating every shape
/// against the stored configuration.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(DuetError::CorruptCheckpoint("bad magic".into()));
    }
    let len = u64::from_le_bytes(r.take(8, "manifest length")?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)
        .map_err(|e| DuetError::CorruptCheckpoint(format!("manifest: {e}")))?;
    let cfg = manifest.config;
    cfg.validate()
        .map_err(|e| DuetError::CorruptCheckpoint(format!("stored config: {e}")))?;
    if manifest.scaler.mean.len() != cfg.channels || manifest.scaler.std.len() != cfg.channels {
        return Err(DuetError::CorruptCheckpoint("scaler width differs from channel count".into()));
    }
    let mut entries = manifest.tensors.iter();
    let params = fill_params("current", &cfg, &mut entries, &mut r)?;
    let best_params = fill_params("best", &cfg, &mut entries, &mut r)?;
    let n = params.num_scalars();
    let m = read_moments("adam/m", n, &mut entries, &mut r)?;
    let v = read_moments("adam/v", n, &mut entries, &mut r)?;
    if let Some(e) = entries.next() {
        return Err(DuetError::CorruptCheckpoint(format!("unexpected tensor {}", e.name)));
    }
    if r.pos != bytes.len() {
        return Err(DuetError::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        state: TrainState {
            config: cfg,
            params,
            best_params,
            adam: AdamState {
                m,
                v,
                step: manifest.adam_step,
            },
            epoch: manifest.epoch,
            best_val_mse: manifest.best_val_mse.unwrap_or(f64::INFINITY),
            epochs_since_best: manifest.epochs_since_best,
            history: manifest.history,
        },
        scaler: manifest.scaler,
        split: match manifest.split {
            Some(s) => Some(
                s.parse()
                    .map_err(|e| DuetError::CorruptCheckpoint(format!("stored split: {e}")))?,
            ),
            None => None,
        },
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DuetError::FileNotFound(path.to_owned()));
    }
    decode_checkpoint(&fs::read(path)?)
}
