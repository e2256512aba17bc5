//! Versioned checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "VSCK" | version u32 = 1
//! config JSON   : u32 length + bytes
//! metadata JSON : u32 length + bytes
//! param count   : u32
//! per parameter : name (u32 len + utf8), kind u8, ndim u8, dims u32...,
//!                 dtype u8 = 2 (f64), raw little-endian values
//! ```
//!
//! Values are stored exactly (f64 bits), so save -> load -> forward is
//! bitwise identical to the pre-save forward.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::{ModelError, Result};

pub const CKPT_MAGIC: [u8; 4] = *b"VSCK";
pub const CKPT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 2;

/// Training provenance carried alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateMeta {
    /// True when the encoder weights come from self-supervised pretraining.
    pub pretrained: bool,
    /// Iterations of the producing training loop.
    pub iteration: u64,
    /// Best validation mean foreground Dice, when tracked.
    pub best_val_dice: Option<f64>,
    /// Iteration of the best validation score, when tracked.
    pub best_iteration: Option<u64>,
    /// Set on pretraining checkpoints: the sub-volume shape the pretext
    /// heads were sized for. Absent on segmentation checkpoints.
    pub pretrain_subvol: Option<[usize; 3]>,
    /// Set on pretraining checkpoints: contrastive embedding width.
    pub contrast_dim: Option<usize>,
}

pub fn save(path: &Path, config: &ModelConfig, meta: &StateMeta, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let cfg = serde_json::to_string(config)
        .map_err(|e| ModelError::Checkpoint(format!("config serialization: {e}")))?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    let meta_json = serde_json::to_string(meta)
        .map_err(|e| ModelError::Checkpoint(format!("meta serialization: {e}")))?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_json.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.kind.to_u8());
        buf.push(p.value.shape.len() as u8);
        for &d in &p.value.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(DTYPE_F64);
        for &v in &p.value.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<(ModelConfig, StateMeta, ParamStore)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(ModelError::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| ModelError::Checkpoint(format!("config parse: {e}")))?;
    let meta_len = r.u32()? as usize;
    let meta: StateMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| ModelError::Checkpoint(format!("meta parse: {e}")))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| ModelError::Checkpoint(format!("param name: {e}")))?
            .to_string();
        let kind = ParamKind::from_u8(r.u8()?)?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if r.u8()? != DTYPE_F64 {
            return Err(ModelError::Checkpoint(format!("{name}: unsupported dtype")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Checkpoint(format!("{name}: non-finite values")));
        }
        let idx = store.add(&name, kind, shape.clone());
        store.get_mut(idx).value = Tensor::new(shape, data);
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok((config, meta, store))
}
