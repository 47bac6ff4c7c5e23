//! Versioned little-endian binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "IGNETCK\0"
//! version     u32      = 1
//! config      u32 length + UTF-8 TOML of the ModelConfig
//! norm        u32 channels, then f64 mean[channels], f64 std[channels]
//! epoch       u64
//! seed        u64
//! params      tensor list
//! buffers     tensor list
//! velocities  tensor list (empty when no optimizer state was saved)
//!
//! tensor list = u32 count, then per tensor:
//!   u32 name length, UTF-8 name, u32 rank, u64 dims[rank], f64 data[numel]
//! ```

use std::fs;
use std::path::Path;

use crate::data::NormSpec;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IGNETCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub norm: NormSpec,
    pub epoch: u64,
    pub seed: u64,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub velocities: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &mut Model, norm: NormSpec, epoch: u64, seed: u64, velocities: Option<&[Tensor]>) -> Self {
        let params: Vec<(String, Tensor)> = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let velocities = velocities
            .map(|vs| params.iter().zip(vs).map(|((n, _), v)| (n.clone(), v.clone())).collect())
            .unwrap_or_default();
        Checkpoint { config: model.config().clone(), norm, epoch, seed, params, buffers: model.buffers(), velocities }
    }

    /// Rebuilds the model and loads every parameter and buffer by name.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::build(self.config.clone(), self.seed).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if model.params().len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for p in model.params_mut().iter_mut() {
            let (_, t) = self
                .params
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("parameter {} has shape {}, expected {}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        model.set_buffers(&self.buffers)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_str(&mut out, &cfg);
        put_u32(&mut out, self.norm.mean.len());
        for v in self.norm.mean.iter().chain(&self.norm.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for list in [&self.params, &self.buffers, &self.velocities] {
            put_u32(&mut out, list.len());
            for (name, t) in list {
                put_str(&mut out, name);
                put_u32(&mut out, t.dims().len());
                for &d in t.dims() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let cfg = r.string()?;
        let config: ModelConfig = toml::from_str(&cfg).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let c = r.u32()? as usize;
        let mean = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let params = r.tensors()?;
        let buffers = r.tensors()?;
        let velocities = r.tensors()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, norm: NormSpec { mean, std }, epoch, seed, params, buffers, velocities })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..n {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|&k| k <= (self.bytes.len() - self.pos) / 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} larger than the file")))?;
            let data = (0..numel).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::from_vec(&dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}
