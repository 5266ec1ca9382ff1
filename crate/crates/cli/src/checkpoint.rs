//! Binary checkpoint: named tensors plus the model config and seed.
//!
//! Layout, all integers little-endian:
//! `b"RDCK"`, version `u32`, seed `u64`, config length `u64` + UTF-8 JSON,
//! tensor count `u64`, then per tensor: name length `u32` + UTF-8 name,
//! rank `u32`, dims `u64` each, and the values as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use radious_core::model::{Model, ModelConfig};
use radious_core::numkit::Tensor;

use crate::CliError;

const MAGIC: &[u8; 4] = b"RDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CliError> {
        if self.buf.len() < n {
            return Err(corrupt("truncated checkpoint"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, wide: bool) -> Result<usize, CliError> {
        let n = if wide { self.u64()? } else { u64::from(self.u32()?) };
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| corrupt(format!("length {n} exceeds the file")))
    }

    fn text(&mut self, wide: bool) -> Result<String, CliError> {
        let n = self.len(wide)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64) -> Self {
        Self {
            version: VERSION,
            seed,
            config: model.cfg.clone(),
            tensors: model.store.iter().map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false))).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { buf: bytes };
        if r.take(4)? != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let seed = r.u64()?;
        let config = serde_json::from_str(&r.text(true)?).map_err(|e| corrupt(format!("config snapshot: {e}")))?;
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.text(false)?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?);
            }
            let n: usize = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("dimension overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("dimension overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if !r.buf.is_empty() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        Ok(Self { version, seed, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Builds a model from the snapshot config and copies every tensor in.
    pub fn to_model(&self) -> Result<Model, CliError> {
        let mut model = Model::new(&self.config, self.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies tensors into `model` by name; names and shapes must match one to one.
    pub fn load_into(&self, model: &mut Model) -> Result<(), CliError> {
        if self.tensors.len() != model.store.len() {
            return Err(corrupt(format!("checkpoint has {} tensors, model has {}", self.tensors.len(), model.store.len())));
        }
        for (name, t) in &self.tensors {
            if model.store.id_of(name).is_none() {
                return Err(corrupt(format!("unknown tensor {name}")));
            }
            model.store.set(name, t.clone()).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
        }
        Ok(())
    }
}
