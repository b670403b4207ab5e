//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! magic (8 bytes), version u32, header length u64, header JSON
//! (`kind`, `config`, `meta`), tensor count u32, then per tensor in name
//! order: name length u32, name, rank u32, dims u64 each, f32 data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::mae::{MaeConfig, MaeModel};
use crate::nn::Module;
use crate::vq::{VqConfig, VqModel};

pub const MAGIC: &[u8; 8] = b"GRIDPCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vq,
    Mae,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: Value,
    meta: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: Value,
    /// Free-form training metadata (epochs, losses, data seed...).
    pub meta: BTreeMap<String, Value>,
    /// Sorted by name.
    pub tensors: Vec<Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn from_module(kind: ModelKind, config: Value, meta: BTreeMap<String, Value>, model: &impl Module<f32>) -> Self {
        let mut tensors: Vec<Tensor> = model
            .named_params()
            .into_iter()
            .map(|(name, p)| Tensor { name, shape: p.shape.clone(), data: p.value.clone() })
            .collect();
        tensors.sort_by(|a, b| a.name.cmp(&b.name));
        Self { kind, config, meta, tensors }
    }

    /// Copies tensor values into `model`; names and shapes must match exactly.
    pub fn apply_to(&self, model: &mut impl Module<f32>) -> Result<()> {
        let mut params = model.named_params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, model expects {}", self.tensors.len(), params.len())));
        }
        params.sort_by(|a, b| a.0.cmp(&b.0));
        for ((name, p), t) in params.into_iter().zip(&self.tensors) {
            if name != t.name || p.shape != t.shape {
                return Err(Error::Format(format!("tensor {} {:?} does not match model parameter {name} {:?}", t.name, t.shape, p.shape)));
            }
            p.value.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header { kind: self.kind, config: self.config.clone(), meta: self.meta.clone() })
            .expect("header serialises");
        let mut out = Vec::with_capacity(64 + header.len() + self.tensors.iter().map(|t| 4 * t.data.len() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut sorted: Vec<&Tensor> = self.tensors.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        for t in sorted {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.len()?;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }
        if tensors.windows(2).any(|w| w[0].name >= w[1].name) {
            return Err(Error::Format("tensors are not in strict name order".into()));
        }
        Ok(Self { kind: header.kind, config: header.config, meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // Write then rename so a crash never leaves a half-written file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn to_vq(&self) -> Result<VqModel<f32>> {
        self.expect_kind(ModelKind::Vq)?;
        let mut model = VqModel::new(self.config_as::<VqConfig>()?, 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    pub fn to_mae(&self) -> Result<MaeModel<f32>> {
        self.expect_kind(ModelKind::Mae)?;
        let mut model = MaeModel::new(self.config_as::<MaeConfig>()?, 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }
}

pub fn vq_checkpoint(model: &VqModel<f32>, meta: BTreeMap<String, Value>) -> Checkpoint {
    Checkpoint::from_module(ModelKind::Vq, serde_json::to_value(&model.config).expect("config serialises"), meta, model)
}

pub fn mae_checkpoint(model: &MaeModel<f32>, meta: BTreeMap<String, Value>) -> Checkpoint {
    Checkpoint::from_module(ModelKind::Mae, serde_json::to_value(&model.config).expect("config serialises"), meta, model)
}

pub fn load_vq(path: impl AsRef<Path>) -> Result<VqModel<f32>> {
    Checkpoint::load(path)?.to_vq()
}

pub fn load_mae(path: impl AsRef<Path>) -> Result<MaeModel<f32>> {
    Checkpoint::load(path)?.to_mae()
}
