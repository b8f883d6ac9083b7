//! Versioned little-endian checkpoint format.
//!
//! ```text
//! "CSTSCKPT" u32 version
//! u32 config length, config JSON
//! u32 tensor count, then per tensor:
//!     u16 name length, name, u8 dtype (1 = f64), u8 rank, u64 dims, payload
//! u8 optimizer flag, then if set: u64 step, m payloads, v payloads
//! ```
//! Optimizer moments follow tensor order and shapes.

use std::fs;
use std::path::Path;

use crate::autograd::ParamStore;
use crate::error::{CstsError, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: &[u8; 8] = b"CSTSCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model configuration as stored; kept verbatim so a reload rewrites
    /// the same bytes.
    pub config_json: String,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(cfg: &ModelConfig, store: &ParamStore, optimizer: Option<&AdamState>) -> Result<Self> {
        Ok(Self {
            config_json: serde_json::to_string(cfg)?,
            tensors: store.iter().map(|(_, n, t)| (n.to_owned(), t.clone())).collect(),
            optimizer: optimizer.cloned(),
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(serde_json::from_str(&self.config_json)?)
    }

    /// Copies stored tensors into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let extra: Vec<&str> =
            self.tensors.iter().filter(|(n, _)| store.id(n).is_none()).map(|(n, _)| n.as_str()).collect();
        let missing: Vec<&str> = store
            .iter()
            .filter(|(_, n, _)| !self.tensors.iter().any(|(m, _)| m == n))
            .map(|(_, n, _)| n)
            .collect();
        if !extra.is_empty() || !missing.is_empty() {
            return Err(CstsError::Checkpoint(format!(
                "tensor names do not match the model; extra: [{}], missing: [{}]",
                extra.join(", "),
                missing.join(", ")
            )));
        }
        for (name, t) in &self.tensors {
            let id = store.id(name).expect("checked above");
            store.set(id, t.clone()).map_err(|e| CstsError::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Rebuilds the stored model.
    pub fn load_model(&self) -> Result<(Model, ParamStore)> {
        let (model, mut store) = Model::new(&self.model_config()?, 0)?;
        self.restore(&mut store)?;
        Ok((model, store))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config_json.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| CstsError::Checkpoint(format!("tensor name too long: {name}")))?;
            b.extend_from_slice(&name_len.to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(DTYPE_F64);
            b.push(t.shape().len() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_payload(&mut b, t);
        }
        match &self.optimizer {
            None => b.push(0),
            Some(s) => {
                if s.m.len() != self.tensors.len() || s.v.len() != self.tensors.len() {
                    return Err(CstsError::Checkpoint("optimizer state does not match tensor count".into()));
                }
                b.push(1);
                b.extend_from_slice(&s.step.to_le_bytes());
                for t in s.m.iter().chain(&s.v) {
                    put_payload(&mut b, t);
                }
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(CstsError::Checkpoint(format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(magic), "CSTSCKPT")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CstsError::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let n = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| CstsError::Checkpoint("config is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CstsError::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(CstsError::Checkpoint(format!("{name}: unknown dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let t = r.payload(&shape)?;
            tensors.push((name, t));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let shapes: Vec<Vec<usize>> = tensors.iter().map(|(_, t)| t.shape().to_vec()).collect();
                let m = shapes.iter().map(|s| r.payload(s)).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|s| r.payload(s)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { step, m, v })
            }
            f => return Err(CstsError::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(CstsError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config_json, tensors, optimizer })
    }
}

fn put_payload(b: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CstsError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn payload(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CstsError::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data)
    }
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore, optimizer: Option<&AdamState>) -> Result<()> {
    let bytes = Checkpoint::new(cfg, store, optimizer)?.to_bytes()?;
    fs::write(path, bytes).map_err(|e| CstsError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CstsError::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        CstsError::Checkpoint(m) => CstsError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
