//! Single-file checkpoints: an 8-byte magic, a `u32` version, then three
//! length-prefixed (`u64` little-endian) sections: the config echo, a JSON
//! metadata record, and a safetensors blob holding model parameters,
//! optimizer moments and the prototype memory.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DCACCKPT";
const VERSION: u32 = 1;
const PARAM: &str = "param/";
const OPTIM: &str = "adam/";
const MEMORY: &str = "memory";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Epochs fully completed; training resumes at this epoch index.
    pub epochs_done: usize,
    pub global_step: u64,
    pub optimizer_steps: u64,
    pub num_identities: usize,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
    pub memory: Option<Tensor>,
}

fn section(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn section(&mut self) -> Result<&'a [u8]> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes"));
        let len = usize::try_from(len).map_err(|_| Error::Checkpoint("section too large".into()))?;
        self.take(len)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (k, t) in &self.params {
            tensors.insert(format!("{PARAM}{k}"), t);
        }
        for (k, t) in &self.optimizer {
            tensors.insert(format!("{OPTIM}{k}"), t);
        }
        if let Some(m) = &self.memory {
            tensors.insert(MEMORY.to_string(), m);
        }
        let blob = safetensors::serialize(tensors, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(blob.len() + self.config_text.len() + 256);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        section(&mut buf, self.config_text.as_bytes());
        section(&mut buf, &serde_json::to_vec(&self.meta)?);
        section(&mut buf, &blob);
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("four bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_text = String::from_utf8(r.section()?.to_vec())
            .map_err(|_| Error::Checkpoint("config echo is not utf-8".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(r.section()?)?;
        let tensors = candle_core::safetensors::load_buffer(r.section()?, &Device::Cpu)?;
        let mut ckpt = Self {
            config_text,
            meta,
            params: BTreeMap::new(),
            optimizer: BTreeMap::new(),
            memory: None,
        };
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix(PARAM) {
                ckpt.params.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix(OPTIM) {
                ckpt.optimizer.insert(name.to_string(), t);
            } else if k == MEMORY {
                ckpt.memory = Some(t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {k}")));
            }
        }
        Ok(ckpt)
    }

    /// Writes through a temporary sibling and a rename, so a crash never
    /// leaves a half-written checkpoint behind.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn round_trip_preserves_every_section() -> Result<()> {
        let dev = Device::Cpu;
        let mut params = BTreeMap::new();
        params.insert("encoder.w".to_string(), Tensor::randn(0f32, 1.0, (3, 2), &dev)?);
        params.insert("denoiser.b".to_string(), Tensor::randn(0f64, 1.0, 4, &dev)?);
        let mut optimizer = BTreeMap::new();
        optimizer.insert("m/encoder.w".to_string(), Tensor::ones((3, 2), DType::F32, &dev)?);
        let ckpt = Checkpoint {
            config_text: "seed = 3\n".into(),
            meta: CheckpointMeta {
                epochs_done: 2,
                global_step: 4,
                optimizer_steps: 4,
                num_identities: 5,
                sources: vec!["domA".into()],
            },
            params,
            optimizer,
            memory: Some(Tensor::zeros((5, 2), DType::F64, &dev)?),
        };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()?)?;
        assert_eq!(back.config_text, ckpt.config_text);
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.params.len(), 2);
        for (k, t) in &ckpt.params {
            let u = &back.params[k];
            assert_eq!(u.dtype(), t.dtype());
            assert_eq!(
                u.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?,
                t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?
            );
        }
        assert!(back.optimizer.contains_key("m/encoder.w"));
        assert_eq!(back.memory.unwrap().dims(), &[5, 2]);
        Ok(())
    }

    #[test]
    fn rejects_garbage_and_truncation() -> Result<()> {
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Checkpoint(_))));
        let ckpt = Checkpoint {
            config_text: String::new(),
            meta: CheckpointMeta {
                epochs_done: 0,
                global_step: 0,
                optimizer_steps: 0,
                num_identities: 1,
                sources: vec![],
            },
            params: BTreeMap::new(),
            optimizer: BTreeMap::new(),
            memory: None,
        };
        let bytes = ckpt.to_bytes()?;
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        Ok(())
    }
}
