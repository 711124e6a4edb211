//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CLIFNET\0"
//! version      u32      = 1
//! config_len   u32
//! config       config_len bytes of JSON (ModelConfig)
//! count        u32      number of tensors
//! per tensor, in model order (embed, embed_norm, blocks by index with fields
//! in declaration order, head_norm, head; batch-norm running statistics follow
//! their layer's affine parameters):
//!   name_len   u32
//!   name       UTF-8
//!   rank       u32
//!   dims       rank × u64
//!   values     product(dims) × f32
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::layers::Module;
use super::model::CliffordNet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CLIFNET\0";
pub const VERSION: u32 = 1;

pub fn encode(model: &CliffordNet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let tensors = model.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(model: &CliffordNet<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} more bytes, {} left",
                self.buf.len()
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<ModelConfig> {
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {VERSION})"
        )));
    }
    let len = r.u32()? as usize;
    Ok(serde_json::from_slice(r.take(len)?)?)
}

/// Reads the stored configuration without touching the tensors.
pub fn read_config(bytes: &[u8]) -> Result<ModelConfig> {
    read_header(&mut Reader { buf: bytes })
}

/// Overwrites `model`'s tensors from `bytes`. The stored configuration must
/// equal the model's.
pub fn decode_into(model: &mut CliffordNet<f32>, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { buf: bytes };
    let config = read_header(&mut r)?;
    if config != model.config {
        return Err(Error::Checkpoint(format!(
            "v{VERSION} checkpoint holds variant {:?} with a different configuration than the target model ({:?})",
            config.variant_name, model.config.variant_name
        )));
    }
    let count = r.u32()? as usize;
    let mut slots = model.named_tensors_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, model expects {}",
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let len = r.u32()? as usize;
        let stored = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        if stored != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {stored}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: stored shape {dims:?}, model shape {:?}",
                slot.shape()
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        **slot = Tensor::new(&dims, data)?;
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<CliffordNet<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let config = read_config(&bytes)?;
    let mut model = CliffordNet::seeded(&config, 0)?;
    decode_into(&mut model, &bytes)?;
    Ok(model)
}
