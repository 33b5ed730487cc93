//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "MKLABCKP"
//! version      u32       1
//! config_len   u32       byte length of the config JSON
//! config       bytes     ModelConfig as compact JSON (field order fixed)
//! count        u32       number of parameters
//! manifest     count ×   { name_len u32, name bytes, ndim u32, dims u64 × ndim, offset u64 }
//! data         f32 × Σ numel, each parameter at `offset` bytes from the start of this section
//! ```
//!
//! Parameters are written in registration order. Saving a loaded checkpoint
//! reproduces the original bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VitModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MKLABCKP";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &VitModel<T>) -> Result<Vec<u8>> {
    let config = serde_json::to_string(model.config())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * p.value.numel() as u64;
    }
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save<T: Scalar>(model: &VitModel<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
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
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
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
}

fn read_header(bytes: &[u8]) -> Result<(ModelConfig, Reader<'_>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
    let config: ModelConfig =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    Ok((config, r))
}

/// Reads just the model configuration.
pub fn peek_config(bytes: &[u8]) -> Result<ModelConfig> {
    Ok(read_header(bytes)?.0)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<VitModel<T>> {
    let (config, mut r) = read_header(bytes)?;
    let mut model = VitModel::<T>::new(&config)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, model expects {}",
            model.store.len()
        )));
    }
    let mut manifest = Vec::with_capacity(count);
    for id in model.store.ids().collect::<Vec<_>>() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        let expected = model.store.param(id);
        if name != expected.name || dims != expected.value.shape() {
            return Err(Error::Format(format!(
                "manifest entry {name} {dims:?} does not match model parameter {} {:?}",
                expected.name,
                expected.value.shape()
            )));
        }
        manifest.push((id, dims, offset));
    }
    let data = &bytes[r.pos..];
    let expected_len: usize = manifest
        .iter()
        .map(|(_, d, _)| 4 * d.iter().product::<usize>())
        .sum();
    if data.len() != expected_len {
        return Err(Error::Format(format!(
            "checkpoint data section is {} bytes, expected {expected_len}",
            data.len()
        )));
    }
    for (id, dims, offset) in manifest {
        let n: usize = dims.iter().product();
        let chunk = data
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::Format("parameter offset out of range".into()))?;
        let values = chunk
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        model.store.set(id, Tensor::new(&dims, values)?)?;
    }
    Ok(model)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<VitModel<T>> {
    from_bytes(&std::fs::read(path)?)
}
