//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GDAN"  u32 version  u32 len  config-json
//! u32 parameter-count
//! per parameter: u32 len  name  u8 dtype  u32 rank  u64 dims[rank]  values
//! ```
//!
//! The parameter list must match, name for name and shape for shape, the
//! network that the embedded config builds.

use std::path::Path;

use super::{Gdanet, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, Real};

pub const MAGIC: &[u8; 4] = b"GDAN";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(config: &ModelConfig, store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * store.count_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = config.to_json();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::checkpoint(field, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and rebuilds the network it describes.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Gdanet, ParamStore<T>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::checkpoint("magic", "not a GDAN checkpoint"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            "version",
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let len = r.u32("config")? as usize;
    let json = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| Error::checkpoint("config", e.to_string()))?;
    let config = ModelConfig::from_json(json).map_err(|e| Error::checkpoint("config", e.to_string()))?;
    // Reject a header whose config needs more values than the file holds
    // before allocating the network it describes.
    let remaining = (bytes.len() - r.pos) as u128;
    if config.scalar_count().saturating_mul(T::DTYPE.size() as u128) > remaining {
        return Err(Error::checkpoint("values", "file is shorter than the configured network"));
    }
    let (model, mut store) = Gdanet::init::<T>(config)?;

    let count = r.u32("parameter_count")? as usize;
    if count != store.len() {
        return Err(Error::checkpoint(
            "parameter_count",
            format!("file has {count} parameters, config builds {}", store.len()),
        ));
    }
    for id in 0..count {
        let len = r.u32("name")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::checkpoint("name", e.to_string()))?;
        let expected = store.iter().nth(id).map(|p| p.name.clone()).unwrap_or_default();
        if name != expected {
            return Err(Error::checkpoint(
                "name",
                format!("parameter {id} is `{name}`, expected `{expected}`"),
            ));
        }
        let code = r.take(1, "dtype")?[0];
        match DType::from_code(code) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => {
                return Err(Error::checkpoint(
                    "dtype",
                    format!("`{name}` is stored as {d:?}, expected {:?}", T::DTYPE),
                ))
            }
            None => return Err(Error::checkpoint("dtype", format!("unknown dtype code {code}"))),
        }
        let rank = r.u32("rank")? as usize;
        let want = store.tensor(id).shape().to_vec();
        if rank != want.len() {
            return Err(Error::checkpoint(
                "shape",
                format!("`{name}` has rank {rank}, expected {}", want.len()),
            ));
        }
        for (axis, &w) in want.iter().enumerate() {
            let d = r.u64("shape")?;
            if d != w as u64 {
                return Err(Error::checkpoint(
                    "shape",
                    format!("`{name}` has extent {d} on axis {axis}, expected {w}"),
                ));
            }
        }
        let size = T::DTYPE.size();
        let raw = r.take(store.tensor(id).numel() * size, "values")?;
        for (dst, chunk) in store.tensor_mut(id).data_mut().iter_mut().zip(raw.chunks_exact(size)) {
            *dst = T::read_le(chunk);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::checkpoint(
            "trailing",
            format!("{} unexpected bytes after the last parameter", bytes.len() - r.pos),
        ));
    }
    Ok((model, store))
}

pub fn save_checkpoint<T: Real>(path: &Path, config: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config, store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(Gdanet, ParamStore<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
