//! `FADCKPT1` checkpoint format (all integers little-endian):
//!
//! ```text
//! magic "FADCKPT1" | u32 version | u32 tensor count
//! per tensor: u16 name length | name bytes | u8 rank | u32 dim × rank | f32 payload
//! ```

use std::path::Path;

use indexmap::IndexMap;

use super::{ModelParams, SENetConfig};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes, ByteReader};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FADCKPT1";
const VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(params: &ModelParams<T>) -> Vec<u8> {
    let tensors = params.tensors();
    let payload: usize = tensors.iter().map(|(k, v)| 2 + k.len() + 1 + 4 * v.rank() + 4 * v.len()).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out
}

/// Decodes named tensors; the model topology is inferred from their shapes,
/// with stride and input scale taken from `base_config`.
pub fn decode_checkpoint(bytes: &[u8], base_config: &SENetConfig) -> Result<ModelParams<f32>> {
    let mut r = ByteReader::new(bytes, "checkpoint");
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into(),
            found: String::from_utf8_lossy(magic).into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = r.u32()? as usize;
    let mut tensors = IndexMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::invalid("checkpoint", "tensor name is not UTF-8"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.f32s(n)?;
        tensors.insert(name, Tensor::new(&shape, data)?);
    }
    if r.remaining() != 0 {
        return Err(Error::invalid("checkpoint", format!("{} trailing bytes", r.remaining())));
    }
    let config = base_config.infer_from(&tensors)?;
    ModelParams::from_tensors(config, tensors)
}

pub fn save_checkpoint<T: Real>(params: &ModelParams<T>, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode_checkpoint(params);
    atomic_write(path, &bytes)?;
    Ok(bytes)
}

pub fn load_checkpoint(path: &Path, base_config: &SENetConfig) -> Result<(ModelParams<f32>, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let params = decode_checkpoint(&bytes, base_config)?;
    Ok((params, bytes))
}
