//! `FADLORA1` adapter files (integers little-endian):
//!
//! ```text
//! magic "FADLORA1" | u32 version | u64 base fingerprint | u32 pair count
//! per pair: u16 name length | name | u32 rank | f32 scaling | A (d_out·r f32) | B (r·d_in f32)
//! ```
//!
//! Matrix dimensions are not stored; they come from the target layers of the
//! base model the file is loaded against. The dataset tag is the file stem.

use std::path::Path;

use super::{matrix_dims, AdapterSet, LoraPair};
use crate::error::{Error, Result};
use crate::io::{atomic_write, fingerprint, read_bytes, ByteReader};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const ADAPTER_MAGIC: &[u8; 8] = b"FADLORA1";
const VERSION: u32 = 1;

pub fn encode_adapters(set: &AdapterSet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ADAPTER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&set.base_fingerprint.to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, pair) in set.pairs() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(pair.rank() as u32).to_le_bytes());
        out.extend_from_slice(&pair.scaling.to_le_bytes());
        for v in pair.a.data().iter().chain(pair.b.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes against `base` (`base_bytes` is its checkpoint encoding, used for
/// the fingerprint check).
pub fn decode_adapters(bytes: &[u8], tag: &str, base: &ModelParams<f32>, base_bytes: &[u8]) -> Result<AdapterSet<f32>> {
    let mut r = ByteReader::new(bytes, "adapter file");
    let magic = r.take(8)?;
    if magic != ADAPTER_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(ADAPTER_MAGIC).into(),
            found: String::from_utf8_lossy(magic).into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let expected = r.u64()?;
    let found = fingerprint(base_bytes);
    if expected != found {
        return Err(Error::FingerprintMismatch { expected, found });
    }
    let count = r.u32()? as usize;
    let mut set = AdapterSet::new(tag, expected);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::invalid("adapter file", "target name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let scaling = r.f32()?;
        let w = base.get(&name).ok_or_else(|| Error::UnknownAdapterTarget(name.clone()))?;
        let (d_out, d_in) = matrix_dims(w.shape())?;
        let a = Tensor::new(&[d_out, rank], r.f32s(d_out * rank)?)?;
        let b = Tensor::new(&[rank, d_in], r.f32s(rank * d_in)?)?;
        set.insert(LoraPair::new(name, a, b, scaling)?);
    }
    if r.remaining() != 0 {
        return Err(Error::invalid("adapter file", format!("{} trailing bytes", r.remaining())));
    }
    Ok(set)
}

pub fn save_adapters(set: &AdapterSet<f32>, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode_adapters(set);
    atomic_write(path, &bytes)?;
    Ok(bytes)
}

pub fn load_adapters(path: &Path, base: &ModelParams<f32>, base_bytes: &[u8]) -> Result<AdapterSet<f32>> {
    let tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or("adapters");
    decode_adapters(&read_bytes(path)?, tag, base, base_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{default_targets, init_adapters, AdapterInit};
    use crate::model::{build_model, encode_checkpoint, SENetConfig};

    fn trained_like(set: &mut AdapterSet<f32>) {
        for (i, pair) in set.pairs_mut().enumerate() {
            for (j, v) in pair.a.data_mut().iter_mut().enumerate() {
                *v = ((i * 31 + j) as f32 * 0.013).sin();
            }
        }
    }

    #[test]
    fn round_trip_bitwise() {
        let cfg = SENetConfig::desk();
        let model = build_model(&cfg, 0).unwrap();
        let base_bytes = encode_checkpoint(&model);
        let mut set = init_adapters(&model, "B", &default_targets(&cfg), 4, 1.0, 1, AdapterInit::ZeroA).unwrap();
        trained_like(&mut set);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("B.fadlora");
        save_adapters(&set, &path).unwrap();
        let back = load_adapters(&path, &model, &base_bytes).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn wrong_base_is_fingerprint_mismatch() {
        let cfg = SENetConfig::desk();
        let model = build_model(&cfg, 0).unwrap();
        let other = build_model(&cfg, 1).unwrap();
        let set = init_adapters(&model, "B", &default_targets(&cfg), 4, 1.0, 1, AdapterInit::ZeroA).unwrap();
        let bytes = encode_adapters(&set);
        let err = decode_adapters(&bytes, "B", &other, &encode_checkpoint(&other)).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
        assert!(err.to_string().starts_with("FingerprintMismatch"));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let cfg = SENetConfig::desk();
        let model = build_model(&cfg, 0).unwrap();
        let base_bytes = encode_checkpoint(&model);
        let set = init_adapters(&model, "B", &default_targets(&cfg), 2, 1.0, 1, AdapterInit::ZeroA).unwrap();
        let bytes = encode_adapters(&set);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_adapters(&bad, "B", &model, &base_bytes), Err(Error::BadMagic { .. })));
        assert!(matches!(
            decode_adapters(&bytes[..bytes.len() - 1], "B", &model, &base_bytes),
            Err(Error::TruncatedFile(_))
        ));
    }
}
