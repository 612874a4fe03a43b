//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `UGQM`, `u32` version, then one record per
//! tensor until end of file: `u32` name length, UTF-8 name, `u32` rank,
//! `u32` per dimension, and the `f32` payload in row-major order.

use std::path::Path;

use crate::error::{IqaError, Result};
use crate::model::{ModelParams, NamedTensor};

pub const MAGIC: &[u8; 4] = b"UGQM";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for t in params.named_tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(IqaError::TruncatedPayload)?;
        let s = self.bytes.get(self.pos..end).ok_or(IqaError::TruncatedPayload)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(IqaError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(IqaError::UnsupportedVersion(version));
    }
    let mut tensors = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| IqaError::MalformedCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(IqaError::MalformedCheckpoint(format!("{name}: rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count.ok_or(IqaError::TruncatedPayload)?;
        let payload = r.take(count.checked_mul(4).ok_or(IqaError::TruncatedPayload)?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(NamedTensor { name, dims, data });
    }
    ModelParams::from_named_tensors(tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GateVariant, ModelConfig};
    use proptest::prelude::*;

    fn small(variant: GateVariant) -> ModelConfig {
        ModelConfig {
            d: 6,
            layers: 2,
            gate_hidden: 5,
            head_hidden: 4,
            gate_variant: variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact_after_quantization() {
        for variant in [GateVariant::PlainMlp, GateVariant::GatedTanhSigmoid] {
            let p = ModelParams::init(&small(variant), 7, 3).quantized_f32();
            let back = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::init(&small(GateVariant::PlainMlp), 3, 1).quantized_f32();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(matches!(decode_checkpoint(b""), Err(IqaError::BadMagic)));
        assert!(matches!(decode_checkpoint(b"XXXX\x01\0\0\0"), Err(IqaError::BadMagic)));
        assert!(matches!(decode_checkpoint(b"UGQM\x02\0\0\0"), Err(IqaError::UnsupportedVersion(2))));
        let p = ModelParams::init(&small(GateVariant::PlainMlp), 3, 1);
        let bytes = encode_checkpoint(&p);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 2]), Err(IqaError::TruncatedPayload)));
        let header_only = decode_checkpoint(b"UGQM\x01\0\0\0");
        assert!(matches!(header_only, Err(IqaError::MalformedCheckpoint(_))));
    }

    proptest! {
        #[test]
        fn quantized_params_round_trip(seed in any::<u64>(), d_raw in 1usize..12, gated in any::<bool>()) {
            let variant = if gated { GateVariant::GatedTanhSigmoid } else { GateVariant::PlainMlp };
            let p = ModelParams::init(&small(variant), d_raw, seed).quantized_f32();
            prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&p)).unwrap(), p);
        }
    }
}
