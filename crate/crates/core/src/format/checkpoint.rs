//! Named-tensor checkpoint container.
//!
//! Layout (little-endian): magic `MGCK`, version `u16`, metadata length
//! `u32` followed by UTF-8 JSON metadata, tensor count `u32`, then per
//! tensor: name length `u16`, name bytes, rank `u8`, `rank` dims as `u32`,
//! and the f64 payload.

use std::collections::BTreeMap;
use std::path::Path;

use super::{read_file, write_file, ByteReader};
use crate::error::Result;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let meta = serde_json::to_vec(&ck.metadata).expect("json value serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new("checkpoint", bytes);
    r.expect_magic(MAGIC)?;
    let at = r.offset();
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.error(at, format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let at = r.offset();
    let metadata = serde_json::from_slice(r.take(len)?).map_err(|e| r.error(at, e.to_string()))?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let at = r.offset();
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| r.error(at, e.to_string()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| r.error(at, "tensor size overflows"))?;
        let data = r.f64_vec(n)?;
        let t = Tensor::new(shape, data).map_err(|e| r.error(at, e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(r.error(at, format!("duplicate tensor `{name}`")));
        }
    }
    r.finish()?;
    Ok(Checkpoint { metadata, tensors })
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &encode(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_roundtrip() {
        let mut tensors = BTreeMap::new();
        tensors.insert("a.w".to_string(), Tensor::from_rows(&[vec![0.1, f64::MIN_POSITIVE], vec![-0.0, 1e308]]).unwrap());
        tensors.insert("b".to_string(), Tensor::row(&[std::f64::consts::PI]));
        let ck = Checkpoint {
            metadata: serde_json::json!({"strategy": "LateConcat", "dims": [3, 4]}),
            tensors,
        };
        let back = decode(&encode(&ck)).unwrap();
        assert_eq!(back, ck);
        let bits: Vec<u64> = back.tensors["a.w"].data().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = ck.tensors["a.w"].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
    }
}
