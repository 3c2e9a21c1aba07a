//! Heatmap raster format: magic `HMP1`, `H: u32`, `W: u32`, `C: u32`, then
//! `H·W·C` f32 logits (row-major, class fastest), then `H·W` u8 mask bytes
//! (non-zero = usable tissue).

use std::path::Path;

use super::{read_file, write_file, ByteReader};
use crate::builder::Heatmap;
use crate::error::Result;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HMP1";

/// Logits are narrowed to f32 on write.
pub fn encode(hm: &Heatmap) -> Vec<u8> {
    let (h, w, c) = (hm.height(), hm.width(), hm.classes());
    let mut out = Vec::with_capacity(16 + 4 * h * w * c + h * w);
    out.extend_from_slice(MAGIC);
    for v in [h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in hm.logits().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(hm.mask().iter().map(|&m| u8::from(m)));
    out
}

pub fn decode(bytes: &[u8]) -> Result<Heatmap> {
    let mut r = ByteReader::new("heatmap", bytes);
    r.expect_magic(MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    let at = r.offset();
    let count = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
        .ok_or_else(|| r.error(at, format!("raster {h}x{w}x{c} exceeds file size")))?;
    let mut logits = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(r.error(at, "non-finite logit"));
        }
        logits.push(f64::from(v));
    }
    let mask: Vec<bool> = r.take(h * w)?.iter().map(|&b| b != 0).collect();
    r.finish()?;
    let logits = Tensor::new(vec![h, w, c], logits).map_err(|e| r.error(at, e.to_string()))?;
    Heatmap::new(logits, mask)
}

pub fn write_heatmap(hm: &Heatmap, path: &Path) -> Result<()> {
    write_file(path, &encode(hm))
}

pub fn read_heatmap(path: &Path) -> Result<Heatmap> {
    decode(&read_file(path)?)
}
