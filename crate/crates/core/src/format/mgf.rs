//! Graph container format.
//!
//! Binary layout (little-endian): magic `MGF1`, version `u16`, modality `u8`,
//! node count `N: u32`, feature dim `d: u32`, out-degree `k: u32`, `N·d` f64
//! features (row-major), `N·2` f64 centroids, edge count `E: u32`, then `E`
//! `(src: u32, dst: u32)` pairs. A JSON text form carries the same content
//! for small fixtures.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::graph::{ModalGraph, Modality};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MGF1";
pub const VERSION: u16 = 1;

pub fn encode(g: &ModalGraph) -> Vec<u8> {
    let n = g.num_nodes();
    let d = g.feature_dim();
    let mut out = Vec::with_capacity(19 + 8 * n * (d + 2) + 4 + 8 * g.edges.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(g.modality.code());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&g.k.to_le_bytes());
    for v in g.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in &g.centroids {
        out.extend_from_slice(&c[0].to_le_bytes());
        out.extend_from_slice(&c[1].to_le_bytes());
    }
    out.extend_from_slice(&(g.edges.len() as u32).to_le_bytes());
    for &(s, t) in &g.edges {
        out.extend_from_slice(&s.to_le_bytes());
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Parses and validates a binary container.
pub fn decode(bytes: &[u8]) -> Result<ModalGraph> {
    let mut r = ByteReader::new("graph container", bytes);
    r.expect_magic(MAGIC)?;
    let at = r.offset();
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.error(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let modality = Modality::from_code(r.u8()?).ok_or_else(|| r.error(at, "unknown modality code"))?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let k = r.u32()?;
    let at = r.offset();
    let count = n.checked_mul(d).ok_or_else(|| r.error(at, "feature count overflows"))?;
    let features = r.f64_vec(count)?;
    let cents = r.f64_vec(n * 2)?;
    let e = r.u32()? as usize;
    if e.checked_mul(8).is_none_or(|b| b > bytes.len() - r.offset()) {
        return Err(r.error(r.offset(), format!("edge count {e} exceeds remaining data")));
    }
    let mut edges = Vec::with_capacity(e);
    for _ in 0..e {
        edges.push((r.u32()?, r.u32()?));
    }
    r.finish()?;
    let graph = ModalGraph {
        modality,
        features: Tensor::matrix(n, d, features).map_err(|e| r.error(at, e.to_string()))?,
        edges,
        centroids: cents.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        k,
    };
    graph.validate()?;
    Ok(graph)
}

pub fn write_graph(g: &ModalGraph, path: &Path) -> Result<()> {
    write_file(path, &encode(g))
}

pub fn read_graph(path: &Path) -> Result<ModalGraph> {
    decode(&read_file(path)?)
}

#[derive(Serialize, Deserialize)]
struct TextForm {
    format: String,
    version: u16,
    #[serde(flatten)]
    graph: ModalGraph,
}

pub fn to_text(g: &ModalGraph) -> String {
    serde_json::to_string_pretty(&TextForm {
        format: "MGF1-text".into(),
        version: VERSION,
        graph: g.clone(),
    })
    .expect("graph serializes")
}

pub fn from_text(text: &str) -> Result<ModalGraph> {
    let parsed: TextForm = serde_json::from_str(text).map_err(|e| Error::Parse {
        what: "graph text form",
        offset: line_col_offset(text, e.line(), e.column()),
        detail: e.to_string(),
    })?;
    if parsed.format != "MGF1-text" || parsed.version != VERSION {
        return Err(Error::Parse {
            what: "graph text form",
            offset: 0,
            detail: format!("unsupported format {} v{}", parsed.format, parsed.version),
        });
    }
    let shape = parsed.graph.features.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Validation(format!("feature tensor has shape {shape:?}")));
    }
    parsed.graph.validate()?;
    Ok(parsed.graph)
}

fn line_col_offset(text: &str, line: usize, col: usize) -> usize {
    text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum::<usize>() + col.saturating_sub(1)
}
