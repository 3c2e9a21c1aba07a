//! Per-cluster node features: spatial moments, hull-based shape descriptors
//! and per-class logit statistics.

use serde::{Deserialize, Serialize};

use super::sample::Pixel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optional feature blocks appended after the default `7 + 2C` features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtraBlocks {
    /// Per-class logit minimum and maximum (`2C`).
    pub logit_minmax: bool,
    /// Fraction of member pixels whose arg-max class is each class (`C`).
    pub class_fraction: bool,
}

pub fn feature_dim(classes: usize, extra: ExtraBlocks) -> usize {
    7 + 2 * classes + if extra.logit_minmax { 2 * classes } else { 0 } + if extra.class_fraction { classes } else { 0 }
}

/// Convex hull of integer points (Andrew's monotone chain), counter-clockwise,
/// without collinear points.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Perimeter and area of a hull polygon. Degenerate hulls (one point, or a
/// segment) have zero area; a segment's perimeter counts both sides.
pub fn hull_perimeter_area(hull: &[(i64, i64)]) -> (f64, f64) {
    match hull.len() {
        0 | 1 => (0.0, 0.0),
        2 => {
            let (dx, dy) = ((hull[1].0 - hull[0].0) as f64, (hull[1].1 - hull[0].1) as f64);
            (2.0 * dx.hypot(dy), 0.0)
        }
        n => {
            let mut perim = 0.0;
            let mut twice_area = 0i64;
            for i in 0..n {
                let (a, b) = (hull[i], hull[(i + 1) % n]);
                perim += ((b.0 - a.0) as f64).hypot((b.1 - a.1) as f64);
                twice_area += a.0 * b.1 - b.0 * a.1;
            }
            (perim, twice_area.abs() as f64 / 2.0)
        }
    }
}

/// Builds the `K×d` feature matrix for clusters `0..count`.
///
/// Layout per node: `mean_x, mean_y, std_x, std_y, area, perimeter,
/// convexity`, then `C` logit means, `C` logit standard deviations, then the
/// optional blocks in [`ExtraBlocks`] field order. Standard deviations are
/// population (divide by `n`).
pub fn extract_node_features(
    assignments: &[usize],
    count: usize,
    pixels: &[Pixel],
    extra: ExtraBlocks,
) -> Result<Tensor> {
    if assignments.len() != pixels.len() {
        return Err(Error::Contract("assignment count differs from pixel count".into()));
    }
    let classes = pixels.first().map_or(0, |p| p.logits.len());
    let mut members: Vec<Vec<&Pixel>> = vec![Vec::new(); count];
    for (&a, p) in assignments.iter().zip(pixels) {
        if a >= count {
            return Err(Error::Contract(format!("cluster id {a} outside 0..{count}")));
        }
        members[a].push(p);
    }
    let d = feature_dim(classes, extra);
    let mut data = Vec::with_capacity(count * d);
    for (cid, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::Contract(format!("cluster {cid} is empty")));
        }
        data.extend(cluster_features(m, classes, extra));
    }
    Ok(Tensor::matrix(count, d, data)?)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cluster_features(m: &[&Pixel], classes: usize, extra: ExtraBlocks) -> Vec<f64> {
    let n = m.len() as f64;
    let (mx, sx) = mean_std(m.iter().map(|p| f64::from(p.x)));
    let (my, sy) = mean_std(m.iter().map(|p| f64::from(p.y)));
    let pts: Vec<(i64, i64)> = m.iter().map(|p| (i64::from(p.x), i64::from(p.y))).collect();
    let (perimeter, hull_area) = hull_perimeter_area(&convex_hull(&pts));
    let convexity = if hull_area > 0.0 { (n / hull_area).min(1.0) } else { 1.0 };
    let mut out = vec![mx, my, sx, sy, n, perimeter, convexity];
    let stats: Vec<(f64, f64)> = (0..classes).map(|c| mean_std(m.iter().map(move |p| p.logits[c]))).collect();
    out.extend(stats.iter().map(|s| s.0));
    out.extend(stats.iter().map(|s| s.1));
    if extra.logit_minmax {
        for c in 0..classes {
            out.push(m.iter().map(|p| p.logits[c]).fold(f64::INFINITY, f64::min));
        }
        for c in 0..classes {
            out.push(m.iter().map(|p| p.logits[c]).fold(f64::NEG_INFINITY, f64::max));
        }
    }
    if extra.class_fraction {
        let mut counts = vec![0.0; classes];
        for p in m {
            let arg = p
                .logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            counts[arg] += 1.0;
        }
        out.extend(counts.iter().map(|c| c / n));
    }
    out
}
