//! Heatmap → graph conversion: pixel sampling, BIRCH clustering, cluster
//! features and kNN wiring.

pub mod birch;
pub mod features;
pub mod heatmap;
pub mod knn;
pub mod sample;

use serde::{Deserialize, Serialize};

pub use birch::{birch_cluster, ClusterSet};
pub use features::{extract_node_features, feature_dim, ExtraBlocks};
pub use heatmap::Heatmap;
pub use knn::knn_edges;
pub use sample::{sample_pixels, Pixel};

use crate::error::{Error, Result};
use crate::graph::{ModalGraph, Modality};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    pub target_k: usize,
    pub k: usize,
    /// Pixels drawn per heatmap; `None` means `2 * target_k`.
    pub sample_pixels: Option<usize>,
    pub threshold: f64,
    pub branching: usize,
    /// Weight of the unit-scaled (x, y) block relative to the logit block in
    /// the clustering space.
    pub spatial_weight: f64,
    pub extra: ExtraBlocks,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            target_k: 5000,
            k: 5,
            sample_pixels: None,
            threshold: 0.5,
            branching: 50,
            spatial_weight: 1.0,
            extra: ExtraBlocks::default(),
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_k == 0 || self.k == 0 || self.target_k <= self.k {
            return Err(Error::Config(format!(
                "graph target_k ({}) must exceed k ({}) and both be positive",
                self.target_k, self.k
            )));
        }
        if !(self.threshold > 0.0) || self.branching < 2 || !(self.spatial_weight >= 0.0) {
            return Err(Error::Config("need threshold > 0, branching >= 2, spatial_weight >= 0".into()));
        }
        if self.sample_pixels.is_some_and(|n| n < self.target_k) {
            return Err(Error::Config("sample_pixels must be at least target_k".into()));
        }
        Ok(())
    }

    pub fn pixels_to_sample(&self) -> usize {
        self.sample_pixels.unwrap_or(2 * self.target_k)
    }
}

/// Clustering-space embedding of a pixel: `(w·x/W, w·y/H, logits...)`.
pub fn clustering_point(p: &Pixel, width: usize, height: usize, spatial_weight: f64) -> Vec<f64> {
    let sx = (width.max(2) - 1) as f64;
    let sy = (height.max(2) - 1) as f64;
    let mut v = Vec::with_capacity(2 + p.logits.len());
    v.push(spatial_weight * f64::from(p.x) / sx);
    v.push(spatial_weight * f64::from(p.y) / sy);
    v.extend_from_slice(&p.logits);
    v
}

pub fn build_graph(hm: &Heatmap, modality: Modality, cfg: &BuildConfig, seed: u64) -> Result<ModalGraph> {
    cfg.validate()?;
    if hm.classes() != modality.classes() {
        return Err(Error::Validation(format!(
            "heatmap has {} classes, modality {modality:?} expects {}",
            hm.classes(),
            modality.classes()
        )));
    }
    let pixels = sample_pixels(hm, cfg.pixels_to_sample(), seed)?;
    let points: Vec<Vec<f64>> = pixels
        .iter()
        .map(|p| clustering_point(p, hm.width(), hm.height(), cfg.spatial_weight))
        .collect();
    let cs = birch_cluster(&points, cfg.target_k, cfg.threshold, cfg.branching)?;
    let features = extract_node_features(&cs.assignments, cs.count, &pixels, cfg.extra)?;
    let centroids: Vec<[f64; 2]> = (0..cs.count).map(|i| [features.get(i, 0), features.get(i, 1)]).collect();
    let edges = knn_edges(&centroids, cfg.k)?;
    let g = ModalGraph {
        modality,
        features,
        edges,
        centroids,
        k: cfg.k as u32,
    };
    g.validate()?;
    Ok(g)
}
