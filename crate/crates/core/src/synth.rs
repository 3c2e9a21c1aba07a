//! Synthetic paired heatmaps with planted, partially complementary ordinal
//! signal and biased, noisy raters.
//!
//! Each sample draws two independent components `u_a, u_b ~ N(0, 1)`; the
//! latent score is
//! `u ∝ w_a·u_a + w_b·u_b + w_ab·u_a·u_b + (1 − w_a − w_b − w_ab)·ε`,
//! scaled to unit variance. Modality A's heatmap encodes only `u_a`, B's only
//! `u_b`. The true label discretizes `u` at quantiles matching a class
//! profile; rater `r` reports `discretize(u + b_r + σ·η)` with `b_r` and `σ`
//! in latent standard deviations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::builder::{build_graph, BuildConfig, Heatmap};
use crate::error::{Error, Result};
use crate::format::labels::LabelTable;
use crate::graph::{Endpoint, Modality, PairedSample, RaterLabel, SampleKey};
use crate::numeric::gauss_cdf;
use crate::tensor::Tensor;

/// Draws used to estimate the latent quantiles.
const QUANTILE_DRAWS: usize = 200_000;
const QUANTILE_SEED: u64 = 0x0D15_C0DE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterSpec {
    pub id: String,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub samples_per_patient: usize,
    pub height: usize,
    pub width: usize,
    pub endpoint: Endpoint,
    pub w_a: f64,
    pub w_b: f64,
    pub w_ab: f64,
    pub raters: Vec<RaterSpec>,
    /// Rater noise standard deviation on the latent.
    pub noise: f64,
    /// Target class proportions; defaults to the endpoint's development
    /// bin counts.
    pub profile: Option<Vec<f64>>,
    /// Global logit shift of the signal class at `Φ(u_m) = 1`.
    pub signal_shift: f64,
    /// Standard deviation of independent per-pixel logit noise.
    pub pixel_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 20,
            samples_per_patient: 1,
            height: 48,
            width: 48,
            endpoint: Endpoint::Fibrosis,
            w_a: 0.3,
            w_b: 0.3,
            w_ab: 0.4,
            raters: vec![
                RaterSpec {
                    id: "r1".into(),
                    bias: 0.8,
                },
                RaterSpec {
                    id: "r2".into(),
                    bias: -0.8,
                },
                RaterSpec {
                    id: "r3".into(),
                    bias: 0.0,
                },
            ],
            noise: 0.3,
            profile: None,
            signal_shift: 1.5,
            pixel_noise: 0.25,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_a, self.w_b, self.w_ab];
        if w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config("signal weights must be nonnegative and sum to at most 1".into()));
        }
        if !(self.noise >= 0.0) || !(self.pixel_noise >= 0.0) || !self.signal_shift.is_finite() {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        if self.n_patients == 0 || self.samples_per_patient == 0 {
            return Err(Error::Config("need at least one patient and one sample per patient".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("raster must be at least 8×8".into()));
        }
        if self.raters.is_empty() {
            return Err(Error::Config("need at least one rater".into()));
        }
        let mut ids: Vec<&str> = self.raters.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) || ids.iter().any(|id| id.is_empty() || id.contains(',')) {
            return Err(Error::Config("rater ids must be unique, non-empty and comma-free".into()));
        }
        if self.raters.iter().any(|r| !r.bias.is_finite()) {
            return Err(Error::Config("rater biases must be finite".into()));
        }
        let profile = self.profile();
        if profile.len() != self.endpoint.num_classes() || profile.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config(format!(
                "profile needs {} positive entries for {}",
                self.endpoint.num_classes(),
                self.endpoint
            )));
        }
        Ok(())
    }

    pub fn profile(&self) -> Vec<f64> {
        self.profile
            .clone()
            .unwrap_or_else(|| self.endpoint.dev_bin_counts().to_vec())
    }

    fn residual_weight(&self) -> f64 {
        (1.0 - self.w_a - self.w_b - self.w_ab).max(0.0)
    }

    /// Standardized latent for given components and residual draw.
    pub fn latent(&self, ua: f64, ub: f64, eps: f64) -> f64 {
        let w0 = self.residual_weight();
        let norm = (self.w_a.powi(2) + self.w_b.powi(2) + self.w_ab.powi(2) + w0 * w0).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        (self.w_a * ua + self.w_b * ub + self.w_ab * ua * ub + w0 * eps) / norm
    }
}

/// Mixes seed parts into one 64-bit seed (SplitMix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Seed for building the graph of file stem `stem` (e.g. `P0001_t0_a`).
pub fn graph_seed(master: u64, stem: &str) -> u64 {
    let digest = Sha256::digest(stem.as_bytes());
    let word = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    derive_seed(&[master, word])
}

/// Class index of `z` under ascending thresholds.
pub fn discretize(z: f64, thresholds: &[f64]) -> usize {
    thresholds.iter().take_while(|&&t| z > t).count()
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub key: SampleKey,
    pub heatmap_a: Heatmap,
    pub heatmap_b: Heatmap,
    pub u_a: f64,
    pub u_b: f64,
    pub latent: f64,
    pub true_label: usize,
    pub labels: Vec<RaterLabel>,
}

pub struct Generator {
    cfg: GeneratorConfig,
    thresholds: Vec<f64>,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let thresholds = latent_thresholds(&cfg);
        Ok(Generator { cfg, thresholds })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Latent cut points reproducing the class profile.
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn sample(&self, patient: usize, index: usize, seed: u64) -> Result<SynthSample> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, patient as u64, index as u64]));
        let u_a: f64 = StandardNormal.sample(&mut rng);
        let u_b: f64 = StandardNormal.sample(&mut rng);
        let eps: f64 = StandardNormal.sample(&mut rng);
        let latent = cfg.latent(u_a, u_b, eps);
        let true_label = discretize(latent, &self.thresholds);
        let mut labels = Vec::with_capacity(cfg.raters.len());
        for r in &cfg.raters {
            let eta: f64 = StandardNormal.sample(&mut rng);
            let score = discretize(latent + r.bias + cfg.noise * eta, &self.thresholds);
            labels.push(RaterLabel {
                rater_id: r.id.clone(),
                endpoint: cfg.endpoint,
                score: score as u8,
            });
        }
        let mut rng_a = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, patient as u64, index as u64, 0xA]));
        let mut rng_b = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, patient as u64, index as u64, 0xB]));
        let heatmap_a = render(cfg, Modality::A, gauss_cdf(u_a), &mut rng_a)?;
        let heatmap_b = render(cfg, Modality::B, gauss_cdf(u_b), &mut rng_b)?;
        Ok(SynthSample {
            key: SampleKey::new(format!("P{patient:04}"), index as u32),
            heatmap_a,
            heatmap_b,
            u_a,
            u_b,
            latent,
            true_label,
            labels,
        })
    }
}

fn latent_thresholds(cfg: &GeneratorConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(QUANTILE_SEED);
    let mut draws: Vec<f64> = (0..QUANTILE_DRAWS)
        .map(|_| {
            let ua: f64 = StandardNormal.sample(&mut rng);
            let ub: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            cfg.latent(ua, ub, e)
        })
        .collect();
    draws.sort_by(f64::total_cmp);
    let profile = cfg.profile();
    let total: f64 = profile.iter().sum();
    let mut cum = 0.0;
    profile[..profile.len() - 1]
        .iter()
        .map(|p| {
            cum += p / total;
            let pos = ((cum * QUANTILE_DRAWS as f64) as usize).min(QUANTILE_DRAWS - 1);
            draws[pos]
        })
        .collect()
}

/// Class whose logits carry the planted component.
pub fn signal_class(m: Modality) -> usize {
    match m {
        Modality::A => 3,
        Modality::B => 1,
    }
}

/// Heatmap whose signal-class statistics increase with `level ∈ (0, 1)`:
/// modality A gets round blobs, modality B thin ribbons; both also get a
/// global logit shift of `signal_shift·level` on the signal class.
fn render<R: Rng + ?Sized>(cfg: &GeneratorConfig, m: Modality, level: f64, rng: &mut R) -> Result<Heatmap> {
    let (h, w, c) = (cfg.height, cfg.width, m.classes());
    let sig = signal_class(m);
    let mut logits = vec![0.0f64; h * w * c];
    for px in logits.chunks_mut(c) {
        for (k, v) in px.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(rng);
            *v = cfg.pixel_noise * noise + if k == 0 { 2.0 } else { 0.0 };
        }
        px[sig] += cfg.signal_shift * level;
    }
    let scale = (h.min(w) as f64 / 48.0).max(0.25);
    let add = |logits: &mut [f64], x: usize, y: usize, k: usize, v: f64| logits[(y * w + x) * c + k] += v;
    match m {
        Modality::A => {
            let blobs = (1.0 + 9.0 * level).round() as usize;
            for _ in 0..blobs {
                let (cx, cy) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
                let r = (2.0 + 2.0 * rng.random::<f64>()) * scale;
                for y in 0..h {
                    for x in 0..w {
                        if (x as f64 - cx).hypot(y as f64 - cy) <= r {
                            add(&mut logits, x, y, sig, 3.0);
                        }
                    }
                }
            }
            // Distractor blobs of an unrelated class.
            for _ in 0..3 {
                let (cx, cy) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
                let k = rng.random_range(5..c);
                for y in 0..h {
                    for x in 0..w {
                        if (x as f64 - cx).hypot(y as f64 - cy) <= 3.0 * scale {
                            add(&mut logits, x, y, k, 3.0);
                        }
                    }
                }
            }
        }
        Modality::B => {
            let ribbons = (1.0 + 6.0 * level).round() as usize;
            for _ in 0..ribbons {
                let (x0, y0) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
                let angle = rng.random::<f64>() * std::f64::consts::PI;
                let len = (10.0 + 14.0 * rng.random::<f64>()) * scale;
                let (dx, dy) = (angle.cos(), angle.sin());
                let steps = (len * 2.0) as usize;
                for s in 0..=steps {
                    let t = s as f64 / 2.0;
                    let (x, y) = ((x0 + dx * t).round(), (y0 + dy * t).round());
                    for (ox, oy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
                        let (px, py) = (x + ox, y + oy);
                        if px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < h {
                            add(&mut logits, px as usize, py as usize, sig, 3.0);
                        }
                    }
                }
            }
        }
    }
    // Values as stored on disk.
    logits.iter_mut().for_each(|v| *v = f64::from(*v as f32));
    // Tissue: an ellipse with a jittered centre.
    let (jx, jy) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let nx = (x as f64 + 0.5) / w as f64 - 0.5 - jx;
            let ny = (y as f64 + 0.5) / h as f64 - 0.5 - jy;
            mask[y * w + x] = (nx / 0.47).powi(2) + (ny / 0.45).powi(2) <= 1.0;
        }
    }
    Heatmap::new(Tensor::new(vec![h, w, c], logits)?, mask)
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub samples: Vec<SynthSample>,
    pub thresholds: Vec<f64>,
}

impl SynthDataset {
    pub fn labels(&self) -> LabelTable {
        self.samples.iter().map(|s| (s.key.clone(), s.labels.clone())).collect()
    }

    pub fn keys(&self) -> Vec<SampleKey> {
        self.samples.iter().map(|s| s.key.clone()).collect()
    }

    /// Builds both graphs of every sample, seeding each build from the
    /// sample's file stem exactly as the on-disk path does.
    pub fn build_pairs(&self, cfg: &BuildConfig, seed: u64) -> Result<Vec<PairedSample>> {
        self.samples
            .par_iter()
            .map(|s| {
                let id = s.key.id();
                let ga = build_graph(&s.heatmap_a, Modality::A, cfg, graph_seed(seed, &format!("{id}_a")))?;
                let gb = build_graph(&s.heatmap_b, Modality::B, cfg, graph_seed(seed, &format!("{id}_b")))?;
                Ok(PairedSample {
                    key: s.key.clone(),
                    graph_a: ga,
                    graph_b: gb,
                    labels: s.labels.clone(),
                })
            })
            .collect()
    }
}

pub fn generate_sample(cfg: &GeneratorConfig, patient: usize, index: usize, seed: u64) -> Result<SynthSample> {
    Generator::new(cfg.clone())?.sample(patient, index, seed)
}

pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<SynthDataset> {
    let gen = Generator::new(cfg.clone())?;
    let jobs: Vec<(usize, usize)> = (0..cfg.n_patients)
        .flat_map(|p| (0..cfg.samples_per_patient).map(move |i| (p, i)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(p, i)| gen.sample(p, i, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        samples,
        thresholds: gen.thresholds.clone(),
    })
}
