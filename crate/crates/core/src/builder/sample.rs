use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Heatmap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pixel {
    pub x: u32,
    pub y: u32,
    pub logits: Vec<f64>,
}

/// Uniform sample of `n` usable pixels without replacement, returned in
/// raster order. Takes every usable pixel when fewer than `n` exist.
pub fn sample_pixels(hm: &Heatmap, n: usize, seed: u64) -> Result<Vec<Pixel>> {
    let usable: Vec<usize> = hm
        .mask()
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyTissue);
    }
    let chosen: Vec<usize> = if n >= usable.len() {
        usable
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, usable.len(), n)
            .into_iter()
            .map(|i| usable[i])
            .collect();
        idx.sort_unstable();
        idx
    };
    let w = hm.width();
    Ok(chosen
        .into_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            Pixel {
                x: x as u32,
                y: y as u32,
                logits: hm.pixel_logits(x, y).to_vec(),
            }
        })
        .collect())
}
