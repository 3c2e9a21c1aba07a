//! Gaussian cumulative-link ordinal model with monotone thresholds and
//! per-rater additive biases.
//!
//! Classes are 0-based throughout: `y ∈ 0..K`.

use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::numeric::{gauss_interval, gauss_quantile, softplus, softplus_inv};
use crate::tensor::Tensor;

/// Smallest threshold gap produced when initializing raw parameters.
const MIN_GAP: f64 = 1e-3;

/// Effective thresholds on the tape: `α₁ = r₁`, `α_i = α_{i−1} + softplus(r_i)`.
pub fn thresholds(tape: &mut Tape, raw: Var) -> Result<Var> {
    let m = tape.value(raw).cols();
    if m <= 1 {
        return Ok(raw);
    }
    let first = tape.slice_cols(raw, 0, 1)?;
    let rest = tape.slice_cols(raw, 1, m)?;
    let gaps = tape.softplus(rest)?;
    let inc = tape.concat_cols(&[first, gaps])?;
    let mut upper = Tensor::zeros(&[m, m]);
    for i in 0..m {
        for j in i..m {
            upper.set(i, j, 1.0);
        }
    }
    let upper = tape.constant(upper);
    Ok(tape.matmul(inc, upper)?)
}

/// Plain-value version of [`thresholds`].
pub fn thresholds_value(raw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for (i, &r) in raw.iter().enumerate() {
        out.push(if i == 0 { r } else { out[i - 1] + softplus(r) });
    }
    out
}

/// Raw parameters reproducing `alpha` (gaps below a small floor are raised).
pub fn raw_from_thresholds(alpha: &[f64]) -> Vec<f64> {
    alpha
        .iter()
        .enumerate()
        .map(|(i, &a)| if i == 0 { a } else { softplus_inv((a - alpha[i - 1]).max(MIN_GAP)) })
        .collect()
}

/// Thresholds at the standard normal quantiles of the cumulative label
/// marginal, so that a zero latent score reproduces the training
/// distribution.
pub fn init_thresholds(counts: &[usize]) -> Vec<f64> {
    let k = counts.len();
    let total: f64 = counts.iter().map(|&c| c as f64 + 0.5).sum();
    let mut cum = 0.0;
    let mut alpha = Vec::with_capacity(k.saturating_sub(1));
    for &c in &counts[..k.saturating_sub(1)] {
        cum += c as f64 + 0.5;
        alpha.push(gauss_quantile(cum / total));
    }
    for i in 1..alpha.len() {
        if alpha[i] < alpha[i - 1] + MIN_GAP {
            alpha[i] = alpha[i - 1] + MIN_GAP;
        }
    }
    alpha
}

fn check_monotone(alpha: &[f64]) -> Result<()> {
    if alpha.iter().any(|a| !a.is_finite()) || alpha.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Contract(format!("thresholds {alpha:?} are not non-decreasing")));
    }
    Ok(())
}

/// Class probabilities `p_y = Φ(α_y − s) − Φ(α_{y−1} − s)`.
pub fn cl_probs(s: f64, alpha: &[f64]) -> Result<Vec<f64>> {
    check_monotone(alpha)?;
    let k = alpha.len() + 1;
    Ok((0..k)
        .map(|y| {
            let lo = if y == 0 { f64::NEG_INFINITY } else { alpha[y - 1] - s };
            let hi = if y == k - 1 { f64::INFINITY } else { alpha[y] - s };
            gauss_interval(lo, hi)
        })
        .collect())
}

/// `−ln p_y`, with `p_y` floored at the tape's probability floor.
pub fn cl_loss(s: f64, alpha: &[f64], y: usize) -> Result<f64> {
    let p = cl_probs(s, alpha)?;
    let py = *p
        .get(y)
        .ok_or_else(|| Error::Contract(format!("class {y} outside 0..{}", p.len())))?;
    Ok(-py.max(crate::autograd::PROB_FLOOR).ln())
}

/// Most probable class; ties go to the lower class.
pub fn predict(s: f64, alpha: &[f64]) -> Result<usize> {
    let p = cl_probs(s, alpha)?;
    let mut best = 0;
    for (y, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = y;
        }
    }
    Ok(best)
}

/// Rater ids in a fixed order with their index in the bias vector.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RaterIndex {
    ids: Vec<String>,
    pos: BTreeMap<String, usize>,
}

impl RaterIndex {
    pub fn new(ids: impl IntoIterator<Item = String>) -> Self {
        let mut ids: Vec<String> = ids.into_iter().collect();
        ids.sort();
        ids.dedup();
        let pos = ids.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();
        RaterIndex { ids, pos }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index(&self, rater: &str) -> Result<usize> {
        self.pos
            .get(rater)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown rater `{rater}`")))
    }
}

/// `s + b_r` for a known rater.
pub fn apply_rater_bias(s: f64, rater: &str, index: &RaterIndex, biases: &[f64]) -> Result<f64> {
    let i = index.index(rater)?;
    Ok(s + biases[i])
}

/// Adds the bias of each row's rater on the tape: `s` is `B×1`, `bias` is
/// `1×R`, `raters[i]` indexes the bias vector.
pub fn add_rater_bias(tape: &mut Tape, s: Var, bias: Var, raters: &[usize]) -> Result<Var> {
    let col = tape.transpose(bias)?;
    let per_row = tape.gather_rows(col, raters)?;
    Ok(tape.add(s, per_row)?)
}

/// Shifts the biases to zero mean.
pub fn center_biases(bias: &mut [f64]) {
    if bias.is_empty() {
        return;
    }
    let mean = bias.iter().sum::<f64>() / bias.len() as f64;
    bias.iter_mut().for_each(|b| *b -= mean);
}
