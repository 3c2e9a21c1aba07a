//! Agreement statistics: consensus scores, linearly weighted Cohen's kappa,
//! bootstrap intervals and report rendering.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower median of the scores. Panics on an empty slice.
pub fn consensus(scores: &[u8]) -> u8 {
    assert!(!scores.is_empty(), "consensus of zero scores");
    let mut s = scores.to_vec();
    s.sort_unstable();
    s[(s.len() - 1) / 2]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa {
    pub value: f64,
    /// Expected agreement was 1 (both raters constant and equal marginals),
    /// so the ratio is undefined and `value` is 1 for identical ratings,
    /// else 0.
    pub degenerate: bool,
}

/// Linearly weighted Cohen's kappa with weights `1 − |i−j|/(K−1)`.
pub fn weighted_kappa_detail(a: &[usize], b: &[usize], k: usize) -> Result<Kappa> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Contract(format!(
            "kappa needs equal non-empty rating vectors, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if k < 2 {
        return Err(Error::Contract("kappa needs at least two classes".into()));
    }
    if let Some(&bad) = a.iter().chain(b).find(|&&v| v >= k) {
        return Err(Error::Contract(format!("rating {bad} outside 0..{k}")));
    }
    let n = a.len() as f64;
    let w = |i: usize, j: usize| 1.0 - i.abs_diff(j) as f64 / (k - 1) as f64;
    let mut ma = vec![0.0; k];
    let mut mb = vec![0.0; k];
    let mut po = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        ma[x] += 1.0 / n;
        mb[y] += 1.0 / n;
        po += w(x, y);
    }
    po /= n;
    let mut pe = 0.0;
    for i in 0..k {
        for j in 0..k {
            pe += ma[i] * mb[j] * w(i, j);
        }
    }
    if 1.0 - pe <= 1e-12 {
        return Ok(Kappa {
            value: if a == b { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: (po - pe) / (1.0 - pe),
        degenerate: false,
    })
}

pub fn weighted_kappa(a: &[usize], b: &[usize], k: usize) -> Result<f64> {
    Ok(weighted_kappa_detail(a, b, k)?.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub point: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_resamples: usize,
    pub degenerate_resamples: usize,
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Seed of resample `i`: the master seed on ChaCha stream `i`.
fn resample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

/// Bootstrap over `n_items` units: `stat` receives resampled indices and
/// returns the statistic and whether it was degenerate. Resamples run in
/// parallel, each with its own stream, so results do not depend on the
/// worker count.
pub fn bootstrap<F>(n_items: usize, n_resamples: usize, seed: u64, stat: F) -> Result<Bootstrap>
where
    F: Fn(&[usize]) -> Result<(f64, bool)> + Sync,
{
    if n_items < 2 || n_resamples == 0 {
        return Err(Error::Contract("bootstrap needs at least two items and one resample".into()));
    }
    let all: Vec<usize> = (0..n_items).collect();
    let (point, _) = stat(&all)?;
    let draws: Vec<(f64, bool)> = (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = resample_rng(seed, i);
            let idx: Vec<usize> = (0..n_items).map(|_| rng.random_range(0..n_items)).collect();
            stat(&idx)
        })
        .collect::<Result<_>>()?;
    let degenerate_resamples = draws.iter().filter(|d| d.1).count();
    let mut values: Vec<f64> = draws.into_iter().map(|d| d.0).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.sort_by(f64::total_cmp);
    let lo = percentile(&values, 0.025).min(mean);
    let hi = percentile(&values, 0.975).max(mean);
    Ok(Bootstrap {
        point,
        mean,
        lo,
        hi,
        n_resamples,
        degenerate_resamples,
    })
}

/// Bootstrap of the weighted kappa between paired rating vectors,
/// resampling items (slides).
pub fn bootstrap_kappa(a: &[usize], b: &[usize], k: usize, n_resamples: usize, seed: u64) -> Result<Bootstrap> {
    weighted_kappa_detail(a, b, k)?;
    bootstrap(a.len(), n_resamples, seed, |idx| {
        let ra: Vec<usize> = idx.iter().map(|&i| a[i]).collect();
        let rb: Vec<usize> = idx.iter().map(|&i| b[i]).collect();
        let kp = weighted_kappa_detail(&ra, &rb, k)?;
        Ok((kp.value, kp.degenerate))
    })
}

/// Mean over raters of the kappa between each rater and the consensus.
/// `ratings[item]` lists `(rater index, score)`. With `leave_one_out` the
/// consensus for a rater excludes that rater's own score; items the rater
/// did not score, or with no other score, are skipped for that rater.
pub fn pathologist_kappa(
    ratings: &[Vec<(usize, usize)>],
    items: &[usize],
    n_raters: usize,
    k: usize,
    leave_one_out: bool,
) -> Result<(f64, bool)> {
    let mut total = 0.0;
    let mut used = 0;
    let mut degenerate = false;
    for r in 0..n_raters {
        let (mut mine, mut cons) = (Vec::new(), Vec::new());
        for &it in items {
            let Some(&(_, own)) = ratings[it].iter().find(|(who, _)| *who == r) else {
                continue;
            };
            let others: Vec<u8> = ratings[it]
                .iter()
                .filter(|(who, _)| !leave_one_out || *who != r)
                .map(|&(_, s)| s as u8)
                .collect();
            if others.is_empty() {
                continue;
            }
            mine.push(own);
            cons.push(usize::from(consensus(&others)));
        }
        if mine.is_empty() {
            continue;
        }
        let kp = weighted_kappa_detail(&mine, &cons, k)?;
        degenerate |= kp.degenerate;
        total += kp.value;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Labels("no rater has a comparable consensus".into()));
    }
    Ok((total / used as f64, degenerate))
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub endpoint: String,
    pub kappa: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_resamples: usize,
    pub n_items: usize,
}

impl ReportRow {
    pub fn from_bootstrap(model: &str, endpoint: &str, b: &Bootstrap, n_items: usize) -> Self {
        ReportRow {
            model: model.to_string(),
            endpoint: endpoint.to_string(),
            kappa: b.point,
            mean: b.mean,
            lo: b.lo,
            hi: b.hi,
            n_resamples: b.n_resamples,
            n_items,
        }
    }

    /// `mean [lo,hi]` with two decimals.
    pub fn cell(&self) -> String {
        // Values that round to zero print unsigned.
        let f = |v: f64| if v.abs() < 0.005 { 0.0 } else { v };
        format!("{:.2} [{:.2},{:.2}]", f(self.mean), f(self.lo), f(self.hi))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

const CSV_HEADER: &str = "model,endpoint,kappa,mean,lo,hi,n_resamples,n_items";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.12},{:.12},{:.12},{:.12},{},{}",
                r.model, r.endpoint, r.kappa, r.mean, r.lo, r.hi, r.n_resamples, r.n_items
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.deserialize() {
            rows.push(rec.map_err(|e| Error::Validation(format!("report csv: {e}")))?);
        }
        Ok(EvalReport { rows })
    }

    /// Model rows against endpoint columns, cells as `mean [lo,hi]`.
    pub fn table(&self) -> String {
        let mut endpoints: Vec<&str> = Vec::new();
        let mut models: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !endpoints.contains(&r.endpoint.as_str()) {
                endpoints.push(&r.endpoint);
            }
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        let cell = |m: &str, e: &str| {
            self.rows
                .iter()
                .find(|r| r.model == m && r.endpoint == e)
                .map(ReportRow::cell)
                .unwrap_or_else(|| "-".into())
        };
        let w0 = models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
        let widths: Vec<usize> = endpoints
            .iter()
            .map(|e| models.iter().map(|m| cell(m, e).len()).max().unwrap_or(0).max(e.len()))
            .collect();
        let mut out = format!("{:<w0$}", "model");
        for (e, w) in endpoints.iter().zip(&widths) {
            let _ = write!(out, "  {e:<w$}");
        }
        out.push('\n');
        for m in &models {
            let _ = write!(out, "{m:<w0$}");
            for (e, w) in endpoints.iter().zip(&widths) {
                let _ = write!(out, "  {:<w$}", cell(m, e));
            }
            out.push('\n');
        }
        out
    }

    /// Horizontal bar chart of bootstrap means with CI whiskers.
    pub fn svg(&self) -> String {
        let (bar_h, gap, left, width) = (18.0, 8.0, 240.0, 420.0);
        let height = 40.0 + self.rows.len() as f64 * (bar_h + gap);
        let x = |v: f64| left + width * ((v + 1.0) / 2.0).clamp(0.0, 1.0);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            left + width + 20.0
        );
        let _ = writeln!(
            s,
            "<line x1=\"{0}\" y1=\"20\" x2=\"{0}\" y2=\"{1}\" stroke=\"#888\"/>",
            x(0.0),
            height - 10.0
        );
        for (i, r) in self.rows.iter().enumerate() {
            let y = 25.0 + i as f64 * (bar_h + gap);
            let (x0, xm) = (x(0.0), x(r.mean));
            let _ = writeln!(
                s,
                "<text x=\"4\" y=\"{:.1}\">{} / {}</text>",
                y + bar_h * 0.75,
                xml_escape(&r.model),
                xml_escape(&r.endpoint)
            );
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bar_h}\" fill=\"#4a7ab5\"/>",
                x0.min(xm),
                (xm - x0).abs()
            );
            let ym = y + bar_h / 2.0;
            let _ = writeln!(
                s,
                "<line x1=\"{:.1}\" y1=\"{ym:.1}\" x2=\"{:.1}\" y2=\"{ym:.1}\" stroke=\"black\"/>",
                x(r.lo),
                x(r.hi)
            );
            for v in [r.lo, r.hi] {
                let _ = writeln!(
                    s,
                    "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"black\"/>",
                    x(v),
                    y + 3.0,
                    y + bar_h - 3.0
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
