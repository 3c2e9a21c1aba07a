//! Standard normal distribution helpers.

use statrs::function::erf::erfc_inv;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF `Φ(t)` through the complementary error function.
pub fn gauss_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t * INV_SQRT_2)
}

/// Standard normal density `φ(t)`.
pub fn gauss_pdf(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Inverse standard normal CDF. `p` must lie in `(0, 1)`. One Newton step
/// against [`gauss_cdf`] polishes the `erfc_inv` estimate.
pub fn gauss_quantile(p: f64) -> f64 {
    let q = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    let pdf = gauss_pdf(q);
    if q.is_finite() && pdf > 0.0 {
        q - (gauss_cdf(q) - p) / pdf
    } else {
        q
    }
}

/// `Φ(hi) − Φ(lo)` for `lo ≤ hi`, evaluated in whichever tail keeps both
/// terms small so the difference does not cancel.
pub fn gauss_interval(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        gauss_cdf(-lo) - gauss_cdf(-hi)
    } else {
        gauss_cdf(hi) - gauss_cdf(lo)
    }
}

/// Numerically safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
