//! Scalar helpers shared by the models: logistic transforms, log-combinatorics,
//! quantiles and small 2x2 linear algebra.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(inv_logit(x))` without cancellation for large |x|.
#[inline]
pub fn log_inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln(1 - inv_logit(x))`.
#[inline]
pub fn log1m_inv_logit(x: f64) -> f64 {
    log_inv_logit(-x)
}

pub fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Log multinomial coefficient `ln(n! / prod(k_i!))`.
pub fn ln_multinomial(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    ln_gamma(n as f64 + 1.0) - counts.iter().map(|&k| ln_gamma(k as f64 + 1.0)).sum::<f64>()
}

#[inline]
pub fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// Standard normal quantile.
pub fn std_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Quantile of a chi-square with two degrees of freedom (closed form).
pub fn chi2_2_quantile(p: f64) -> f64 {
    -2.0 * (1.0 - p).ln()
}

/// Type-7 (linear interpolation) quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Symmetric 2x2 matrix stored as `[[a, b], [b, c]]`.
pub type Mat2 = [[f64; 2]; 2];

pub fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn inv2(m: &Mat2) -> Option<Mat2> {
    let d = det2(m);
    if !d.is_finite() || d.abs() < 1e-300 {
        return None;
    }
    Some([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]])
}

pub fn mat2_add(a: &Mat2, b: &Mat2) -> Mat2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

pub fn mat2_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Lower Cholesky factor of a symmetric positive-definite 2x2 matrix.
pub fn chol2(m: &Mat2) -> Option<Mat2> {
    if !(m[0][0] > 0.0) {
        return None;
    }
    let l00 = m[0][0].sqrt();
    let l10 = m[1][0] / l00;
    let rem = m[1][1] - l10 * l10;
    if !(rem > 0.0) {
        return None;
    }
    Some([[l00, 0.0], [l10, rem.sqrt()]])
}

/// Sample mean and (unbiased) covariance of a 2-D cloud.
pub fn mean_cov2(xs: &[f64], ys: &[f64]) -> ([f64; 2], Mat2) {
    let n = xs.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let d = n - 1.0;
    ([mx, my], [[sxx / d, sxy / d], [sxy / d, syy / d]])
}
