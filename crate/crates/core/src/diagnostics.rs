//! Convergence diagnostics on per-chain draws and posterior summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::FitResult;
use crate::math::{mean, quantile_sorted, std_normal_quantile};

pub const RHAT_THRESHOLD: f64 = 1.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("draws have zero within-chain variance")]
    DegenerateDraws,
    #[error("need at least 4 draws per half chain, got {0}")]
    TooFewDraws(usize),
    #[error("unknown parameter: {0}")]
    UnknownParameter(String),
    #[error("bins must be >= 1")]
    NoBins,
}

/// Splits every chain into two halves, dropping the middle draw of an odd
/// length chain.
fn split_chains(chains: &[Vec<f64>]) -> Result<Vec<&[f64]>, DiagnosticsError> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    if half < 4 || chains.is_empty() {
        return Err(DiagnosticsError::TooFewDraws(half));
    }
    Ok(chains.iter().flat_map(|c| [&c[..half], &c[n - half..n]]).collect())
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn rhat_of_split(parts: &[&[f64]]) -> Result<f64, DiagnosticsError> {
    let n = parts[0].len() as f64;
    let means: Vec<f64> = parts.iter().map(|c| mean(c)).collect();
    let w = parts.iter().map(|c| sample_var(c)).sum::<f64>() / parts.len() as f64;
    if !(w > 0.0) {
        return Err(DiagnosticsError::DegenerateDraws);
    }
    let b = n * sample_var(&means);
    Ok((((n - 1.0) / n * w + b / n) / w).sqrt())
}

/// Classic split potential scale reduction factor.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    rhat_of_split(&split_chains(chains)?)
}

fn rank_normalize(parts: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (c, part) in parts.iter().enumerate() {
        for (i, &x) in part.iter().enumerate() {
            all.push((x, c, i));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = all.len() as f64;
    let mut out: Vec<Vec<f64>> = parts.iter().map(|p| vec![0.0; p.len()]).collect();
    // Average ranks over ties.
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = std_normal_quantile((rank - 0.375) / (s + 0.25));
        for &(_, c, k) in &all[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

/// Rank-normalized split R-hat: the larger of the bulk and folded-tail values.
pub fn rank_normalized_rhat(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let parts = split_chains(chains)?;
    let z = rank_normalize(&parts);
    let bulk = rhat_of_split(&z.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    let med = {
        let mut all: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
        all.sort_by(f64::total_cmp);
        quantile_sorted(&all, 0.5)
    };
    let folded: Vec<Vec<f64>> = parts.iter().map(|p| p.iter().map(|x| (x - med).abs()).collect()).collect();
    let folded_refs: Vec<&[f64]> = folded.iter().map(Vec::as_slice).collect();
    let zf = rank_normalize(&folded_refs);
    let tail = rhat_of_split(&zf.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    Ok(bulk.max(tail))
}

fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Effective sample size over split chains with Geyer's initial monotone
/// sequence truncation.
pub fn ess(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let parts = split_chains(chains)?;
    let m = parts.len();
    let n = parts[0].len();
    let means: Vec<f64> = parts.iter().map(|c| mean(c)).collect();
    let acov0: Vec<f64> = parts.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, 0)).collect();
    let mean_var = mean(&acov0) * n as f64 / (n as f64 - 1.0);
    if !(mean_var > 0.0) {
        return Err(DiagnosticsError::DegenerateDraws);
    }
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    let rho = |lag: usize| -> f64 {
        let mean_acov = parts.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, lag)).sum::<f64>() / m as f64;
        1.0 - (mean_var - mean_acov) / var_plus
    };

    let mut rho_hat = vec![0.0; n + 2];
    rho_hat[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut t = 1;
    while t + 4 < n && even + odd > 0.0 {
        even = rho(t + 1);
        odd = rho(t + 2);
        if even + odd >= 0.0 {
            rho_hat[t + 1] = even;
            rho_hat[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 {
        rho_hat[max_t + 1] = even;
    }
    // Initial monotone sequence: pair sums may not increase.
    let mut t = 1;
    while t + 3 <= max_t {
        let prev = rho_hat[t - 1] + rho_hat[t];
        if rho_hat[t + 1] + rho_hat[t + 2] > prev {
            rho_hat[t + 1] = prev / 2.0;
            rho_hat[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho_hat[..max_t].iter().sum::<f64>() + rho_hat[max_t + 1]).max(1.0 / total.log10());
    Ok(total / tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    /// `None` when the draws are constant.
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub params: BTreeMap<String, ParamDiagnostics>,
    pub n_divergent: usize,
    pub n_max_treedepth: usize,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
    pub rank_normalized: bool,
    pub pass: bool,
}

impl DiagnosticsSummary {
    pub fn compute(
        params: &BTreeMap<String, Vec<Vec<f64>>>,
        n_divergent: usize,
        n_max_treedepth: usize,
        rank_normalized: bool,
    ) -> Self {
        let mut out = BTreeMap::new();
        let mut max_rhat: Option<f64> = None;
        let mut min_ess: Option<f64> = None;
        let mut all_ok = true;
        for (name, chains) in params {
            let rhat = if rank_normalized { rank_normalized_rhat(chains) } else { split_rhat(chains) }.ok();
            let e = ess(chains).ok();
            match rhat {
                Some(r) if r < RHAT_THRESHOLD => {}
                _ => all_ok = false,
            }
            if let Some(r) = rhat {
                max_rhat = Some(max_rhat.map_or(r, |m| m.max(r)));
            }
            if let Some(e) = e {
                min_ess = Some(min_ess.map_or(e, |m| m.min(e)));
            }
            out.insert(name.clone(), ParamDiagnostics { rhat, ess: e });
        }
        DiagnosticsSummary {
            params: out,
            n_divergent,
            n_max_treedepth,
            max_rhat,
            min_ess,
            rank_normalized,
            pass: all_ok && n_divergent == 0 && n_max_treedepth == 0,
        }
    }

    /// Human-readable reasons the gates failed; empty when they pass.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_divergent > 0 {
            out.push(format!("{} divergent transitions", self.n_divergent));
        }
        if self.n_max_treedepth > 0 {
            out.push(format!("{} iterations hit the maximum treedepth", self.n_max_treedepth));
        }
        for (name, d) in &self.params {
            match d.rhat {
                Some(r) if r < RHAT_THRESHOLD => {}
                Some(r) => out.push(format!("{name}: split R-hat {r:.3}")),
                None => out.push(format!("{name}: constant draws")),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

impl SummaryRow {
    pub fn from_chains(name: &str, chains: &[Vec<f64>]) -> Self {
        let mut all: Vec<f64> = chains.concat();
        all.sort_by(f64::total_cmp);
        let sd = if all.len() > 1 { sample_var(&all).sqrt() } else { 0.0 };
        SummaryRow {
            name: name.to_string(),
            mean: mean(&all),
            sd,
            median: quantile_sorted(&all, 0.5),
            lower: quantile_sorted(&all, 0.025),
            upper: quantile_sorted(&all, 0.975),
            rhat: split_rhat(chains).ok(),
            ess: ess(chains).ok(),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Median, 95% interval and diagnostics for each named parameter.
pub fn summarize_draws(fit: &FitResult, names: &[&str]) -> Result<Vec<SummaryRow>, DiagnosticsError> {
    names
        .iter()
        .map(|name| {
            let p = fit.params.get(*name).ok_or_else(|| DiagnosticsError::UnknownParameter(name.to_string()))?;
            Ok(SummaryRow::from_chains(name, &p.chains))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDensity {
    pub name: String,
    /// Draws per chain, in iteration order.
    pub chains: Vec<Vec<f64>>,
    /// `bins + 1` equal-width edges over the pooled range.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn trace_density_data(fit: &FitResult, name: &str, bins: usize) -> Result<TraceDensity, DiagnosticsError> {
    if bins == 0 {
        return Err(DiagnosticsError::NoBins);
    }
    let p = fit.params.get(name).ok_or_else(|| DiagnosticsError::UnknownParameter(name.to_string()))?;
    let (lo, hi) = p
        .chains
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &x in p.chains.iter().flatten() {
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(TraceDensity { name: name.to_string(), chains: p.chains.clone(), edges, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(seed: u64, chains: usize, n: usize, shift: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..chains)
            .map(|c| {
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + shift(c)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn separated_chains_flagged() {
        let ch = normals(1, 2, 1000, |c| 10.0 * c as f64);
        assert!(split_rhat(&ch).unwrap() > 3.0);
        assert!(rank_normalized_rhat(&ch).unwrap() > 1.5);
    }

    #[test]
    fn iid_chains_near_one() {
        let ch = normals(2, 4, 1000, |_| 0.0);
        let r = split_rhat(&ch).unwrap();
        assert!((0.99..=1.01).contains(&r), "{r}");
        let e = ess(&ch).unwrap();
        assert!((3400.0..=4600.0).contains(&e), "{e}");
    }

    #[test]
    fn ar1_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phi: f64 = 0.9;
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..5000)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x = phi * x + (1.0 - phi * phi).sqrt() * z;
                        x
                    })
                    .collect()
            })
            .collect();
        let e = ess(&chains).unwrap();
        let target = 20000.0 * (1.0 - phi) / (1.0 + phi);
        assert!((e / target - 1.0).abs() < 0.3, "{e} vs {target}");
    }

    #[test]
    fn constant_chains_are_degenerate() {
        let ch = vec![vec![2.0; 100]; 4];
        assert_eq!(split_rhat(&ch), Err(DiagnosticsError::DegenerateDraws));
        assert_eq!(ess(&ch), Err(DiagnosticsError::DegenerateDraws));
    }

    #[test]
    fn short_chains_rejected() {
        assert!(matches!(split_rhat(&[vec![1.0, 2.0, 3.0]]), Err(DiagnosticsError::TooFewDraws(_))));
    }

    #[test]
    fn type7_quantiles() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let row = SummaryRow::from_chains("x", &[xs]);
        assert_eq!(row.median, 50.5);
        assert!((row.lower - 3.475).abs() < 1e-12);
        assert!((row.upper - 97.525).abs() < 1e-12);
        let c = SummaryRow::from_chains("c", &[vec![4.0; 20]]);
        assert_eq!((c.median, c.lower, c.upper), (4.0, 4.0, 4.0));
    }

    #[test]
    fn gate_reports_failures() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), normals(3, 4, 500, |_| 0.0));
        let ok = DiagnosticsSummary::compute(&params, 0, 0, false);
        assert!(ok.pass && ok.failures().is_empty());
        let bad = DiagnosticsSummary::compute(&params, 2, 0, false);
        assert!(!bad.pass);
        assert_eq!(bad.failures().len(), 1);
        params.insert("b".to_string(), normals(4, 4, 500, |c| 5.0 * c as f64));
        assert!(!DiagnosticsSummary::compute(&params, 0, 0, true).pass);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rhat_affine_invariant(scale in 0.01f64..100.0, shift in -50.0f64..50.0, seed in 0u64..1000) {
            let ch = normals(seed, 3, 200, |c| 0.3 * c as f64);
            let moved: Vec<Vec<f64>> = ch.iter().map(|c| c.iter().map(|x| scale * x + shift).collect()).collect();
            let a = split_rhat(&ch).unwrap();
            let b = split_rhat(&moved).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn ess_capped_for_iid(seed in 0u64..1000) {
            let ch = normals(seed, 4, 1000, |_| 0.0);
            prop_assert!(ess(&ch).unwrap() <= 1.5 * 4000.0);
        }
    }
}
