//! Two-test latent class model without a gold standard.
//!
//! Each study's 2x2 cross-classification of index (test 1) and reference
//! (test 2) results is multinomial over the cells `(++, +-, -+, --)`, which
//! are mixtures over the latent disease class with per-study prevalence.
//! Conditional dependence enters as within-class covariances placed on the
//! feasible interval by shared fractions `u_d`, `u_nd`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::bivariate::{echo, require_studies};
use super::{Dependence, EffectKind, ModelError, ModelSpec, TlcmConfig};
use crate::data::{exclude_studies, Dataset};
use crate::fit::{FitInfo, FitResult};
use crate::math::{inv_logit, ln_multinomial, LN_SQRT_2PI};
use crate::priors::{AccuracyPair, BetaPrior, LkjPrior, NormalPrior, PriorSpec, Quantiles};
use crate::sampler::{nuts_sample_with_progress, ModelDensity, Progress, SamplerConfig};

/// Feasible covariance between two binary tests with positive rates `a`, `b`
/// within one class.
pub fn covariance_bounds(a: f64, b: f64) -> Result<(f64, f64), ModelError> {
    for x in [a, b] {
        if !(0.0..=1.0).contains(&x) {
            return Err(ModelError::OutOfDomain(x));
        }
    }
    Ok(bounds(a, b))
}

fn bounds(a: f64, b: f64) -> (f64, f64) {
    let lo = (-a * b).max(-(1.0 - a) * (1.0 - b));
    let hi = (a * (1.0 - b)).min((1.0 - a) * b);
    (lo, hi)
}

/// Partial derivatives of the bounds in `a` and `b`: `((dlo/da, dlo/db), (dhi/da, dhi/db))`.
fn bounds_grad(a: f64, b: f64) -> ((f64, f64), (f64, f64)) {
    let lo = if -a * b >= -(1.0 - a) * (1.0 - b) { (-b, -a) } else { (1.0 - b, 1.0 - a) };
    let hi = if a * (1.0 - b) <= (1.0 - a) * b { (1.0 - b, -a) } else { (-b, 1.0 - a) };
    (lo, hi)
}

fn cells(p: f64, s1: f64, c1: f64, s2: f64, c2: f64, cov_d: f64, cov_nd: f64) -> [f64; 4] {
    let q = 1.0 - p;
    [
        p * (s1 * s2 + cov_d) + q * ((1.0 - c1) * (1.0 - c2) + cov_nd),
        p * (s1 * (1.0 - s2) - cov_d) + q * ((1.0 - c1) * c2 - cov_nd),
        p * ((1.0 - s1) * s2 - cov_d) + q * (c1 * (1.0 - c2) - cov_nd),
        p * ((1.0 - s1) * (1.0 - s2) + cov_d) + q * (c1 * c2 + cov_nd),
    ]
}

/// Cell probabilities `(q11, q10, q01, q00)` for index x reference results.
pub fn cell_probabilities(
    p: f64,
    se1: f64,
    sp1: f64,
    se2: f64,
    sp2: f64,
    cov_d: f64,
    cov_nd: f64,
) -> Result<[f64; 4], ModelError> {
    for x in [p, se1, sp1, se2, sp2] {
        if !(0.0..=1.0).contains(&x) {
            return Err(ModelError::OutOfDomain(x));
        }
    }
    let (lo, hi) = bounds(se1, se2);
    if !(lo..=hi).contains(&cov_d) {
        return Err(ModelError::InfeasibleCovariance { value: cov_d, lo, hi });
    }
    let (lo, hi) = bounds(sp1, sp2);
    if !(lo..=hi).contains(&cov_nd) {
        return Err(ModelError::InfeasibleCovariance { value: cov_nd, lo, hi });
    }
    Ok(cells(p, se1, sp1, se2, sp2, cov_d, cov_nd))
}

fn phi_of(q: [f64; 4]) -> f64 {
    let [a, b, c, d] = q;
    (a * d - b * c) / ((a + b) * (c + d) * (a + c) * (b + d)).sqrt()
}

/// Fourfold-point correlation of a 2x2 table.
pub fn phi_coefficient(tp: u64, fp: u64, fn_: u64, tn: u64) -> Result<f64, ModelError> {
    let (a, b, c, d) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
    if a + b == 0.0 || c + d == 0.0 || a + c == 0.0 || b + d == 0.0 {
        return Err(ModelError::ZeroMargin);
    }
    Ok(phi_of([a, b, c, d]))
}

/// Study log-likelihood kernel `sum n_c ln q_c` and its gradient in
/// `(p, s1, c1, s2, c2, u_d, u_nd)`.
fn study_terms(n: &[f64; 4], x: [f64; 5], u: Option<(f64, f64)>) -> (f64, [f64; 7]) {
    let [p, s1, c1, s2, c2] = x;
    let (cov_d, cov_nd, jd, jn) = match u {
        Some((ud, und)) => {
            let (lo_d, hi_d) = bounds(s1, s2);
            let (lo_n, hi_n) = bounds(c1, c2);
            (lo_d + ud * (hi_d - lo_d), lo_n + und * (hi_n - lo_n), hi_d - lo_d, hi_n - lo_n)
        }
        None => (0.0, 0.0, 0.0, 0.0),
    };
    let q = cells(p, s1, c1, s2, c2, cov_d, cov_nd);
    let mut ll = 0.0;
    let mut w = [0.0; 4];
    for k in 0..4 {
        if n[k] > 0.0 {
            ll += n[k] * q[k].ln();
            w[k] = n[k] / q[k];
        }
    }
    let sign = [1.0, -1.0, -1.0, 1.0];
    let dot = |v: [f64; 4]| -> f64 { (0..4).map(|k| w[k] * v[k]).sum() };
    let pm = 1.0 - p;
    let dq_dp = [
        s1 * s2 + cov_d - ((1.0 - c1) * (1.0 - c2) + cov_nd),
        s1 * (1.0 - s2) - cov_d - ((1.0 - c1) * c2 - cov_nd),
        (1.0 - s1) * s2 - cov_d - (c1 * (1.0 - c2) - cov_nd),
        (1.0 - s1) * (1.0 - s2) + cov_d - (c1 * c2 + cov_nd),
    ];
    let g_cov_d = p * dot(sign);
    let g_cov_nd = pm * dot(sign);
    let mut g_s1 = dot([p * s2, p * (1.0 - s2), -p * s2, -p * (1.0 - s2)]);
    let mut g_s2 = dot([p * s1, -p * s1, p * (1.0 - s1), -p * (1.0 - s1)]);
    let mut g_c1 = dot([-pm * (1.0 - c2), -pm * c2, pm * (1.0 - c2), pm * c2]);
    let mut g_c2 = dot([-pm * (1.0 - c1), pm * (1.0 - c1), -pm * c1, pm * c1]);
    let (mut g_ud, mut g_und) = (0.0, 0.0);
    if let Some((ud, und)) = u {
        let ((lo_a, lo_b), (hi_a, hi_b)) = bounds_grad(s1, s2);
        g_s1 += g_cov_d * (lo_a + ud * (hi_a - lo_a));
        g_s2 += g_cov_d * (lo_b + ud * (hi_b - lo_b));
        let ((lo_a, lo_b), (hi_a, hi_b)) = bounds_grad(c1, c2);
        g_c1 += g_cov_nd * (lo_a + und * (hi_a - lo_a));
        g_c2 += g_cov_nd * (lo_b + und * (hi_b - lo_b));
        g_ud = g_cov_d * jd;
        g_und = g_cov_nd * jn;
    }
    (ll, [dot(dq_dp), g_s1, g_c1, g_s2, g_c2, g_ud, g_und])
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    k: usize,
    n_types: usize,
    prev: usize,
    index_mu: usize,
    /// `ln tau_se, ln tau_sp, [atanh rho]`, then `2k` effects.
    index_re: Option<usize>,
    index_corr: bool,
    ref_mu: usize,
    /// `ln tau_se, ln tau_sp`, then `2k` effects.
    ref_re: Option<usize>,
    dep: Option<usize>,
    dim: usize,
}

impl Layout {
    fn new(k: usize, n_types: usize, c: &TlcmConfig) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let s = at;
            at += n;
            s
        };
        let prev = take(k);
        let index_mu = take(2);
        let index_corr = c.index_correlated;
        let index_re = (c.index == EffectKind::Random).then(|| take(2 + usize::from(index_corr) + 2 * k));
        let ref_mu = take(2 * n_types);
        let ref_re = (c.refs == EffectKind::Random).then(|| take(2 + 2 * k));
        let dep = (c.dependence == Dependence::Dependent).then(|| take(2));
        Layout { k, n_types, prev, index_mu, index_re, index_corr, ref_mu, ref_re, dep, dim: at }
    }

    fn index_z(&self) -> usize {
        self.index_re.expect("random index") + 2 + usize::from(self.index_corr)
    }
}

/// Study-specific constrained values at one unconstrained point.
#[derive(Debug, Clone, PartialEq)]
pub struct TlcmPoint {
    pub prevalence: Vec<f64>,
    pub index_mu: (f64, f64),
    pub index_sigma: Option<(f64, f64)>,
    pub index_rho: Option<f64>,
    /// Per reference type `(logit Se, logit Sp)`.
    pub ref_mu: Vec<(f64, f64)>,
    pub ref_sigma: Option<(f64, f64)>,
    pub u: Option<(f64, f64)>,
    /// Per study `(logit Se, logit Sp)` of the index test.
    pub index_logits: Vec<(f64, f64)>,
    pub ref_logits: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct TlcmDensity {
    counts: Vec<[f64; 4]>,
    ref_type: Vec<usize>,
    ref_types: Vec<String>,
    layout: Layout,
    index_prior: AccuracyPair,
    ref_priors: Vec<AccuracyPair>,
    prevalence: BetaPrior,
    tau_se: NormalPrior,
    tau_sp: NormalPrior,
    lkj: LkjPrior,
    constant: f64,
}

/// Reference-test type per study and the sorted list of types.
fn ref_assignment(d: &Dataset, column: Option<&str>) -> Result<(Vec<usize>, Vec<String>), ModelError> {
    let Some(col) = column else {
        return Ok((vec![0; d.len()], vec![String::new()]));
    };
    if d.covariate(col).is_none() {
        return Err(ModelError::BadCovariate(format!("unknown reference column {col}")));
    }
    let labels: Vec<String> = d
        .studies()
        .iter()
        .map(|s| s.covariates.get(col).map(|v| v.label()).ok_or_else(|| ModelError::MissingRefType(s.study_id.clone())))
        .collect::<Result<_, _>>()?;
    let types: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let idx = labels.iter().map(|l| types.iter().position(|t| t == l).expect("present")).collect();
    Ok((idx, types))
}

impl TlcmDensity {
    pub fn new(d: &Dataset, c: &TlcmConfig, priors: &PriorSpec) -> Result<Self, ModelError> {
        let (ref_type, ref_types) = ref_assignment(d, c.ref_column.as_deref())?;
        let counts: Vec<[f64; 4]> =
            d.studies().iter().map(|s| [s.tp as f64, s.fp as f64, s.fn_ as f64, s.tn as f64]).collect();
        let constant = d.studies().iter().map(|s| ln_multinomial(&[s.tp, s.fp, s.fn_, s.tn])).sum();
        let t = &priors.tlcm;
        Ok(TlcmDensity {
            layout: Layout::new(d.len(), ref_types.len(), c),
            ref_priors: ref_types.iter().map(|ty| t.reference_for(ty)).collect(),
            counts,
            ref_type,
            ref_types,
            index_prior: t.index,
            prevalence: t.prevalence,
            tau_se: priors.bivariate.sigma_se,
            tau_sp: priors.bivariate.sigma_sp,
            lkj: priors.bivariate.rho,
            constant,
        })
    }

    /// Reference-test types; a single empty name when no type column is used.
    pub fn ref_types(&self) -> &[String] {
        &self.ref_types
    }

    pub fn point(&self, theta: &[f64]) -> TlcmPoint {
        let l = &self.layout;
        let prevalence = theta[l.prev..l.prev + l.k].iter().map(|&x| inv_logit(x)).collect();
        let index_mu = (theta[l.index_mu], theta[l.index_mu + 1]);
        let (mut index_sigma, mut index_rho) = (None, None);
        let index_logits = match l.index_re {
            None => vec![index_mu; l.k],
            Some(o) => {
                let (t1, t2) = (theta[o].exp(), theta[o + 1].exp());
                let rho = if l.index_corr { theta[o + 2].tanh() } else { 0.0 };
                let sq = (1.0 - rho * rho).sqrt();
                index_sigma = Some((t1, t2));
                index_rho = l.index_corr.then_some(rho);
                let z = l.index_z();
                (0..l.k)
                    .map(|i| {
                        let (z1, z2) = (theta[z + 2 * i], theta[z + 2 * i + 1]);
                        (index_mu.0 + t1 * z1, index_mu.1 + t2 * (rho * z1 + sq * z2))
                    })
                    .collect()
            }
        };
        let ref_mu: Vec<(f64, f64)> =
            (0..l.n_types).map(|r| (theta[l.ref_mu + 2 * r], theta[l.ref_mu + 2 * r + 1])).collect();
        let mut ref_sigma = None;
        let ref_logits = (0..l.k)
            .map(|i| {
                let m = ref_mu[self.ref_type[i]];
                match l.ref_re {
                    None => m,
                    Some(o) => {
                        let (t1, t2) = (theta[o].exp(), theta[o + 1].exp());
                        ref_sigma = Some((t1, t2));
                        (m.0 + t1 * theta[o + 2 + 2 * i], m.1 + t2 * theta[o + 3 + 2 * i])
                    }
                }
            })
            .collect();
        let u = l.dep.map(|o| (inv_logit(theta[o]), inv_logit(theta[o + 1])));
        TlcmPoint { prevalence, index_mu, index_sigma, index_rho, ref_mu, ref_sigma, u, index_logits, ref_logits }
    }

    /// Within-class covariances per study at `pt`.
    pub fn covariances(&self, pt: &TlcmPoint) -> Vec<(f64, f64)> {
        (0..self.layout.k)
            .map(|i| match pt.u {
                None => (0.0, 0.0),
                Some((ud, und)) => {
                    let (s1, c1) = (inv_logit(pt.index_logits[i].0), inv_logit(pt.index_logits[i].1));
                    let (s2, c2) = (inv_logit(pt.ref_logits[i].0), inv_logit(pt.ref_logits[i].1));
                    let (lo_d, hi_d) = bounds(s1, s2);
                    let (lo_n, hi_n) = bounds(c1, c2);
                    (lo_d + ud * (hi_d - lo_d), lo_n + und * (hi_n - lo_n))
                }
            })
            .collect()
    }
}

impl ModelDensity for TlcmDensity {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    /// Pooled accuracy logits start at their prior means, and the box is
    /// narrow, so that every chain begins in the class orientation the priors
    /// favour.
    fn init_center(&self) -> Vec<f64> {
        let l = self.layout;
        let mut c = vec![0.0; l.dim];
        c[l.index_mu] = self.index_prior.se.mean;
        c[l.index_mu + 1] = self.index_prior.sp.mean;
        for (t, pr) in self.ref_priors.iter().enumerate() {
            c[l.ref_mu + 2 * t] = pr.se.mean;
            c[l.ref_mu + 2 * t + 1] = pr.sp.mean;
        }
        c
    }

    fn init_radius(&self) -> f64 {
        0.5
    }

    fn log_density(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let l = self.layout;
        grad.fill(0.0);
        let pt = self.point(theta);
        let mut lp = self.constant;
        let u = pt.u;

        // Per-study likelihood; accumulate gradients on study-level logits.
        let mut g_index = vec![(0.0, 0.0); l.k];
        let mut g_ref = vec![(0.0, 0.0); l.k];
        let (mut g_ud, mut g_und) = (0.0, 0.0);
        for i in 0..l.k {
            let p = pt.prevalence[i];
            let (s1, c1) = (inv_logit(pt.index_logits[i].0), inv_logit(pt.index_logits[i].1));
            let (s2, c2) = (inv_logit(pt.ref_logits[i].0), inv_logit(pt.ref_logits[i].1));
            let (ll, g) = study_terms(&self.counts[i], [p, s1, c1, s2, c2], u);
            lp += ll;
            // Prevalence: Beta prior plus logit Jacobian.
            lp += self.prevalence.lpdf(p) + p.ln() + (1.0 - p).ln();
            grad[l.prev + i] = (g[0] + self.prevalence.dlpdf(p)) * p * (1.0 - p) + 1.0 - 2.0 * p;
            g_index[i] = (g[1] * s1 * (1.0 - s1), g[2] * c1 * (1.0 - c1));
            g_ref[i] = (g[3] * s2 * (1.0 - s2), g[4] * c2 * (1.0 - c2));
            g_ud += g[5];
            g_und += g[6];
        }

        // Index test.
        let (m1, m2) = pt.index_mu;
        lp += self.index_prior.se.lpdf(m1) + self.index_prior.sp.lpdf(m2);
        grad[l.index_mu] = self.index_prior.se.dlpdf(m1) + g_index.iter().map(|g| g.0).sum::<f64>();
        grad[l.index_mu + 1] = self.index_prior.sp.dlpdf(m2) + g_index.iter().map(|g| g.1).sum::<f64>();
        if let Some(o) = l.index_re {
            let (t1, t2) = pt.index_sigma.expect("random index");
            let rho = pt.index_rho.unwrap_or(0.0);
            let one_m_r2 = 1.0 - rho * rho;
            let sq = one_m_r2.sqrt();
            let z = l.index_z();
            let (mut g_t1, mut g_t2, mut g_rho) = (0.0, 0.0, 0.0);
            for i in 0..l.k {
                let (z1, z2) = (theta[z + 2 * i], theta[z + 2 * i + 1]);
                let (a, b) = g_index[i];
                lp -= 0.5 * (z1 * z1 + z2 * z2) + 2.0 * LN_SQRT_2PI;
                g_t1 += a * z1;
                g_t2 += b * (rho * z1 + sq * z2);
                g_rho += b * t2 * (z1 - rho / sq * z2);
                grad[z + 2 * i] = a * t1 + b * t2 * rho - z1;
                grad[z + 2 * i + 1] = b * t2 * sq - z2;
            }
            lp += self.tau_se.lpdf(t1) + theta[o] + self.tau_sp.lpdf(t2) + theta[o + 1];
            grad[o] = t1 * (g_t1 + self.tau_se.dlpdf(t1)) + 1.0;
            grad[o + 1] = t2 * (g_t2 + self.tau_sp.dlpdf(t2)) + 1.0;
            if l.index_corr {
                lp += self.lkj.lpdf_rho(rho) + one_m_r2.ln();
                grad[o + 2] = one_m_r2 * (g_rho + self.lkj.dlpdf_rho(rho)) - 2.0 * rho;
            }
        }

        // Reference tests.
        for (r, prior) in self.ref_priors.iter().enumerate() {
            let (m1, m2) = pt.ref_mu[r];
            lp += prior.se.lpdf(m1) + prior.sp.lpdf(m2);
            grad[l.ref_mu + 2 * r] += prior.se.dlpdf(m1);
            grad[l.ref_mu + 2 * r + 1] += prior.sp.dlpdf(m2);
        }
        for i in 0..l.k {
            let r = self.ref_type[i];
            grad[l.ref_mu + 2 * r] += g_ref[i].0;
            grad[l.ref_mu + 2 * r + 1] += g_ref[i].1;
        }
        if let Some(o) = l.ref_re {
            let (t1, t2) = pt.ref_sigma.expect("random refs");
            let (mut g_t1, mut g_t2) = (0.0, 0.0);
            for i in 0..l.k {
                let (w1, w2) = (theta[o + 2 + 2 * i], theta[o + 3 + 2 * i]);
                lp -= 0.5 * (w1 * w1 + w2 * w2) + 2.0 * LN_SQRT_2PI;
                g_t1 += g_ref[i].0 * w1;
                g_t2 += g_ref[i].1 * w2;
                grad[o + 2 + 2 * i] = g_ref[i].0 * t1 - w1;
                grad[o + 3 + 2 * i] = g_ref[i].1 * t2 - w2;
            }
            lp += self.tau_se.lpdf(t1) + theta[o] + self.tau_sp.lpdf(t2) + theta[o + 1];
            grad[o] = t1 * (g_t1 + self.tau_se.dlpdf(t1)) + 1.0;
            grad[o + 1] = t2 * (g_t2 + self.tau_sp.dlpdf(t2)) + 1.0;
        }

        // Dependence fractions: uniform priors, logit Jacobians.
        if let (Some(o), Some((ud, und))) = (l.dep, u) {
            lp += ud.ln() + (1.0 - ud).ln() + und.ln() + (1.0 - und).ln();
            grad[o] = g_ud * ud * (1.0 - ud) + 1.0 - 2.0 * ud;
            grad[o + 1] = g_und * und * (1.0 - und) + 1.0 - 2.0 * und;
        }
        lp
    }
}

fn type_suffix(ty: &str) -> String {
    if ty.is_empty() {
        String::new()
    } else {
        format!("[{ty}]")
    }
}

pub fn fit_tlcm(
    d: &Dataset,
    c: &TlcmConfig,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    exclusions: &BTreeSet<String>,
) -> Result<FitResult, ModelError> {
    fit_tlcm_with_progress(d, c, priors, cfg, exclusions, &|_| true)
}

pub fn fit_tlcm_with_progress(
    d: &Dataset,
    c: &TlcmConfig,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    exclusions: &BTreeSet<String>,
    observer: &(dyn Fn(Progress) -> bool + Sync),
) -> Result<FitResult, ModelError> {
    priors.validate()?;
    let data = exclude_studies(d, exclusions)?;
    require_studies(&data, 2)?;
    let density = TlcmDensity::new(&data, c, priors)?;
    let raw = nuts_sample_with_progress(&density, cfg, observer)?;
    let l = density.layout;
    let ids: Vec<String> = data.studies().iter().map(|s| s.study_id.clone()).collect();

    let mut names: Vec<String> = vec!["index_se".into(), "index_sp".into()];
    if l.index_re.is_some() {
        names.extend(["index_sigma_se".into(), "index_sigma_sp".into()]);
        if l.index_corr {
            names.push("index_rho".into());
        }
    }
    for ty in &density.ref_types {
        names.push(format!("ref_se{}", type_suffix(ty)));
        names.push(format!("ref_sp{}", type_suffix(ty)));
    }
    if l.ref_re.is_some() {
        names.extend(["ref_sigma_se".into(), "ref_sigma_sp".into()]);
    }
    if l.dep.is_some() {
        names.extend(["u_d".into(), "u_nd".into()]);
    }
    for id in &ids {
        for stem in ["prev", "study_index_se", "study_index_sp", "study_ref_se", "study_ref_sp", "cov_d", "cov_nd"] {
            names.push(format!("{stem}[{id}]"));
        }
    }

    let derive = |theta: &[f64], out: &mut Vec<f64>| {
        let pt = density.point(theta);
        out.push(inv_logit(pt.index_mu.0));
        out.push(inv_logit(pt.index_mu.1));
        if let Some((a, b)) = pt.index_sigma {
            out.extend([a, b]);
            if let Some(r) = pt.index_rho {
                out.push(r);
            }
        }
        for (a, b) in &pt.ref_mu {
            out.extend([inv_logit(*a), inv_logit(*b)]);
        }
        if let Some((a, b)) = pt.ref_sigma {
            out.extend([a, b]);
        }
        if let Some((a, b)) = pt.u {
            out.extend([a, b]);
        }
        let covs = density.covariances(&pt);
        for i in 0..pt.prevalence.len() {
            out.extend([
                pt.prevalence[i],
                inv_logit(pt.index_logits[i].0),
                inv_logit(pt.index_logits[i].1),
                inv_logit(pt.ref_logits[i].0),
                inv_logit(pt.ref_logits[i].1),
                covs[i].0,
                covs[i].1,
            ]);
        }
    };
    let config = echo(d, ModelSpec::Tlcm(c.clone()), priors, cfg, exclusions);
    let info = FitInfo {
        study_ids: ids,
        covariate: c.ref_column.clone(),
        ref_types: density.ref_types.iter().filter(|t| !t.is_empty()).cloned().collect(),
        ..Default::default()
    };
    let mut fit = FitResult::assemble(&raw, &names, derive, config, info);
    let mut pairs = vec![("index test".to_string(), "index_se".to_string(), "index_sp".to_string())];
    for ty in &density.ref_types {
        let label = if ty.is_empty() { "reference test".to_string() } else { format!("reference test {ty}") };
        pairs.push((label, format!("ref_se{}", type_suffix(ty)), format!("ref_sp{}", type_suffix(ty))));
    }
    for (label, se, sp) in pairs {
        if let (Some(a), Some(b)) = (fit.median(&se), fit.median(&sp)) {
            if a + b < 1.0 {
                fit.warnings.push(format!(
                    "{label}: posterior median Se + Sp = {:.3} < 1, the latent classes may be label switched",
                    a + b
                ));
            }
        }
    }
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResidual {
    pub study_id: String,
    pub observed_phi: f64,
    /// Observed minus model-expected correlation.
    pub residual: Quantiles,
}

impl CorrelationResidual {
    pub fn crosses_zero(&self) -> bool {
        self.residual.lower <= 0.0 && 0.0 <= self.residual.upper
    }
}

/// Observed minus expected index/reference correlation per study.
pub fn correlation_residuals(fit: &FitResult, d: &Dataset) -> Result<Vec<CorrelationResidual>, ModelError> {
    let mut out = Vec::with_capacity(fit.info.study_ids.len());
    for id in &fit.info.study_ids {
        let s = d.study(id).ok_or_else(|| ModelError::Data(crate::data::DataError::UnknownStudyId(id.clone())))?;
        let observed_phi = phi_coefficient(s.tp, s.fp, s.fn_, s.tn)?;
        let get = |stem: &str| {
            fit.draws(&format!("{stem}[{id}]")).ok_or_else(|| ModelError::BadCovariate(format!("fit lacks {stem}[{id}]")))
        };
        let (p, s1, c1) = (get("prev")?, get("study_index_se")?, get("study_index_sp")?);
        let (s2, c2, cd, cn) = (get("study_ref_se")?, get("study_ref_sp")?, get("cov_d")?, get("cov_nd")?);
        let mut res: Vec<f64> = (0..p.len())
            .map(|k| observed_phi - phi_of(cells(p[k], s1[k], c1[k], s2[k], c2[k], cd[k], cn[k])))
            .collect();
        out.push(CorrelationResidual { study_id: id.clone(), observed_phi, residual: Quantiles::of(&mut res) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateKind, CovariateSpec, CovariateValue, StudyRecord};
    use crate::sampler::check_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Sum over the 8 (disease, T1, T2) outcomes with class-conditional
    /// joint probabilities built from marginals and the covariance.
    fn enumerate(p: f64, s1: f64, c1: f64, s2: f64, c2: f64, cd: f64, cn: f64) -> [f64; 4] {
        let mut q = [0.0; 4];
        for disease in [true, false] {
            let (w, a, b, cov) = if disease { (p, s1, s2, cd) } else { (1.0 - p, 1.0 - c1, 1.0 - c2, cn) };
            for t1 in [true, false] {
                for t2 in [true, false] {
                    let pa = if t1 { a } else { 1.0 - a };
                    let pb = if t2 { b } else { 1.0 - b };
                    let sgn = if t1 == t2 { 1.0 } else { -1.0 };
                    let cell = match (t1, t2) {
                        (true, true) => 0,
                        (true, false) => 1,
                        (false, true) => 2,
                        (false, false) => 3,
                    };
                    q[cell] += w * (pa * pb + sgn * cov);
                }
            }
        }
        q
    }

    #[test]
    fn bounds_examples() {
        let (lo, hi) = covariance_bounds(0.8, 0.7).unwrap();
        assert!((lo + 0.06).abs() < 1e-15 && (hi - 0.14).abs() < 1e-15);
        assert_eq!(covariance_bounds(0.5, 0.5).unwrap(), (-0.25, 0.25));
        let (lo, hi) = covariance_bounds(1.0, 0.3).unwrap();
        assert_eq!((lo.abs(), hi.abs()), (0.0, 0.0));
        assert!(covariance_bounds(1.2, 0.5).is_err());
    }

    #[test]
    fn cells_of_perfect_tests() {
        assert_eq!(cell_probabilities(0.3, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap(), [0.3, 0.0, 0.0, 0.7]);
    }

    #[test]
    fn enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let (lo_d, hi_d) = covariance_bounds(v[1], v[3]).unwrap();
            let (lo_n, hi_n) = covariance_bounds(v[2], v[4]).unwrap();
            let cd = lo_d + rng.random::<f64>() * (hi_d - lo_d);
            let cn = lo_n + rng.random::<f64>() * (hi_n - lo_n);
            let q = cell_probabilities(v[0], v[1], v[2], v[3], v[4], cd, cn).unwrap();
            let e = enumerate(v[0], v[1], v[2], v[3], v[4], cd, cn);
            for k in 0..4 {
                assert!((q[k] - e[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bound_attainment_zeroes_cells() {
        let (lo, hi) = covariance_bounds(0.8, 0.7).unwrap();
        let q = cell_probabilities(1.0, 0.8, 0.5, 0.7, 0.5, hi, 0.0).unwrap();
        assert_eq!(q[2], 0.0);
        let q = cell_probabilities(1.0, 0.8, 0.5, 0.7, 0.5, lo, 0.0).unwrap();
        assert_eq!(q[3], 0.0);
        assert!(matches!(
            cell_probabilities(0.5, 0.8, 0.5, 0.7, 0.5, hi + 1e-3, 0.0),
            Err(ModelError::InfeasibleCovariance { .. })
        ));
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_coefficient(7, 0, 0, 4).unwrap(), 1.0);
        assert_eq!(phi_coefficient(5, 5, 5, 5).unwrap(), 0.0);
        assert_eq!(phi_coefficient(5, 0, 5, 0), Err(ModelError::ZeroMargin));
        // Pearson correlation of the expanded binary pairs.
        let (tp, fp, fn_, tn) = (53usize, 39usize, 5usize, 57usize);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (n, x, y) in [(tp, 1.0, 1.0), (fp, 1.0, 0.0), (fn_, 0.0, 1.0), (tn, 0.0, 0.0)] {
            xs.extend(std::iter::repeat_n(x, n));
            ys.extend(std::iter::repeat_n(y, n));
        }
        let (mx, my) = (crate::math::mean(&xs), crate::math::mean(&ys));
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let r = sxy / (sxx * syy).sqrt();
        assert!((phi_coefficient(53, 39, 5, 57).unwrap() - r).abs() < 1e-12);
    }

    fn typed_dataset() -> Dataset {
        let rows = [
            (40, 10, 8, 60, "A"),
            (25, 12, 4, 70, "B"),
            (33, 6, 9, 52, "A"),
            (18, 9, 3, 44, "B"),
            (51, 20, 6, 90, "A"),
        ];
        let studies = rows
            .iter()
            .enumerate()
            .map(|(i, &(tp, fp, fn_, tn, r))| {
                let mut s = StudyRecord::new(format!("S{i}"), 2000, tp, fp, fn_, tn);
                s.covariates.insert("reference".into(), CovariateValue::Text(r.into()));
                s
            })
            .collect();
        Dataset::new(studies, vec![CovariateSpec { name: "reference".into(), kind: CovariateKind::Categorical }], false)
    }

    fn configs() -> Vec<TlcmConfig> {
        let mut out = Vec::new();
        for index in [EffectKind::Fixed, EffectKind::Random] {
            for refs in [EffectKind::Fixed, EffectKind::Random] {
                for dependence in [Dependence::Independent, Dependence::Dependent] {
                    for index_correlated in [true, false] {
                        for ref_column in [None, Some("reference".to_string())] {
                            out.push(TlcmConfig { index, refs, dependence, ref_column, index_correlated });
                        }
                    }
                }
            }
        }
        out
    }

    /// The bounds are piecewise in the accuracies; finite differences are
    /// only meaningful away from the switch points.
    fn near_kink(m: &TlcmDensity, theta: &[f64]) -> bool {
        let pt = m.point(theta);
        pt.index_logits.iter().zip(&pt.ref_logits).any(|(a, b)| {
            let (s1, c1, s2, c2) = (inv_logit(a.0), inv_logit(a.1), inv_logit(b.0), inv_logit(b.1));
            [s1 + s2 - 1.0, s1 - s2, c1 + c2 - 1.0, c1 - c2].iter().any(|x| x.abs() < 0.02)
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = typed_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for c in configs() {
            let m = TlcmDensity::new(&d, &c, &PriorSpec::default()).unwrap();
            let mut checked = 0;
            while checked < 20 {
                let theta: Vec<f64> = (0..m.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
                if near_kink(&m, &theta) {
                    continue;
                }
                checked += 1;
                let err = check_gradient(&m, &theta, 1e-6).unwrap();
                assert!(err < 1e-5, "{c:?}: {err}");
            }
        }
    }

    #[test]
    fn zero_covariance_nests_independent_model() {
        let d = typed_dataset();
        let base = TlcmConfig { index: EffectKind::Fixed, refs: EffectKind::Fixed, ..Default::default() };
        let ind = TlcmDensity::new(&d, &base, &PriorSpec::default()).unwrap();
        let dep = TlcmDensity::new(&d, &TlcmConfig { dependence: Dependence::Dependent, ..base }, &PriorSpec::default())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta: Vec<f64> = (0..ind.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let pt = ind.point(&theta);
        let s1 = inv_logit(pt.index_mu.0);
        let c1 = inv_logit(pt.index_mu.1);
        let s2 = inv_logit(pt.ref_mu[0].0);
        let c2 = inv_logit(pt.ref_mu[0].1);
        let (lo_d, hi_d) = bounds(s1, s2);
        let (lo_n, hi_n) = bounds(c1, c2);
        let ud = -lo_d / (hi_d - lo_d);
        let und = -lo_n / (hi_n - lo_n);
        let mut t2 = theta.clone();
        t2.extend([crate::math::logit(ud), crate::math::logit(und)]);
        let mut g = vec![0.0; dep.dim()];
        let a = ind.log_density(&theta, &mut g[..ind.dim()]);
        let b = dep.log_density(&t2, &mut g);
        let jac = ud.ln() + (1.0 - ud).ln() + und.ln() + (1.0 - und).ln();
        assert!((b - jac - a).abs() < 1e-10, "{a} {b}");
    }

    #[test]
    fn likelihood_maximum_is_the_multinomial_mle() {
        // One study, fixed effects, conditional independence: the likelihood
        // can reach the saturated multinomial maximum but never exceed it.
        let n = [40.0, 10.0, 8.0, 60.0];
        let total: f64 = n.iter().sum();
        let mle: f64 = n.iter().map(|c| c * (c / total).ln()).sum();
        let mut best = f64::NEG_INFINITY;
        let grid: Vec<f64> = (1..40).map(|i| i as f64 / 40.0).collect();
        for &p in &grid {
            for &s1 in &grid {
                for &c1 in &grid {
                    for &s2 in grid.iter().step_by(2) {
                        for &c2 in grid.iter().step_by(2) {
                            let (ll, _) = study_terms(&n, [p, s1, c1, s2, c2], None);
                            assert!(ll <= mle + 1e-9);
                            best = best.max(ll);
                        }
                    }
                }
            }
        }
        // Refine the best grid point by gradient ascent on the logit scale.
        let mut x = [0.3f64, 0.8, 0.8, 0.8, 0.8].map(crate::math::logit);
        for _ in 0..20000 {
            let v = x.map(inv_logit);
            let (_, g) = study_terms(&n, v, None);
            for j in 0..5 {
                x[j] += 1e-3 * g[j] * v[j] * (1.0 - v[j]);
            }
        }
        let (ll, _) = study_terms(&n, x.map(inv_logit), None);
        assert!(best <= mle + 1e-9);
        assert!((ll - mle).abs() < 1e-6, "{ll} vs {mle}");
    }

    #[test]
    fn study_order_does_not_change_density() {
        let d = typed_dataset();
        let mut rev = d.studies().to_vec();
        rev.reverse();
        let d2 = Dataset::new(rev, d.covariate_schema().to_vec(), false);
        let c = TlcmConfig { ref_column: Some("reference".into()), refs: EffectKind::Fixed, ..Default::default() };
        let m1 = TlcmDensity::new(&d, &c, &PriorSpec::default()).unwrap();
        let m2 = TlcmDensity::new(&d2, &c, &PriorSpec::default()).unwrap();
        let k = d.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta: Vec<f64> = (0..m1.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Layout: prev[k], index mu[2], ln tau[2], atanh rho, z[2k], ref mu[4].
        let mut t2 = theta.clone();
        for i in 0..k {
            t2[i] = theta[k - 1 - i];
            let z = k + 5;
            t2[z + 2 * i] = theta[z + 2 * (k - 1 - i)];
            t2[z + 2 * i + 1] = theta[z + 2 * (k - 1 - i) + 1];
        }
        let mut g = vec![0.0; m1.dim()];
        let a = m1.log_density(&theta, &mut g);
        let b = m2.log_density(&t2, &mut g);
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn perfect_fit_gives_zero_residual() {
        // Cells equal to the observed table give the observed correlation.
        let q = cell_probabilities(0.4, 0.9, 0.8, 0.7, 0.85, 0.02, 0.01).unwrap();
        let scale = 1000.0;
        let phi_model = phi_of(q);
        let phi_data = phi_of(q.map(|x| x * scale));
        assert!((phi_model - phi_data).abs() < 1e-12);
    }

    #[test]
    fn missing_reference_type_reported() {
        let mut d = typed_dataset().studies().to_vec();
        d[2].covariates.clear();
        let d = Dataset::new(d, vec![CovariateSpec { name: "reference".into(), kind: CovariateKind::Categorical }], false);
        let c = TlcmConfig { ref_column: Some("reference".into()), ..Default::default() };
        assert_eq!(TlcmDensity::new(&d, &c, &PriorSpec::default()).unwrap_err(), ModelError::MissingRefType("S2".into()));
    }

    #[test]
    fn fit_reports_per_study_quantities() {
        let d = typed_dataset();
        let c = TlcmConfig { ref_column: Some("reference".into()), ..Default::default() };
        let cfg = SamplerConfig { warmup: 300, samples: 300, seed: 8, ..Default::default() };
        let fit = fit_tlcm(&d, &c, &PriorSpec::default(), &cfg, &BTreeSet::new()).unwrap();
        assert!(fit.params.contains_key("ref_se[A]") && fit.params.contains_key("ref_sp[B]"));
        assert!(fit.params.contains_key("prev[S0]"));
        assert_eq!(fit.info.ref_types, vec!["A", "B"]);
        let res = correlation_residuals(&fit, &d).unwrap();
        assert_eq!(res.len(), 5);
        for r in &res {
            assert!(r.residual.lower <= r.residual.median && r.residual.median <= r.residual.upper);
        }
    }

    proptest! {
        #[test]
        fn cells_sum_to_one(p in 0.0f64..=1.0, s1 in 0.0f64..=1.0, c1 in 0.0f64..=1.0,
                            s2 in 0.0f64..=1.0, c2 in 0.0f64..=1.0, ud in 0.0f64..=1.0, un in 0.0f64..=1.0) {
            let (lo_d, hi_d) = covariance_bounds(s1, s2).unwrap();
            let (lo_n, hi_n) = covariance_bounds(c1, c2).unwrap();
            let q = cell_probabilities(p, s1, c1, s2, c2, lo_d + ud * (hi_d - lo_d), lo_n + un * (hi_n - lo_n)).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-14);
            prop_assert!(q.iter().all(|&x| x >= -1e-15));
        }
    }
}
