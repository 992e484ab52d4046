//! Bivariate random-effects model with exact binomial likelihoods.
//!
//! One density serves the plain model and both meta-regressions: pooled logit
//! accuracies are `X beta` for a per-study design row `X`. Study effects are
//! non-centered, `eta_se = x beta_se + s1 z1` and
//! `eta_sp = x beta_sp + s2 (rho z1 + sqrt(1 - rho^2) z2)`.
//!
//! Unconstrained layout: `beta_se[p], beta_sp[p], ln s1, ln s2, atanh rho`,
//! then `(z1, z2)` for each study.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::hsroc::hsroc_from_bivariate;
use super::{ModelError, ModelSpec};
use crate::data::{exclude_studies, Dataset};
use crate::fit::{ConfigEcho, FitInfo, FitResult, VERSION};
use crate::math::{inv_logit, ln_choose, log1m_inv_logit, log_inv_logit, LN_SQRT_2PI};
use crate::priors::{BivariatePriors, LkjPrior, NormalPrior, PriorSpec};
use crate::sampler::{nuts_sample_with_progress, ModelDensity, Progress, SamplerConfig};

#[derive(Debug, Clone)]
pub struct BivariateDensity {
    tp: Vec<f64>,
    n_dis: Vec<f64>,
    tn: Vec<f64>,
    n_non: Vec<f64>,
    design: Vec<Vec<f64>>,
    coef_names: Vec<String>,
    priors_se: Vec<NormalPrior>,
    priors_sp: Vec<NormalPrior>,
    sigma_se: NormalPrior,
    sigma_sp: NormalPrior,
    rho: LkjPrior,
    constant: f64,
}

/// Constrained view of one unconstrained point.
#[derive(Debug, Clone, PartialEq)]
pub struct BivariatePoint {
    pub beta_se: Vec<f64>,
    pub beta_sp: Vec<f64>,
    pub sigma_se: f64,
    pub sigma_sp: f64,
    pub rho: f64,
    /// Study-level `(logit Se, logit Sp)`.
    pub study_logits: Vec<(f64, f64)>,
}

impl BivariateDensity {
    /// Intercept-only model.
    pub fn new(d: &Dataset, priors: &BivariatePriors) -> Self {
        let design = vec![vec![1.0]; d.len()];
        Self::with_design(d, design, vec!["intercept".into()], vec![priors.mu_se], vec![priors.mu_sp], priors)
    }

    pub fn with_design(
        d: &Dataset,
        design: Vec<Vec<f64>>,
        coef_names: Vec<String>,
        priors_se: Vec<NormalPrior>,
        priors_sp: Vec<NormalPrior>,
        priors: &BivariatePriors,
    ) -> Self {
        let s = d.studies();
        let constant = s.iter().map(|r| ln_choose(r.diseased(), r.tp) + ln_choose(r.non_diseased(), r.tn)).sum();
        BivariateDensity {
            tp: s.iter().map(|r| r.tp as f64).collect(),
            n_dis: s.iter().map(|r| r.diseased() as f64).collect(),
            tn: s.iter().map(|r| r.tn as f64).collect(),
            n_non: s.iter().map(|r| r.non_diseased() as f64).collect(),
            design,
            coef_names,
            priors_se,
            priors_sp,
            sigma_se: priors.sigma_se,
            sigma_sp: priors.sigma_sp,
            rho: priors.rho,
            constant,
        }
    }

    pub fn n_studies(&self) -> usize {
        self.tp.len()
    }

    pub fn n_coef(&self) -> usize {
        self.coef_names.len()
    }

    pub fn point(&self, theta: &[f64]) -> BivariatePoint {
        let p = self.n_coef();
        let beta_se = theta[..p].to_vec();
        let beta_sp = theta[p..2 * p].to_vec();
        let s1 = theta[2 * p].exp();
        let s2 = theta[2 * p + 1].exp();
        let rho = theta[2 * p + 2].tanh();
        let sq = (1.0 - rho * rho).sqrt();
        let z = &theta[2 * p + 3..];
        let study_logits = self
            .design
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let (z1, z2) = (z[2 * i], z[2 * i + 1]);
                let m_se: f64 = x.iter().zip(&beta_se).map(|(a, b)| a * b).sum();
                let m_sp: f64 = x.iter().zip(&beta_sp).map(|(a, b)| a * b).sum();
                (m_se + s1 * z1, m_sp + s2 * (rho * z1 + sq * z2))
            })
            .collect();
        BivariatePoint { beta_se, beta_sp, sigma_se: s1, sigma_sp: s2, rho, study_logits }
    }
}

impl ModelDensity for BivariateDensity {
    fn dim(&self) -> usize {
        2 * self.n_coef() + 3 + 2 * self.n_studies()
    }

    fn log_density(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let p = self.n_coef();
        let (u1, u2, v) = (theta[2 * p], theta[2 * p + 1], theta[2 * p + 2]);
        let s1 = u1.exp();
        let s2 = u2.exp();
        let rho = v.tanh();
        let one_m_r2 = 1.0 - rho * rho;
        let sq = one_m_r2.sqrt();
        let off = 2 * p + 3;
        grad.fill(0.0);

        let mut lp = self.constant;
        let (mut g_s1, mut g_s2, mut g_rho) = (0.0, 0.0, 0.0);
        for (i, x) in self.design.iter().enumerate() {
            let (z1, z2) = (theta[off + 2 * i], theta[off + 2 * i + 1]);
            let mut eta_se = s1 * z1;
            let mut eta_sp = s2 * (rho * z1 + sq * z2);
            for j in 0..p {
                eta_se += x[j] * theta[j];
                eta_sp += x[j] * theta[p + j];
            }
            let (tp, n1, tn, n0) = (self.tp[i], self.n_dis[i], self.tn[i], self.n_non[i]);
            lp += tp * log_inv_logit(eta_se) + (n1 - tp) * log1m_inv_logit(eta_se);
            lp += tn * log_inv_logit(eta_sp) + (n0 - tn) * log1m_inv_logit(eta_sp);
            lp -= 0.5 * (z1 * z1 + z2 * z2) + 2.0 * LN_SQRT_2PI;

            let r_se = tp - n1 * inv_logit(eta_se);
            let r_sp = tn - n0 * inv_logit(eta_sp);
            for j in 0..p {
                grad[j] += r_se * x[j];
                grad[p + j] += r_sp * x[j];
            }
            g_s1 += r_se * z1;
            g_s2 += r_sp * (rho * z1 + sq * z2);
            g_rho += r_sp * s2 * (z1 - rho / sq * z2);
            grad[off + 2 * i] = r_se * s1 + r_sp * s2 * rho - z1;
            grad[off + 2 * i + 1] = r_sp * s2 * sq - z2;
        }
        for j in 0..p {
            lp += self.priors_se[j].lpdf(theta[j]) + self.priors_sp[j].lpdf(theta[p + j]);
            grad[j] += self.priors_se[j].dlpdf(theta[j]);
            grad[p + j] += self.priors_sp[j].dlpdf(theta[p + j]);
        }
        lp += self.sigma_se.lpdf(s1) + u1 + self.sigma_sp.lpdf(s2) + u2;
        grad[2 * p] = s1 * (g_s1 + self.sigma_se.dlpdf(s1)) + 1.0;
        grad[2 * p + 1] = s2 * (g_s2 + self.sigma_sp.dlpdf(s2)) + 1.0;
        lp += self.rho.lpdf_rho(rho) + one_m_r2.ln();
        grad[2 * p + 2] = one_m_r2 * (g_rho + self.rho.dlpdf_rho(rho)) - 2.0 * rho;
        lp
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        for side in ["se", "sp"] {
            for c in &self.coef_names {
                out.push(format!("beta_{side}[{c}]"));
            }
        }
        out.extend(["log_sigma_se", "log_sigma_sp", "atanh_rho"].map(String::from));
        for i in 0..self.n_studies() {
            out.push(format!("z_se[{i}]"));
            out.push(format!("z_sp[{i}]"));
        }
        out
    }
}

pub(crate) fn require_studies(d: &Dataset, needed: usize) -> Result<(), ModelError> {
    if d.len() < needed {
        return Err(ModelError::TooFewStudies { needed, got: d.len() });
    }
    Ok(())
}

pub(crate) fn echo(
    d: &Dataset,
    model: ModelSpec,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    exclusions: &BTreeSet<String>,
) -> ConfigEcho {
    ConfigEcho {
        version: VERSION.to_string(),
        dataset_hash: d.content_hash(),
        model,
        priors: priors.clone(),
        sampler: cfg.clone(),
        exclusions: exclusions.iter().cloned().collect(),
    }
}

/// Pushes the accuracy summaries derived from one pair of pooled logits, in
/// the order given by [`accuracy_names`].
pub(crate) fn push_accuracy(out: &mut Vec<f64>, mu_se: f64, mu_sp: f64) {
    let se = inv_logit(mu_se);
    let sp = inv_logit(mu_sp);
    let lr_pos = se / (1.0 - sp);
    let lr_neg = (1.0 - se) / sp;
    out.extend([mu_se, mu_sp, se, sp, lr_pos / lr_neg, lr_pos, lr_neg]);
}

pub(crate) fn accuracy_names(suffix: &str) -> Vec<String> {
    ["mu_se", "mu_sp", "se", "sp", "dor", "lr_pos", "lr_neg"].iter().map(|n| format!("{n}{suffix}")).collect()
}

pub(crate) fn study_names(d: &Dataset) -> Vec<String> {
    d.studies()
        .iter()
        .flat_map(|s| [format!("study_se[{}]", s.study_id), format!("study_sp[{}]", s.study_id)])
        .collect()
}

pub(crate) fn push_shared(out: &mut Vec<f64>, pt: &BivariatePoint) {
    out.extend([pt.sigma_se, pt.sigma_sp, pt.rho, pt.rho * pt.sigma_se * pt.sigma_sp]);
}

pub(crate) fn shared_names() -> Vec<String> {
    ["sigma_se", "sigma_sp", "rho", "cov_se_sp"].map(String::from).to_vec()
}

pub(crate) fn push_studies(out: &mut Vec<f64>, pt: &BivariatePoint) {
    for (a, b) in &pt.study_logits {
        out.push(inv_logit(*a));
        out.push(inv_logit(*b));
    }
}

pub(crate) fn sample(
    density: &BivariateDensity,
    cfg: &SamplerConfig,
    observer: &(dyn Fn(Progress) -> bool + Sync),
) -> Result<crate::sampler::RawDraws, ModelError> {
    Ok(nuts_sample_with_progress(density, cfg, observer)?)
}

/// Bivariate fit after removing `exclusions`.
pub fn fit_bivariate(
    d: &Dataset,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    exclusions: &BTreeSet<String>,
) -> Result<FitResult, ModelError> {
    fit_bivariate_with_progress(d, priors, cfg, exclusions, &|_| true)
}

pub fn fit_bivariate_with_progress(
    d: &Dataset,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    exclusions: &BTreeSet<String>,
    observer: &(dyn Fn(Progress) -> bool + Sync),
) -> Result<FitResult, ModelError> {
    priors.validate()?;
    let data = exclude_studies(d, exclusions)?;
    require_studies(&data, 2)?;
    let config = echo(d, ModelSpec::Bivariate(Default::default()), priors, cfg, exclusions);
    fit_intercept_model(&data, priors, cfg, config, observer)
}

/// Intercept-only fit on an already filtered dataset.
pub(crate) fn fit_intercept_model(
    data: &Dataset,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    config: ConfigEcho,
    observer: &(dyn Fn(Progress) -> bool + Sync),
) -> Result<FitResult, ModelError> {
    let density = BivariateDensity::new(data, &priors.bivariate);
    let raw = sample(&density, cfg, observer)?;
    let mut names = accuracy_names("");
    names.extend(shared_names());
    names.extend(["hsroc_lambda", "hsroc_theta", "hsroc_beta", "hsroc_var_theta", "hsroc_var_alpha"].map(String::from));
    names.extend(study_names(data));
    let derive = |theta: &[f64], out: &mut Vec<f64>| {
        let pt = density.point(theta);
        push_accuracy(out, pt.beta_se[0], pt.beta_sp[0]);
        push_shared(out, &pt);
        let h = hsroc_from_bivariate(pt.beta_se[0], pt.beta_sp[0], pt.sigma_se, pt.sigma_sp, pt.rho)
            .expect("constrained draws are valid");
        out.extend([h.lambda, h.theta, h.beta, h.var_theta, h.var_alpha]);
        push_studies(out, &pt);
    };
    let info = FitInfo { study_ids: data.studies().iter().map(|s| s.study_id.clone()).collect(), ..Default::default() };
    Ok(FitResult::assemble(&raw, &names, derive, config, info))
}

/// One new-study `(logit Se, logit Sp)` draw per posterior draw, using the
/// pooled means and between-study covariance named with `suffix` (empty for
/// the plain model, `[level]` for a categorical level).
pub fn predictive_draws(fit: &FitResult, suffix: &str, seed: u64) -> Option<Vec<(f64, f64)>> {
    let mu_se = fit.draws(&format!("mu_se{suffix}"))?;
    let mu_sp = fit.draws(&format!("mu_sp{suffix}"))?;
    let s1 = fit.draws("sigma_se")?;
    let s2 = fit.draws("sigma_sp")?;
    let rho = fit.draws("rho")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Some(
        (0..mu_se.len())
            .map(|k| {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                let sq = (1.0 - rho[k] * rho[k]).sqrt();
                (mu_se[k] + s1[k] * z1, mu_sp[k] + s2[k] * (rho[k] * z1 + sq * z2))
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StudyRecord;
    use crate::math::normal_lpdf;
    use crate::sampler::check_gradient;

    fn small_dataset() -> Dataset {
        let rows = [
            (53, 39, 5, 57),
            (20, 12, 4, 40),
            (33, 5, 9, 71),
            (11, 21, 1, 30),
            (45, 30, 2, 88),
            (8, 3, 0, 19),
        ];
        let studies = rows
            .iter()
            .enumerate()
            .map(|(i, &(tp, fp, fn_, tn))| StudyRecord::new(format!("S{}", i + 1), 2000 + i as i32, tp, fp, fn_, tn))
            .collect();
        Dataset::new(studies, Vec::new(), false)
    }

    fn random_theta(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect()
    }

    /// Centered density over (beta, s1, s2, rho, study logits) with the
    /// log/tanh Jacobians, coded directly from the bivariate normal density.
    fn centered(d: &Dataset, pr: &BivariatePriors, theta: &[f64]) -> f64 {
        let (m_se, m_sp) = (theta[0], theta[1]);
        let s1 = theta[2].exp();
        let s2 = theta[3].exp();
        let rho = theta[4].tanh();
        let mut lp = pr.mu_se.lpdf(m_se) + pr.mu_sp.lpdf(m_sp);
        lp += pr.sigma_se.lpdf(s1) + theta[2] + pr.sigma_sp.lpdf(s2) + theta[3];
        lp += pr.rho.lpdf_rho(rho) + (1.0 - rho * rho).ln();
        for (i, s) in d.studies().iter().enumerate() {
            let a = theta[5 + 2 * i] - m_se;
            let b = theta[6 + 2 * i] - m_sp;
            let det = s1 * s1 * s2 * s2 * (1.0 - rho * rho);
            let q = (a * a * s2 * s2 - 2.0 * rho * s1 * s2 * a * b + b * b * s1 * s1) / det;
            lp += -2.0 * LN_SQRT_2PI - 0.5 * det.ln() - 0.5 * q;
            let pse = inv_logit(theta[5 + 2 * i]);
            let psp = inv_logit(theta[6 + 2 * i]);
            lp += ln_choose(s.diseased(), s.tp) + s.tp as f64 * pse.ln() + s.fn_ as f64 * (1.0 - pse).ln();
            lp += ln_choose(s.non_diseased(), s.tn) + s.tn as f64 * psp.ln() + s.fp as f64 * (1.0 - psp).ln();
        }
        lp
    }

    #[test]
    fn matches_centered_parameterization() {
        let d = small_dataset();
        let pr = PriorSpec::default().bivariate;
        let m = BivariateDensity::new(&d, &pr);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let theta = random_theta(m.dim(), &mut rng);
            let pt = m.point(&theta);
            let mut c = theta[..5].to_vec();
            for (a, b) in &pt.study_logits {
                c.push(*a);
                c.push(*b);
            }
            let jac: f64 = d.len() as f64 * (pt.sigma_se * pt.sigma_sp * (1.0 - pt.rho * pt.rho).sqrt()).ln();
            let mut g = vec![0.0; m.dim()];
            let nc = m.log_density(&theta, &mut g);
            assert!((nc - (centered(&d, &pr, &c) + jac)).abs() < 1e-10, "{nc}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = small_dataset();
        let m = BivariateDensity::new(&d, &PriorSpec::default().bivariate);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let theta = random_theta(m.dim(), &mut rng);
            let err = check_gradient(&m, &theta, 1e-6).unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn degenerate_random_effects_give_pooled_binomial() {
        let d = small_dataset();
        let pr = PriorSpec::default().bivariate;
        let m = BivariateDensity::new(&d, &pr);
        let mut theta = vec![0.0; m.dim()];
        theta[0] = 1.2;
        theta[1] = 0.4;
        theta[2] = -40.0;
        theta[3] = -40.0;
        let pt = m.point(&theta);
        for (a, b) in &pt.study_logits {
            assert_eq!((*a, *b), (1.2, 0.4));
        }
        let mut g = vec![0.0; m.dim()];
        let lp = m.log_density(&theta, &mut g);
        let (pse, psp) = (inv_logit(1.2), inv_logit(0.4));
        let lik: f64 = d
            .studies()
            .iter()
            .map(|s| {
                ln_choose(s.diseased(), s.tp)
                    + s.tp as f64 * pse.ln()
                    + s.fn_ as f64 * (1.0 - pse).ln()
                    + ln_choose(s.non_diseased(), s.tn)
                    + s.tn as f64 * psp.ln()
                    + s.fp as f64 * (1.0 - psp).ln()
            })
            .sum();
        let rest = pr.mu_se.lpdf(1.2) + pr.mu_sp.lpdf(0.4)
            + 2.0 * (pr.sigma_se.lpdf((-40f64).exp()) - 40.0)
            + pr.rho.lpdf_rho(0.0)
            + d.len() as f64 * 2.0 * normal_lpdf(0.0, 0.0, 1.0);
        assert!((lp - lik - rest).abs() < 1e-9);
    }

    #[test]
    fn study_order_does_not_change_density() {
        let d = small_dataset();
        let pr = PriorSpec::default().bivariate;
        let mut rev: Vec<StudyRecord> = d.studies().to_vec();
        rev.reverse();
        let d2 = Dataset::new(rev, Vec::new(), false);
        let (m1, m2) = (BivariateDensity::new(&d, &pr), BivariateDensity::new(&d2, &pr));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = random_theta(m1.dim(), &mut rng);
        let mut t2 = theta[..5].to_vec();
        for i in (0..d.len()).rev() {
            t2.push(theta[5 + 2 * i]);
            t2.push(theta[6 + 2 * i]);
        }
        let mut g = vec![0.0; m1.dim()];
        let a = m1.log_density(&theta, &mut g);
        let b = m2.log_density(&t2, &mut g);
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn fit_recovers_and_derives_exactly() {
        let d = small_dataset();
        let cfg = SamplerConfig { warmup: 500, samples: 500, seed: 21, ..Default::default() };
        let fit = fit_bivariate(&d, &PriorSpec::default(), &cfg, &BTreeSet::new()).unwrap();
        assert_eq!(fit.n_draws(), 2000);
        let (mu, se) = (fit.draws("mu_se").unwrap(), fit.draws("se").unwrap());
        for (m, s) in mu.iter().zip(&se) {
            assert_eq!(*s, inv_logit(*m));
        }
        let (dor, lp, ln) = (fit.draws("dor").unwrap(), fit.draws("lr_pos").unwrap(), fit.draws("lr_neg").unwrap());
        for k in 0..dor.len() {
            assert!((dor[k] - lp[k] / ln[k]).abs() <= 1e-12 * dor[k]);
        }
        let pooled = d.studies().iter().map(|s| s.tp).sum::<u64>() as f64
            / d.studies().iter().map(|s| s.diseased()).sum::<u64>() as f64;
        assert!((fit.median("se").unwrap() - pooled).abs() < 0.08);
        assert_eq!(fit.config.dataset_hash, d.content_hash());
        assert!(fit.params.contains_key("study_se[S3]"));
    }

    #[test]
    fn exclusions_down_to_one_study_rejected() {
        let d = small_dataset();
        let ex: BTreeSet<String> = ["S1", "S2", "S3", "S4", "S5"].iter().map(|s| s.to_string()).collect();
        let err = fit_bivariate(&d, &PriorSpec::default(), &SamplerConfig::default(), &ex).unwrap_err();
        assert_eq!(err, ModelError::TooFewStudies { needed: 2, got: 1 });
    }

    #[test]
    fn predictive_cloud_moments() {
        let d = small_dataset();
        let cfg = SamplerConfig { warmup: 500, samples: 2000, seed: 4, ..Default::default() };
        let fit = fit_bivariate(&d, &PriorSpec::default(), &cfg, &BTreeSet::new()).unwrap();
        let pred = predictive_draws(&fit, "", 99).unwrap();
        assert_eq!(pred, predictive_draws(&fit, "", 99).unwrap());
        let (xs, ys): (Vec<f64>, Vec<f64>) = pred.iter().copied().unzip();
        let (_, cov) = crate::math::mean_cov2(&xs, &ys);
        let (_, cov_mu) = crate::math::mean_cov2(&fit.draws("mu_se").unwrap(), &fit.draws("mu_sp").unwrap());
        let s1 = fit.draws("sigma_se").unwrap();
        let s2 = fit.draws("sigma_sp").unwrap();
        let c12 = fit.draws("cov_se_sp").unwrap();
        let e11 = crate::math::mean(&s1.iter().map(|s| s * s).collect::<Vec<_>>());
        let e22 = crate::math::mean(&s2.iter().map(|s| s * s).collect::<Vec<_>>());
        let e12 = crate::math::mean(&c12);
        assert!((cov[0][0] / (e11 + cov_mu[0][0]) - 1.0).abs() < 0.05);
        assert!((cov[1][1] / (e22 + cov_mu[1][1]) - 1.0).abs() < 0.05);
        assert!((cov[0][1] - (e12 + cov_mu[0][1])).abs() < 0.1 * (cov[0][0] * cov[1][1]).sqrt());
    }
}
