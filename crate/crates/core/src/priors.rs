//! Hyperpriors: representation, probability-scale intervals, elicitation from
//! probability intervals, and prior-predictive summaries.
//!
//! Between-study SD priors default to a half-normal with scale 1.5.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};
use thiserror::Error;

use crate::math::{inv_logit, logit, normal_lpdf, quantile_sorted, std_normal_quantile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("level must lie in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("probability interval must satisfy 0 < lower < upper < 1, got ({0}, {1})")]
    BadInterval(f64, f64),
    #[error("invalid prior: {0}")]
    Invalid(String),
    #[error("prior-predictive summary needs at least 1000 draws, got {0}")]
    TooFewDraws(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
    #[serde(default)]
    pub truncated_at_zero: bool,
}

impl NormalPrior {
    pub fn new(mean: f64, sd: f64) -> Self {
        NormalPrior { mean, sd, truncated_at_zero: false }
    }

    /// Zero-mean normal truncated at zero, for SD parameters.
    pub fn half(sd: f64) -> Self {
        NormalPrior { mean: 0.0, sd, truncated_at_zero: true }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        if !(self.sd > 0.0 && self.sd.is_finite() && self.mean.is_finite()) {
            return Err(PriorError::Invalid(format!("normal prior needs finite mean and sd > 0, got {self:?}")));
        }
        if self.truncated_at_zero && self.mean != 0.0 {
            return Err(PriorError::Invalid("truncated normal priors must have mean 0".into()));
        }
        Ok(())
    }

    pub fn lpdf(&self, x: f64) -> f64 {
        let base = normal_lpdf(x, self.mean, self.sd);
        if self.truncated_at_zero {
            base + std::f64::consts::LN_2
        } else {
            base
        }
    }

    /// Derivative of [`Self::lpdf`] in `x`.
    pub fn dlpdf(&self, x: f64) -> f64 {
        -(x - self.mean) / (self.sd * self.sd)
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        let v = self.mean + self.sd * z;
        if self.truncated_at_zero {
            v.abs()
        } else {
            v
        }
    }
}

/// LKJ prior, used here on a 2x2 correlation matrix only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LkjPrior {
    pub eta: f64,
}

impl LkjPrior {
    pub fn validate(&self) -> Result<(), PriorError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(PriorError::Invalid(format!("LKJ shape must be > 0, got {}", self.eta)));
        }
        Ok(())
    }

    /// Log density of the off-diagonal correlation of a 2x2 LKJ(eta) matrix:
    /// `(1 - rho^2)^(eta - 1) / (2^(2 eta - 1) B(eta, eta))`.
    pub fn lpdf_rho(&self, rho: f64) -> f64 {
        (self.eta - 1.0) * (1.0 - rho * rho).ln()
            - (2.0 * self.eta - 1.0) * std::f64::consts::LN_2
            - ln_beta(self.eta, self.eta)
    }

    pub fn dlpdf_rho(&self, rho: f64) -> f64 {
        -2.0 * rho * (self.eta - 1.0) / (1.0 - rho * rho)
    }

    /// Marginal CDF of rho: `rho = 2x - 1` with `x ~ Beta(eta, eta)`.
    pub fn cdf_rho(&self, rho: f64) -> f64 {
        let x = ((rho + 1.0) / 2.0).clamp(0.0, 1.0);
        beta_reg(self.eta, self.eta, x)
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let beta = Beta::new(self.eta, self.eta).expect("validated shape");
        2.0 * beta.sample(rng) - 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

impl BetaPrior {
    pub fn validate(&self) -> Result<(), PriorError> {
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(PriorError::Invalid(format!("beta prior needs a, b > 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn lpdf(&self, p: f64) -> f64 {
        (self.a - 1.0) * p.ln() + (self.b - 1.0) * (1.0 - p).ln() - ln_beta(self.a, self.b)
    }

    pub fn dlpdf(&self, p: f64) -> f64 {
        (self.a - 1.0) / p - (self.b - 1.0) / (1.0 - p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BivariatePriors {
    pub mu_se: NormalPrior,
    pub mu_sp: NormalPrior,
    pub sigma_se: NormalPrior,
    pub sigma_sp: NormalPrior,
    pub rho: LkjPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaregPriors {
    /// Continuous regression intercepts (logit scale).
    pub intercept: NormalPrior,
    /// Continuous regression slopes.
    pub coefficient: NormalPrior,
    /// Per-level pooled logit accuracies for categorical regression.
    pub level_mean: NormalPrior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPair {
    pub se: NormalPrior,
    pub sp: NormalPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlcmPriors {
    pub index: AccuracyPair,
    /// Default for every reference-test type.
    pub reference: AccuracyPair,
    /// Per reference-type overrides.
    #[serde(default)]
    pub reference_by_type: BTreeMap<String, AccuracyPair>,
    pub prevalence: BetaPrior,
}

impl TlcmPriors {
    pub fn reference_for(&self, ref_type: &str) -> AccuracyPair {
        self.reference_by_type.get(ref_type).copied().unwrap_or(self.reference)
    }
}

/// Every hyperprior used by the models, in resolved logit-normal form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub bivariate: BivariatePriors,
    pub metareg: MetaregPriors,
    pub tlcm: TlcmPriors,
}

/// Logit-scale prior matching a 95% interval of (0.43, 0.96) on the
/// probability scale, used for latent class accuracies.
pub fn default_tlcm_accuracy_prior() -> NormalPrior {
    logit_normal_from_prob_interval(0.43, 0.96, 0.95).expect("valid interval")
}

impl Default for PriorSpec {
    fn default() -> Self {
        let acc = default_tlcm_accuracy_prior();
        PriorSpec {
            bivariate: BivariatePriors {
                mu_se: NormalPrior::new(0.0, 1.5),
                mu_sp: NormalPrior::new(0.0, 1.5),
                sigma_se: NormalPrior::half(1.5),
                sigma_sp: NormalPrior::half(1.5),
                rho: LkjPrior { eta: 2.0 },
            },
            metareg: MetaregPriors {
                intercept: NormalPrior::new(0.0, 1.5),
                coefficient: NormalPrior::new(0.0, 1.0),
                level_mean: NormalPrior::new(0.0, 1.0),
            },
            tlcm: TlcmPriors {
                index: AccuracyPair { se: acc, sp: acc },
                reference: AccuracyPair { se: acc, sp: acc },
                reference_by_type: BTreeMap::new(),
                prevalence: BetaPrior { a: 1.0, b: 1.0 },
            },
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), PriorError> {
        let b = &self.bivariate;
        for p in [b.mu_se, b.mu_sp, b.sigma_se, b.sigma_sp] {
            p.validate()?;
        }
        if !b.sigma_se.truncated_at_zero || !b.sigma_sp.truncated_at_zero {
            return Err(PriorError::Invalid("between-study SD priors must be truncated at zero".into()));
        }
        b.rho.validate()?;
        let m = &self.metareg;
        for p in [m.intercept, m.coefficient, m.level_mean] {
            p.validate()?;
        }
        let t = &self.tlcm;
        for pair in std::iter::once(&t.index).chain(std::iter::once(&t.reference)).chain(t.reference_by_type.values()) {
            pair.se.validate()?;
            pair.sp.validate()?;
        }
        t.prevalence.validate()
    }
}

/// Central probability-scale interval implied by a logit-normal prior.
pub fn prob_interval_of_logit_normal(p: &NormalPrior, level: f64) -> Result<(f64, f64), PriorError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(PriorError::BadLevel(level));
    }
    if p.truncated_at_zero {
        return Err(PriorError::Invalid("probability interval of a truncated prior".into()));
    }
    let z = std_normal_quantile((1.0 + level) / 2.0);
    Ok((inv_logit(p.mean - z * p.sd), inv_logit(p.mean + z * p.sd)))
}

/// Logit-normal prior whose central `level` interval is `(lo, hi)`.
pub fn logit_normal_from_prob_interval(lo: f64, hi: f64, level: f64) -> Result<NormalPrior, PriorError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(PriorError::BadLevel(level));
    }
    if !(lo > 0.0 && lo < hi && hi < 1.0) {
        return Err(PriorError::BadInterval(lo, hi));
    }
    let z = std_normal_quantile((1.0 + level) / 2.0);
    let (a, b) = (logit(lo), logit(hi));
    Ok(NormalPrior::new((a + b) / 2.0, (b - a) / (2.0 * z)))
}

/// Central interval of the marginal correlation under a 2x2 LKJ prior,
/// found by bisection on the exact CDF.
pub fn lkj2x2_interval(p: &LkjPrior, level: f64) -> Result<(f64, f64), PriorError> {
    if !(0.0..1.0).contains(&level) {
        return Err(PriorError::BadLevel(level));
    }
    p.validate()?;
    if level == 0.0 {
        return Ok((0.0, 0.0));
    }
    let target = (1.0 + level) / 2.0;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p.cdf_rho(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let upper = 0.5 * (lo + hi);
    Ok((-upper, upper))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorModelKind {
    Bivariate,
    Tlcm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Quantiles {
    pub fn of(values: &mut [f64]) -> Self {
        values.sort_by(f64::total_cmp);
        Quantiles {
            median: quantile_sorted(values, 0.5),
            lower: quantile_sorted(values, 0.025),
            upper: quantile_sorted(values, 0.975),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRow {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logit: Option<Quantiles>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probability: Option<Quantiles>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub natural: Option<Quantiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSummary {
    pub n_draws: usize,
    pub seed: u64,
    pub rows: Vec<PriorRow>,
}

impl PriorSummary {
    pub fn row(&self, name: &str) -> Option<&PriorRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn accuracy_row<R: Rng>(name: &str, prior: &NormalPrior, n: usize, rng: &mut R) -> PriorRow {
    let mut logits: Vec<f64> = (0..n).map(|_| prior.draw(rng)).collect();
    let mut probs: Vec<f64> = logits.iter().map(|&x| inv_logit(x)).collect();
    PriorRow {
        name: name.to_string(),
        logit: Some(Quantiles::of(&mut logits)),
        probability: Some(Quantiles::of(&mut probs)),
        natural: None,
    }
}

fn natural_row(name: &str, mut draws: Vec<f64>) -> PriorRow {
    PriorRow { name: name.to_string(), logit: None, probability: None, natural: Some(Quantiles::of(&mut draws)) }
}

/// Monte Carlo summary of the joint prior: medians and 95% intervals.
pub fn prior_predictive_summary(
    spec: &PriorSpec,
    model_kind: PriorModelKind,
    n_draws: usize,
    seed: u64,
) -> Result<PriorSummary, PriorError> {
    if n_draws < 1000 {
        return Err(PriorError::TooFewDraws(n_draws));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &spec.bivariate;
    let mut rows = Vec::new();
    match model_kind {
        PriorModelKind::Bivariate => {
            rows.push(accuracy_row("Se", &b.mu_se, n_draws, &mut rng));
            rows.push(accuracy_row("Sp", &b.mu_sp, n_draws, &mut rng));
        }
        PriorModelKind::Tlcm => {
            let t = &spec.tlcm;
            rows.push(accuracy_row("index_Se", &t.index.se, n_draws, &mut rng));
            rows.push(accuracy_row("index_Sp", &t.index.sp, n_draws, &mut rng));
            rows.push(accuracy_row("ref_Se", &t.reference.se, n_draws, &mut rng));
            rows.push(accuracy_row("ref_Sp", &t.reference.sp, n_draws, &mut rng));
            for (ty, pair) in &t.reference_by_type {
                rows.push(accuracy_row(&format!("ref_Se[{ty}]"), &pair.se, n_draws, &mut rng));
                rows.push(accuracy_row(&format!("ref_Sp[{ty}]"), &pair.sp, n_draws, &mut rng));
            }
            let beta = Beta::new(t.prevalence.a, t.prevalence.b).expect("validated");
            let mut prev: Vec<f64> = (0..n_draws).map(|_| beta.sample(&mut rng)).collect();
            rows.push(PriorRow {
                name: "prevalence".into(),
                logit: None,
                probability: Some(Quantiles::of(&mut prev)),
                natural: None,
            });
            let u_d: Vec<f64> = (0..n_draws).map(|_| rng.random::<f64>()).collect();
            let u_nd: Vec<f64> = (0..n_draws).map(|_| rng.random::<f64>()).collect();
            rows.push(natural_row("u_d", u_d));
            rows.push(natural_row("u_nd", u_nd));
        }
    }
    let sig_se: Vec<f64> = (0..n_draws).map(|_| b.sigma_se.draw(&mut rng)).collect();
    let sig_sp: Vec<f64> = (0..n_draws).map(|_| b.sigma_sp.draw(&mut rng)).collect();
    let rho: Vec<f64> = (0..n_draws).map(|_| b.rho.draw(&mut rng)).collect();
    rows.push(natural_row("sigma_se", sig_se));
    rows.push(natural_row("sigma_sp", sig_sp));
    rows.push(natural_row("rho", rho));
    Ok(PriorSummary { n_draws, seed, rows })
}

/// One logit-accuracy prior as written in a priors file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scale", rename_all = "lowercase", deny_unknown_fields)]
pub enum AccuracyPriorEntry {
    Logit {
        mean: f64,
        sd: f64,
    },
    Probability {
        lower: f64,
        upper: f64,
        #[serde(default = "default_level")]
        level: f64,
    },
}

fn default_level() -> f64 {
    0.95
}

impl AccuracyPriorEntry {
    pub fn resolve(&self) -> Result<NormalPrior, PriorError> {
        let p = match *self {
            AccuracyPriorEntry::Logit { mean, sd } => NormalPrior::new(mean, sd),
            AccuracyPriorEntry::Probability { lower, upper, level } => {
                logit_normal_from_prob_interval(lower, upper, level)?
            }
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdPriorEntry {
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub se: Option<AccuracyPriorEntry>,
    pub sp: Option<AccuracyPriorEntry>,
}

/// Priors file (JSON). Every field is optional and falls back to the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsFile {
    pub mu_se: Option<AccuracyPriorEntry>,
    pub mu_sp: Option<AccuracyPriorEntry>,
    pub sigma_se: Option<SdPriorEntry>,
    pub sigma_sp: Option<SdPriorEntry>,
    pub rho: Option<LkjPrior>,
    pub metareg_intercept: Option<AccuracyPriorEntry>,
    pub metareg_coefficient: Option<AccuracyPriorEntry>,
    pub metareg_level_mean: Option<AccuracyPriorEntry>,
    pub tlcm_index: Option<PairEntry>,
    pub tlcm_reference: Option<PairEntry>,
    #[serde(default)]
    pub tlcm_reference_by_type: BTreeMap<String, PairEntry>,
    pub prevalence: Option<BetaPrior>,
}

fn merge_pair(base: AccuracyPair, entry: Option<&PairEntry>) -> Result<AccuracyPair, PriorError> {
    let mut out = base;
    if let Some(e) = entry {
        if let Some(se) = &e.se {
            out.se = se.resolve()?;
        }
        if let Some(sp) = &e.sp {
            out.sp = sp.resolve()?;
        }
    }
    Ok(out)
}

impl PriorsFile {
    pub fn from_json(text: &str) -> Result<Self, PriorError> {
        serde_json::from_str(text).map_err(|e| PriorError::Invalid(e.to_string()))
    }

    pub fn resolve(&self) -> Result<PriorSpec, PriorError> {
        let mut spec = PriorSpec::default();
        let acc = |e: &Option<AccuracyPriorEntry>, dflt: NormalPrior| e.as_ref().map_or(Ok(dflt), |e| e.resolve());
        let b = &mut spec.bivariate;
        b.mu_se = acc(&self.mu_se, b.mu_se)?;
        b.mu_sp = acc(&self.mu_sp, b.mu_sp)?;
        if let Some(s) = self.sigma_se {
            b.sigma_se = NormalPrior::half(s.sd);
        }
        if let Some(s) = self.sigma_sp {
            b.sigma_sp = NormalPrior::half(s.sd);
        }
        if let Some(r) = self.rho {
            b.rho = r;
        }
        let m = &mut spec.metareg;
        m.intercept = acc(&self.metareg_intercept, m.intercept)?;
        m.coefficient = acc(&self.metareg_coefficient, m.coefficient)?;
        m.level_mean = acc(&self.metareg_level_mean, m.level_mean)?;
        let t = &mut spec.tlcm;
        t.index = merge_pair(t.index, self.tlcm_index.as_ref())?;
        t.reference = merge_pair(t.reference, self.tlcm_reference.as_ref())?;
        for (ty, entry) in &self.tlcm_reference_by_type {
            let pair = merge_pair(t.reference, Some(entry))?;
            t.reference_by_type.insert(ty.clone(), pair);
        }
        if let Some(p) = self.prevalence {
            t.prevalence = p;
        }
        spec.validate()?;
        Ok(spec)
    }
}
