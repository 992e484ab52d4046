//! From a dataset and a request to a complete result. The command line and
//! the job service both go through [`run_analysis`], so identical requests
//! give identical payloads.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::diagnostics::{summarize_draws, SummaryRow};
use crate::fit::FitResult;
use crate::models::metareg::{
    accuracy_vs_covariate, fit_metareg_with_progress, fit_subgroups_with_progress, ContrastTable,
    CovariateCurvePoint,
};
use crate::models::tlcm::fit_tlcm_with_progress;
use crate::models::{
    bivariate::fit_bivariate_with_progress, correlation_residuals, pairwise_contrasts, CorrelationResidual, ModelError,
    ModelSpec, SubgroupOutcome,
};
use crate::outputs::{study_weights, HsrocRecord, OutputError, WeightTable};
use crate::priors::{PriorError, PriorSpec, PriorsFile};
use crate::sampler::{Progress, SamplerConfig, SamplerError};

/// A complete analysis request: model, priors, sampler settings and
/// excluded studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    #[serde(flatten)]
    pub model: ModelSpec,
    #[serde(default)]
    pub priors: PriorsFile,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub exclude: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("run cancelled")]
    Cancelled,
}

impl From<ModelError> for AnalysisError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Sampler(SamplerError::Cancelled) => AnalysisError::Cancelled,
            ModelError::Data(d) => AnalysisError::Data(d),
            ModelError::Prior(p) => AnalysisError::Prior(p),
            other => AnalysisError::Model(other),
        }
    }
}

impl AnalysisConfig {
    pub fn from_json(text: &str) -> Result<Self, AnalysisError> {
        serde_json::from_str(text).map_err(|e| AnalysisError::Config(e.to_string()))
    }

    pub fn exclusions(&self) -> BTreeSet<String> {
        self.exclude.iter().cloned().collect()
    }

    /// Checks everything that can be checked without sampling and returns
    /// the resolved priors.
    pub fn check(&self, d: &Dataset) -> Result<PriorSpec, AnalysisError> {
        self.sampler.validate().map_err(|e| AnalysisError::Config(e.to_string()))?;
        let priors = self.priors.resolve()?;
        priors.validate()?;
        for id in &self.exclude {
            if d.study(id).is_none() {
                return Err(AnalysisError::Config(format!("excluded study {id:?} is not in the dataset")));
            }
        }
        let column = match &self.model {
            ModelSpec::Bivariate(_) => None,
            ModelSpec::Metareg(m) => Some(&m.covariate),
            ModelSpec::Subgroup(s) => Some(&s.covariate),
            ModelSpec::Tlcm(t) => t.ref_column.as_ref(),
        };
        if let Some(c) = column {
            if d.covariate(c).is_none() {
                return Err(AnalysisError::Config(format!("unknown covariate {c:?}")));
            }
        }
        Ok(priors)
    }
}

/// Progress of a possibly multi-fit analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisProgress {
    /// Index of the running fit.
    pub stage: usize,
    pub stages: usize,
    pub chain: usize,
    pub iteration: usize,
    /// Iterations per chain, warmup included.
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BivariateReport {
    pub summary: Vec<SummaryRow>,
    pub hsroc: HsrocRecord,
    pub weights: WeightTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaregReport {
    /// Parameters that vary with the covariate.
    pub varying: Vec<SummaryRow>,
    /// Parameters shared across covariate values.
    pub shared: Vec<SummaryRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrasts: Option<ContrastTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_curve: Option<Vec<CovariateCurvePoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlcmReport {
    pub summary: Vec<SummaryRow>,
    /// Absent when an observed table has a zero margin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<Vec<CorrelationResidual>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "analysis", rename_all = "lowercase")]
pub enum AnalysisResult {
    Bivariate {
        fit: Box<FitResult>,
        report: BivariateReport,
    },
    Metareg {
        fit: Box<FitResult>,
        report: MetaregReport,
    },
    Subgroup {
        groups: BTreeMap<String, SubgroupOutcome>,
        summaries: BTreeMap<String, Vec<SummaryRow>>,
    },
    Tlcm {
        fit: Box<FitResult>,
        report: TlcmReport,
    },
}

impl AnalysisResult {
    /// Every fit in the result with its group label (empty for single fits).
    pub fn fits(&self) -> Vec<(&str, &FitResult)> {
        match self {
            AnalysisResult::Bivariate { fit, .. }
            | AnalysisResult::Metareg { fit, .. }
            | AnalysisResult::Tlcm { fit, .. } => vec![("", fit.as_ref())],
            AnalysisResult::Subgroup { groups, .. } => {
                groups.iter().filter_map(|(k, o)| o.fit().map(|f| (k.as_str(), f))).collect()
            }
        }
    }

    /// All diagnostics gates pass for every fit.
    pub fn passes(&self) -> bool {
        self.fits().iter().all(|(_, f)| f.diagnostics.pass)
    }

    /// Posterior median Se and Sp of the pooled (index) test. `group` picks a
    /// subgroup fit or a categorical level.
    pub fn pooled_accuracy(&self, group: Option<&str>) -> Option<(f64, f64)> {
        let fits = self.fits();
        let pick = |f: &FitResult, a: &str, b: &str| f.median(a).or_else(|| f.median(b));
        match group {
            Some(g) => {
                if let Some((_, f)) = fits.iter().find(|(l, _)| *l == g) {
                    return pick(f, "se", "index_se").zip(pick(f, "sp", "index_sp"));
                }
                let f = fits.first()?.1;
                f.median(&format!("se[{g}]")).zip(f.median(&format!("sp[{g}]")))
            }
            None => {
                let f = fits.first()?.1;
                pick(f, "se", "index_se").zip(pick(f, "sp", "index_sp"))
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }
}

const ACCURACY: [&str; 7] = ["se", "sp", "dor", "lr_pos", "lr_neg", "mu_se", "mu_sp"];
const SHARED: [&str; 4] = ["sigma_se", "sigma_sp", "rho", "cov_se_sp"];
const HSROC: [&str; 5] = ["hsroc_lambda", "hsroc_theta", "hsroc_beta", "hsroc_var_theta", "hsroc_var_alpha"];

fn summary(fit: &FitResult, names: &[String]) -> Vec<SummaryRow> {
    let refs: Vec<&str> = names.iter().map(String::as_str).filter(|n| fit.params.contains_key(*n)).collect();
    summarize_draws(fit, &refs).expect("names filtered to present parameters")
}

fn bivariate_summary(fit: &FitResult) -> Vec<SummaryRow> {
    let names: Vec<String> = ACCURACY.iter().chain(&SHARED).chain(&HSROC).map(|s| s.to_string()).collect();
    summary(fit, &names)
}

/// Non-study-level parameters of a latent class fit.
fn tlcm_summary(fit: &FitResult) -> Vec<SummaryRow> {
    const STUDY: [&str; 7] = ["prev[", "study_index_", "study_ref_", "cov_d[", "cov_nd[", "study_se[", "study_sp["];
    let names: Vec<String> = fit.params.keys().filter(|k| !STUDY.iter().any(|s| k.starts_with(s))).cloned().collect();
    summary(fit, &names)
}

fn metareg_report(fit: &FitResult, d: &Dataset) -> Result<MetaregReport, AnalysisError> {
    let shared = summary(fit, &SHARED.map(String::from));
    if fit.info.levels.is_empty() {
        let mut varying: Vec<String> =
            ["intercept_se", "slope_se", "intercept_sp", "slope_sp"].map(String::from).to_vec();
        varying.extend(ACCURACY.map(String::from));
        let covariate = fit.info.covariate.as_deref().unwrap_or_default();
        let xs: Vec<f64> = d
            .studies()
            .iter()
            .filter(|s| fit.info.study_ids.contains(&s.study_id))
            .filter_map(|s| s.covariates.get(covariate).and_then(|v| v.as_f64()))
            .collect();
        let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let grid: Vec<f64> = (0..50).map(|i| lo + (hi - lo) * i as f64 / 49.0).collect();
        Ok(MetaregReport {
            varying: summary(fit, &varying),
            shared,
            contrasts: None,
            covariate_curve: accuracy_vs_covariate(fit, &grid),
        })
    } else {
        let varying: Vec<String> =
            fit.info.levels.iter().flat_map(|l| ACCURACY.iter().map(move |a| format!("{a}[{l}]"))).collect();
        Ok(MetaregReport {
            varying: summary(fit, &varying),
            shared,
            contrasts: Some(pairwise_contrasts(fit, &fit.info.levels)?),
            covariate_curve: None,
        })
    }
}

pub fn run_analysis(
    d: &Dataset,
    cfg: &AnalysisConfig,
    observer: &(dyn Fn(AnalysisProgress) -> bool + Sync),
) -> Result<AnalysisResult, AnalysisError> {
    let priors = cfg.check(d)?;
    let ex = cfg.exclusions();
    let sc = &cfg.sampler;
    let single = |p: Progress| {
        observer(AnalysisProgress { stage: 0, stages: 1, chain: p.chain, iteration: p.iteration, total: p.total })
    };
    match &cfg.model {
        ModelSpec::Bivariate(_) => {
            let fit = fit_bivariate_with_progress(d, &priors, sc, &ex, &single)?;
            let report =
                BivariateReport { summary: bivariate_summary(&fit), hsroc: HsrocRecord::from_fit(&fit)?, weights: study_weights(&fit, d)? };
            Ok(AnalysisResult::Bivariate { fit: Box::new(fit), report })
        }
        ModelSpec::Metareg(m) => {
            let fit = fit_metareg_with_progress(d, m, &priors, sc, &ex, &single)?;
            let report = metareg_report(&fit, d)?;
            Ok(AnalysisResult::Metareg { fit: Box::new(fit), report })
        }
        ModelSpec::Subgroup(s) => {
            let kept = crate::data::exclude_studies(d, &ex)?;
            let levels = kept.levels(&s.covariate);
            let stages = levels.len().max(1);
            let staged = |level: &str, p: Progress| {
                let stage = levels.iter().position(|l| l == level).unwrap_or(0);
                observer(AnalysisProgress { stage, stages, chain: p.chain, iteration: p.iteration, total: p.total })
            };
            let groups = fit_subgroups_with_progress(d, s, &priors, sc, &ex, &staged)?;
            let summaries = groups.iter().filter_map(|(k, o)| o.fit().map(|f| (k.clone(), bivariate_summary(f)))).collect();
            Ok(AnalysisResult::Subgroup { groups, summaries })
        }
        ModelSpec::Tlcm(t) => {
            let mut fit = fit_tlcm_with_progress(d, t, &priors, sc, &ex, &single)?;
            let residuals = match correlation_residuals(&fit, d) {
                Ok(r) => Some(r),
                Err(e) => {
                    fit.warnings.push(format!("correlation residuals unavailable: {e}"));
                    None
                }
            };
            let report = TlcmReport { summary: tlcm_summary(&fit), residuals };
            Ok(AnalysisResult::Tlcm { fit: Box::new(fit), report })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StudyRecord;

    fn data() -> Dataset {
        let rows = [(53, 39, 5, 57), (20, 12, 4, 40), (33, 5, 9, 71), (11, 21, 1, 30), (45, 30, 2, 88)];
        let studies =
            rows.iter().enumerate().map(|(i, &(a, b, c, e))| StudyRecord::new(format!("s{i}"), 2000, a, b, c, e)).collect();
        Dataset::new(studies, Vec::new(), false)
    }

    #[test]
    fn config_json_shape() {
        let c = AnalysisConfig::from_json(
            r#"{"model":"tlcm","dependence":"dependent","sampler":{"chains":2,"seed":9},"exclude":["s1"]}"#,
        )
        .unwrap();
        assert!(matches!(c.model, ModelSpec::Tlcm(_)));
        assert_eq!(c.sampler.chains, 2);
        assert_eq!(c.sampler.warmup, 1000);
        assert!(AnalysisConfig::from_json(r#"{"model":"bivariate","bogus":1}"#).is_err());
        let back = AnalysisConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn check_rejects_bad_requests() {
        let d = data();
        let bad = AnalysisConfig::from_json(r#"{"model":"bivariate","sampler":{"chains":0}}"#).unwrap();
        assert!(matches!(bad.check(&d), Err(AnalysisError::Config(_))));
        let bad = AnalysisConfig::from_json(r#"{"model":"metareg","covariate":"nope"}"#).unwrap();
        assert!(matches!(bad.check(&d), Err(AnalysisError::Config(_))));
        let bad = AnalysisConfig::from_json(r#"{"model":"bivariate","exclude":["zz"]}"#).unwrap();
        assert!(matches!(bad.check(&d), Err(AnalysisError::Config(_))));
    }

    #[test]
    fn cancellation_surfaces() {
        let c = AnalysisConfig::from_json(r#"{"model":"bivariate","sampler":{"warmup":200,"samples":200}}"#).unwrap();
        assert_eq!(run_analysis(&data(), &c, &|_| false), Err(AnalysisError::Cancelled));
    }

    #[test]
    fn bivariate_result_is_deterministic() {
        let c = AnalysisConfig::from_json(r#"{"model":"bivariate","sampler":{"warmup":200,"samples":200,"seed":3}}"#)
            .unwrap();
        let a = run_analysis(&data(), &c, &|_| true).unwrap();
        let b = run_analysis(&data(), &c, &|_| true).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let AnalysisResult::Bivariate { report, .. } = &a else { panic!("wrong variant") };
        assert_eq!(report.summary[0].name, "se");
        let back: AnalysisResult = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back.to_json(), a.to_json());
    }
}
