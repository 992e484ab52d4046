//! Meta-regression on one covariate and per-level subgroup analysis.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::bivariate::{
    accuracy_names, echo, fit_intercept_model, push_accuracy, push_shared, push_studies, require_studies, sample,
    shared_names, study_names, BivariateDensity,
};
use super::{MetaregConfig, ModelError, ModelSpec, SubgroupConfig};
use crate::data::{exclude_studies, CovariateKind, Dataset, StudyRecord};
use crate::fit::{FitInfo, FitResult};
use crate::math::{inv_logit, mean};
use crate::priors::{PriorSpec, Quantiles};
use crate::sampler::{Progress, SamplerConfig};

fn covariate_kind(d: &Dataset, name: &str, requested: Option<CovariateKind>) -> Result<CovariateKind, ModelError> {
    let spec = d.covariate(name).ok_or_else(|| ModelError::BadCovariate(format!("unknown covariate {name}")))?;
    Ok(requested.unwrap_or(spec.kind))
}

fn numeric_values(d: &Dataset, name: &str) -> Result<Vec<f64>, ModelError> {
    d.studies()
        .iter()
        .map(|s| {
            s.covariates
                .get(name)
                .and_then(|v| v.as_f64())
                .filter(|x| x.is_finite())
                .ok_or_else(|| ModelError::BadCovariate(format!("{name} is not numeric for study {}", s.study_id)))
        })
        .collect()
}

fn label_of(s: &StudyRecord, name: &str) -> Result<String, ModelError> {
    s.covariates
        .get(name)
        .map(|v| v.label())
        .ok_or_else(|| ModelError::BadCovariate(format!("{name} missing for study {}", s.study_id)))
}

/// Levels in display order, numeric when every label parses as a number.
fn levels_of(d: &Dataset, name: &str) -> Result<Vec<String>, ModelError> {
    let labels: BTreeSet<String> = d.studies().iter().map(|s| label_of(s, name)).collect::<Result<_, _>>()?;
    let mut out: Vec<String> = labels.into_iter().collect();
    if out.iter().all(|l| l.parse::<f64>().is_ok()) {
        out.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    Ok(out)
}

pub fn fit_metareg(
    d: &Dataset,
    m: &MetaregConfig,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    exclusions: &BTreeSet<String>,
) -> Result<FitResult, ModelError> {
    fit_metareg_with_progress(d, m, priors, cfg, exclusions, &|_| true)
}

pub fn fit_metareg_with_progress(
    d: &Dataset,
    m: &MetaregConfig,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    exclusions: &BTreeSet<String>,
    observer: &(dyn Fn(Progress) -> bool + Sync),
) -> Result<FitResult, ModelError> {
    priors.validate()?;
    let data = exclude_studies(d, exclusions)?;
    require_studies(&data, 2)?;
    let kind = covariate_kind(&data, &m.covariate, m.kind)?;
    let config = echo(d, ModelSpec::Metareg(m.clone()), priors, cfg, exclusions);
    let study_ids: Vec<String> = data.studies().iter().map(|s| s.study_id.clone()).collect();

    let density = metareg_density(&data, m, priors)?;
    let raw = sample(&density, cfg, observer)?;
    match kind {
        CovariateKind::Continuous => {
            let (center, report_at) = continuous_anchor(&data, m)?;
            let mut names: Vec<String> =
                ["intercept_se", "slope_se", "intercept_sp", "slope_sp"].map(String::from).to_vec();
            names.extend(accuracy_names(""));
            names.extend(shared_names());
            names.extend(study_names(&data));
            let dx = report_at - center;
            let derive = |theta: &[f64], out: &mut Vec<f64>| {
                let pt = density.point(theta);
                out.extend([pt.beta_se[0], pt.beta_se[1], pt.beta_sp[0], pt.beta_sp[1]]);
                push_accuracy(out, pt.beta_se[0] + pt.beta_se[1] * dx, pt.beta_sp[0] + pt.beta_sp[1] * dx);
                push_shared(out, &pt);
                push_studies(out, &pt);
            };
            let info = FitInfo {
                study_ids,
                covariate: Some(m.covariate.clone()),
                center: Some(center),
                report_at: Some(report_at),
                ..Default::default()
            };
            Ok(FitResult::assemble(&raw, &names, derive, config, info))
        }
        CovariateKind::Categorical => {
            let levels = levels_of(&data, &m.covariate)?;
            let mut names = Vec::new();
            for l in &levels {
                names.extend(accuracy_names(&format!("[{l}]")));
            }
            names.extend(shared_names());
            names.extend(study_names(&data));
            let derive = |theta: &[f64], out: &mut Vec<f64>| {
                let pt = density.point(theta);
                for j in 0..pt.beta_se.len() {
                    push_accuracy(out, pt.beta_se[j], pt.beta_sp[j]);
                }
                push_shared(out, &pt);
                push_studies(out, &pt);
            };
            let info = FitInfo { study_ids, covariate: Some(m.covariate.clone()), levels, ..Default::default() };
            Ok(FitResult::assemble(&raw, &names, derive, config, info))
        }
    }
}

/// Centering value and reporting point of a continuous covariate.
fn continuous_anchor(d: &Dataset, m: &MetaregConfig) -> Result<(f64, f64), ModelError> {
    let xs = numeric_values(d, &m.covariate)?;
    let center = m.center.unwrap_or_else(|| mean(&xs));
    Ok((center, m.report_at.unwrap_or(center)))
}

/// Log-posterior of the meta-regression on `d` (exclusions already applied).
/// Continuous covariates enter centered with intercept and slope per
/// accuracy; categorical ones as one mean per level.
pub fn metareg_density(d: &Dataset, m: &MetaregConfig, priors: &PriorSpec) -> Result<BivariateDensity, ModelError> {
    let bp = &priors.bivariate;
    let mp = &priors.metareg;
    match covariate_kind(d, &m.covariate, m.kind)? {
        CovariateKind::Continuous => {
            let xs = numeric_values(d, &m.covariate)?;
            let distinct: BTreeSet<u64> = xs.iter().map(|x| x.to_bits()).collect();
            if distinct.len() < 3 {
                return Err(ModelError::DegenerateCovariate(format!(
                    "{} has {} distinct values, need 3",
                    m.covariate,
                    distinct.len()
                )));
            }
            let (center, _) = continuous_anchor(d, m)?;
            let design = xs.iter().map(|x| vec![1.0, x - center]).collect();
            Ok(BivariateDensity::with_design(
                d,
                design,
                vec!["intercept".into(), "slope".into()],
                vec![mp.intercept, mp.coefficient],
                vec![mp.intercept, mp.coefficient],
                bp,
            ))
        }
        CovariateKind::Categorical => {
            let levels = levels_of(d, &m.covariate)?;
            if levels.len() < 2 {
                return Err(ModelError::DegenerateCovariate(format!("{} has a single level", m.covariate)));
            }
            let design = d
                .studies()
                .iter()
                .map(|s| {
                    let l = label_of(s, &m.covariate)?;
                    Ok(levels.iter().map(|x| if *x == l { 1.0 } else { 0.0 }).collect())
                })
                .collect::<Result<Vec<Vec<f64>>, ModelError>>()?;
            Ok(BivariateDensity::with_design(
                d,
                design,
                levels.clone(),
                vec![mp.level_mean; levels.len()],
                vec![mp.level_mean; levels.len()],
                bp,
            ))
        }
    }
}

/// Differences and ratios of pooled accuracies between two levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub level_a: String,
    pub level_b: String,
    /// `Se[a] - Se[b]`.
    pub diff_se: Quantiles,
    pub diff_sp: Quantiles,
    /// `Se[a] / Se[b]`.
    pub ratio_se: Quantiles,
    pub ratio_sp: Quantiles,
}

impl Contrast {
    pub fn diffs_contain_zero(&self) -> bool {
        [self.diff_se, self.diff_sp].iter().all(|q| q.lower <= 0.0 && 0.0 <= q.upper)
    }

    pub fn ratios_contain_one(&self) -> bool {
        [self.ratio_se, self.ratio_sp].iter().all(|q| q.lower <= 1.0 && 1.0 <= q.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastTable {
    pub rows: Vec<Contrast>,
    /// Difference intervals (Se and Sp counted separately) containing 0.
    pub n_diff_containing_zero: usize,
    pub n_ratio_containing_one: usize,
    pub n_intervals: usize,
}

fn level_draws(fit: &FitResult, name: &str, level: &str) -> Result<Vec<f64>, ModelError> {
    fit.draws(&format!("{name}[{level}]"))
        .ok_or_else(|| ModelError::BadCovariate(format!("no level {level} in this fit")))
}

/// Per-draw contrast of level `a` against level `b`.
pub fn contrast(fit: &FitResult, a: &str, b: &str) -> Result<Contrast, ModelError> {
    if fit.info.levels.is_empty() {
        return Err(ModelError::NotCategorical);
    }
    let (se_a, se_b) = (level_draws(fit, "se", a)?, level_draws(fit, "se", b)?);
    let (sp_a, sp_b) = (level_draws(fit, "sp", a)?, level_draws(fit, "sp", b)?);
    let op = |x: &[f64], y: &[f64], f: fn(f64, f64) -> f64| -> Quantiles {
        let mut v: Vec<f64> = x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect();
        Quantiles::of(&mut v)
    };
    Ok(Contrast {
        level_a: a.to_string(),
        level_b: b.to_string(),
        diff_se: op(&se_a, &se_b, |p, q| p - q),
        diff_sp: op(&sp_a, &sp_b, |p, q| p - q),
        ratio_se: op(&se_a, &se_b, |p, q| p / q),
        ratio_sp: op(&sp_a, &sp_b, |p, q| p / q),
    })
}

/// Every pair `(levels[i], levels[j])` with `i < j`.
pub fn pairwise_contrasts(fit: &FitResult, levels: &[String]) -> Result<ContrastTable, ModelError> {
    if fit.info.levels.is_empty() {
        return Err(ModelError::NotCategorical);
    }
    let mut rows = Vec::new();
    for i in 0..levels.len() {
        for j in i + 1..levels.len() {
            rows.push(contrast(fit, &levels[i], &levels[j])?);
        }
    }
    let count = |f: &dyn Fn(&Quantiles) -> bool, pick: &dyn Fn(&Contrast) -> [Quantiles; 2]| {
        rows.iter().flat_map(|r| pick(r)).filter(|q| f(q)).count()
    };
    let n_diff_containing_zero = count(&|q| q.lower <= 0.0 && 0.0 <= q.upper, &|r| [r.diff_se, r.diff_sp]);
    let n_ratio_containing_one = count(&|q| q.lower <= 1.0 && 1.0 <= q.upper, &|r| [r.ratio_se, r.ratio_sp]);
    let n_intervals = rows.len() * 2;
    Ok(ContrastTable { rows, n_diff_containing_zero, n_ratio_containing_one, n_intervals })
}

/// Pooled accuracy as a function of a continuous covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateCurvePoint {
    pub x: f64,
    pub se: Quantiles,
    pub sp: Quantiles,
}

pub fn accuracy_vs_covariate(fit: &FitResult, grid: &[f64]) -> Option<Vec<CovariateCurvePoint>> {
    let center = fit.info.center?;
    let (a_se, b_se) = (fit.draws("intercept_se")?, fit.draws("slope_se")?);
    let (a_sp, b_sp) = (fit.draws("intercept_sp")?, fit.draws("slope_sp")?);
    Some(
        grid.iter()
            .map(|&x| {
                let dx = x - center;
                let mut se: Vec<f64> = a_se.iter().zip(&b_se).map(|(a, b)| inv_logit(a + b * dx)).collect();
                let mut sp: Vec<f64> = a_sp.iter().zip(&b_sp).map(|(a, b)| inv_logit(a + b * dx)).collect();
                CovariateCurvePoint { x, se: Quantiles::of(&mut se), sp: Quantiles::of(&mut sp) }
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SubgroupOutcome {
    Fitted { fit: Box<FitResult> },
    Skipped { n_studies: usize, reason: String },
}

impl SubgroupOutcome {
    pub fn fit(&self) -> Option<&FitResult> {
        match self {
            SubgroupOutcome::Fitted { fit } => Some(fit),
            SubgroupOutcome::Skipped { .. } => None,
        }
    }
}

/// Separate bivariate fits, one per covariate level, each with its own
/// between-study covariance. The covariate is grouped by its labels whatever
/// its declared kind.
pub fn fit_subgroups(
    d: &Dataset,
    sg: &SubgroupConfig,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    exclusions: &BTreeSet<String>,
) -> Result<BTreeMap<String, SubgroupOutcome>, ModelError> {
    fit_subgroups_with_progress(d, sg, priors, cfg, exclusions, &|_, _| true)
}

pub fn fit_subgroups_with_progress(
    d: &Dataset,
    sg: &SubgroupConfig,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    exclusions: &BTreeSet<String>,
    observer: &(dyn Fn(&str, Progress) -> bool + Sync),
) -> Result<BTreeMap<String, SubgroupOutcome>, ModelError> {
    priors.validate()?;
    let data = exclude_studies(d, exclusions)?;
    covariate_kind(&data, &sg.covariate, None)?;
    let min = sg.min_studies.max(2);
    let levels = levels_of(&data, &sg.covariate)?;
    let mut out = BTreeMap::new();
    for level in levels {
        let others: BTreeSet<String> = data
            .studies()
            .iter()
            .filter(|s| label_of(s, &sg.covariate).map(|l| l != level).unwrap_or(true))
            .map(|s| s.study_id.clone())
            .collect();
        let group = exclude_studies(&data, &others)?;
        if group.len() < min {
            out.insert(
                level,
                SubgroupOutcome::Skipped {
                    n_studies: group.len(),
                    reason: format!("{} study(ies), at least {min} required", group.len()),
                },
            );
            continue;
        }
        let config = echo(d, ModelSpec::Subgroup(sg.clone()), priors, cfg, exclusions);
        let mut fit = fit_intercept_model(&group, priors, cfg, config, &|p| observer(&level, p))?;
        fit.info.covariate = Some(sg.covariate.clone());
        fit.info.levels = vec![level.clone()];
        out.insert(level, SubgroupOutcome::Fitted { fit: Box::new(fit) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateSpec, CovariateValue};
    use crate::models::bivariate::BivariateDensity;
    use crate::sampler::{check_gradient, ModelDensity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn with_covariates(rows: &[(u64, u64, u64, u64, &str, f64)]) -> Dataset {
        let studies = rows
            .iter()
            .enumerate()
            .map(|(i, &(tp, fp, fn_, tn, g, x))| {
                let mut s = StudyRecord::new(format!("S{}", i + 1), 2000, tp, fp, fn_, tn);
                s.covariates.insert("group".into(), CovariateValue::Text(g.into()));
                s.covariates.insert("x".into(), CovariateValue::Number(x));
                s
            })
            .collect();
        let schema = vec![
            CovariateSpec { name: "group".into(), kind: CovariateKind::Categorical },
            CovariateSpec { name: "x".into(), kind: CovariateKind::Continuous },
        ];
        Dataset::new(studies, schema, false)
    }

    fn demo() -> Dataset {
        with_covariates(&[
            (40, 20, 5, 60, "a", 1.0),
            (30, 10, 6, 50, "a", 2.0),
            (25, 15, 3, 45, "b", 3.5),
            (50, 30, 8, 70, "b", 4.0),
            (22, 11, 2, 39, "c", 5.5),
            (35, 25, 4, 66, "a", 2.5),
        ])
    }

    #[test]
    fn regression_gradients() {
        let d = demo();
        let bp = PriorSpec::default().bivariate;
        let design = d.studies().iter().map(|s| vec![1.0, s.covariates["x"].as_f64().unwrap() - 3.0]).collect();
        let pr = PriorSpec::default().metareg;
        let m = BivariateDensity::with_design(
            &d,
            design,
            vec!["i".into(), "s".into()],
            vec![pr.intercept, pr.coefficient],
            vec![pr.intercept, pr.coefficient],
            &bp,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let theta: Vec<f64> = (0..m.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            assert!(check_gradient(&m, &theta, 1e-6).unwrap() < 1e-5);
        }
    }

    #[test]
    fn zero_covariate_reduces_to_plain_model() {
        let d = demo();
        let bp = PriorSpec::default().bivariate;
        let pr = PriorSpec::default().metareg;
        let design = vec![vec![1.0, 0.0]; d.len()];
        let reg = BivariateDensity::with_design(
            &d,
            design,
            vec!["i".into(), "s".into()],
            vec![bp.mu_se, pr.coefficient],
            vec![bp.mu_sp, pr.coefficient],
            &bp,
        );
        let plain = BivariateDensity::new(&d, &bp);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta: Vec<f64> = (0..plain.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (b_se, b_sp) = (0.7, -0.3);
        let mut t2 = vec![theta[0], b_se, theta[1], b_sp];
        t2.extend_from_slice(&theta[2..]);
        let mut g1 = vec![0.0; plain.dim()];
        let mut g2 = vec![0.0; reg.dim()];
        let a = plain.log_density(&theta, &mut g1);
        let b = reg.log_density(&t2, &mut g2);
        assert!((b - a - pr.coefficient.lpdf(b_se) - pr.coefficient.lpdf(b_sp)).abs() < 1e-10);
    }

    #[test]
    fn categorical_fit_and_contrasts() {
        let d = demo();
        let cfg = SamplerConfig { warmup: 400, samples: 400, seed: 5, ..Default::default() };
        let m = MetaregConfig { covariate: "group".into(), kind: None, center: None, report_at: None };
        let fit = fit_metareg(&d, &m, &PriorSpec::default(), &cfg, &BTreeSet::new()).unwrap();
        assert_eq!(fit.info.levels, vec!["a", "b", "c"]);
        let same = contrast(&fit, "b", "b").unwrap();
        assert_eq!((same.diff_se.median, same.diff_se.lower, same.diff_se.upper), (0.0, 0.0, 0.0));
        assert_eq!((same.ratio_sp.lower, same.ratio_sp.upper), (1.0, 1.0));
        let table = pairwise_contrasts(&fit, &fit.info.levels).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.n_intervals, 6);
        let plain = crate::models::fit_bivariate(&d, &PriorSpec::default(), &cfg, &BTreeSet::new()).unwrap();
        assert_eq!(pairwise_contrasts(&plain, &[]).unwrap_err(), ModelError::NotCategorical);
    }

    #[test]
    fn continuous_fit_reports_at_requested_value() {
        let d = demo();
        let cfg = SamplerConfig { warmup: 400, samples: 400, seed: 6, ..Default::default() };
        let m = MetaregConfig { covariate: "x".into(), kind: None, center: Some(3.0), report_at: Some(5.0) };
        let fit = fit_metareg(&d, &m, &PriorSpec::default(), &cfg, &BTreeSet::new()).unwrap();
        let (a, b, mu) = (fit.draws("intercept_se").unwrap(), fit.draws("slope_se").unwrap(), fit.draws("mu_se").unwrap());
        for k in 0..a.len() {
            assert!((mu[k] - (a[k] + 2.0 * b[k])).abs() < 1e-12);
        }
        let curve = accuracy_vs_covariate(&fit, &[1.0, 3.0, 5.0]).unwrap();
        assert_eq!(curve.len(), 3);
        assert!(curve.iter().all(|p| p.se.lower <= p.se.median && p.se.median <= p.se.upper));
    }

    #[test]
    fn degenerate_covariates_rejected() {
        let d = with_covariates(&[(10, 5, 2, 20, "a", 1.0), (12, 4, 3, 25, "a", 1.0), (9, 6, 1, 18, "a", 2.0)]);
        let cfg = SamplerConfig { warmup: 50, samples: 50, ..Default::default() };
        let cat = MetaregConfig { covariate: "group".into(), kind: None, center: None, report_at: None };
        let cont = MetaregConfig { covariate: "x".into(), ..cat.clone() };
        let p = PriorSpec::default();
        let none = BTreeSet::new();
        assert!(matches!(fit_metareg(&d, &cat, &p, &cfg, &none), Err(ModelError::DegenerateCovariate(_))));
        assert!(matches!(fit_metareg(&d, &cont, &p, &cfg, &none), Err(ModelError::DegenerateCovariate(_))));
        let bad = MetaregConfig { covariate: "nope".into(), ..cat };
        assert!(matches!(fit_metareg(&d, &bad, &p, &cfg, &none), Err(ModelError::BadCovariate(_))));
    }

    #[test]
    fn subgroups_skip_small_levels() {
        let d = demo();
        let cfg = SamplerConfig { warmup: 300, samples: 300, seed: 2, ..Default::default() };
        let sg = SubgroupConfig { covariate: "group".into(), min_studies: 2 };
        let out = fit_subgroups(&d, &sg, &PriorSpec::default(), &cfg, &BTreeSet::new()).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out["a"].fit().is_some());
        assert_eq!(out["a"].fit().unwrap().info.study_ids.len(), 3);
        assert!(matches!(out["c"], SubgroupOutcome::Skipped { n_studies: 1, .. }));
    }
}
