//! Summary ROC scenes: study points, pooled estimates, credible and
//! prediction regions and the summary curve, in renderer-neutral form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ellipse::{to_roc, Ellipse};
use super::weights::{study_weights, WeightTable};
use super::OutputError;
use crate::data::{study_accuracy, Dataset, QuadasAssessment, Rating, StudyRecord};
use crate::fit::FitResult;
use crate::math::{inv_logit, logit, quantile};
use crate::models::{hsroc_from_bivariate, ModelSpec, SubgroupOutcome};

pub const CURVE_POINTS: usize = 200;
pub const X_LABEL: &str = "1 \u{2212} Specificity";
pub const Y_LABEL: &str = "Sensitivity";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneOptions {
    pub show_curve: bool,
    pub show_prediction: bool,
    /// Size points by percentage weight instead of sample size.
    pub weight_sizing: bool,
    pub quadas_overlay: bool,
    pub level: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions { show_curve: true, show_prediction: true, weight_sizing: false, quadas_overlay: false, level: 0.95 }
    }
}

/// QUADAS-2 encoding of one study: fill color from the overall risk of
/// bias, stroke dash from the overall applicability concern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadasGlyph {
    pub ratings: QuadasAssessment,
    pub overall_risk_of_bias: Rating,
    pub overall_applicability: Rating,
    pub color: String,
    pub stroke: String,
}

pub fn rating_color(r: Rating) -> &'static str {
    match r {
        Rating::Low => "#1b9e77",
        Rating::High => "#d95f02",
        Rating::Unclear => "#7570b3",
    }
}

pub fn rating_stroke(r: Rating) -> &'static str {
    match r {
        Rating::Low => "solid",
        Rating::High => "dashed",
        Rating::Unclear => "dotted",
    }
}

impl QuadasGlyph {
    pub fn new(q: &QuadasAssessment) -> QuadasGlyph {
        let (rob, app) = (q.overall_risk_of_bias(), q.overall_applicability());
        QuadasGlyph {
            ratings: *q,
            overall_risk_of_bias: rob,
            overall_applicability: app,
            color: rating_color(rob).into(),
            stroke: rating_stroke(app).into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub label: String,
    pub color: String,
    pub stroke: String,
}

/// One study in the scene with everything a click popup needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint {
    pub study_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// `1 - Sp`.
    pub x: f64,
    /// `Se`.
    pub y: f64,
    /// Relative size in `(0, 1]`.
    pub size: f64,
    pub n: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub se: f64,
    pub sp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_se: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_sp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadas: Option<QuadasGlyph>,
}

/// Pooled estimate and regions for one fit, level or subgroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRegion {
    pub label: String,
    pub summary: [f64; 2],
    pub credible: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrocScene {
    pub points: Vec<ScenePoint>,
    pub regions: Vec<SummaryRegion>,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub x_label: String,
    pub y_label: String,
    pub level: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub legend: Vec<LegendEntry>,
}

/// Posterior draws behind one region, on the logit scale.
struct Source {
    label: String,
    mu_se: Vec<f64>,
    mu_sp: Vec<f64>,
    /// `(sigma_se, sigma_sp, rho)` draws when the effects are random.
    spread: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

fn need(fit: &FitResult, name: &str) -> Result<Vec<f64>, OutputError> {
    fit.draws(name).ok_or_else(|| OutputError::MissingParameter(name.to_string()))
}

fn spread(fit: &FitResult, prefix: &str) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let s1 = fit.draws(&format!("{prefix}sigma_se"))?;
    let s2 = fit.draws(&format!("{prefix}sigma_sp"))?;
    let rho = fit.draws(&format!("{prefix}rho")).unwrap_or_else(|| vec![0.0; s1.len()]);
    Some((s1, s2, rho))
}

fn sources(fit: &FitResult, label: &str) -> Result<Vec<Source>, OutputError> {
    match &fit.config.model {
        ModelSpec::Tlcm(_) => Ok(vec![Source {
            label: label.to_string(),
            mu_se: need(fit, "index_se")?.into_iter().map(logit).collect(),
            mu_sp: need(fit, "index_sp")?.into_iter().map(logit).collect(),
            spread: spread(fit, "index_"),
        }]),
        ModelSpec::Metareg(_) if !fit.info.levels.is_empty() => fit
            .info
            .levels
            .iter()
            .map(|lv| {
                Ok(Source {
                    label: lv.clone(),
                    mu_se: need(fit, &format!("mu_se[{lv}]"))?,
                    mu_sp: need(fit, &format!("mu_sp[{lv}]"))?,
                    spread: spread(fit, ""),
                })
            })
            .collect(),
        _ => Ok(vec![Source {
            label: label.to_string(),
            mu_se: need(fit, "mu_se")?,
            mu_sp: need(fit, "mu_sp")?,
            spread: spread(fit, ""),
        }]),
    }
}

fn median_pair(a: &[f64], b: &[f64]) -> [f64; 2] {
    to_roc([quantile(a, 0.5), quantile(b, 0.5)])
}

/// Pointwise posterior median of the summary curve over `[lo, hi]` in FPR.
fn summary_curve(src: &Source, lo: f64, hi: f64) -> Option<Vec<[f64; 2]>> {
    let (s1, s2, rho) = src.spread.as_ref()?;
    let params: Vec<_> = (0..src.mu_se.len())
        .filter_map(|k| hsroc_from_bivariate(src.mu_se[k], src.mu_sp[k], s1[k], s2[k], rho[k].clamp(-1.0, 1.0)).ok())
        .collect();
    if params.is_empty() {
        return None;
    }
    let mut buf = vec![0.0; params.len()];
    Some(
        (0..CURVE_POINTS)
            .map(|i| {
                let fpr = lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64;
                for (b, h) in buf.iter_mut().zip(&params) {
                    *b = h.curve_logit_se(logit(fpr));
                }
                [fpr, inv_logit(quantile(&buf, 0.5))]
            })
            .collect(),
    )
}

fn region(src: &Source, opts: &SceneOptions, fpr_range: (f64, f64)) -> Result<SummaryRegion, OutputError> {
    let cloud: Vec<(f64, f64)> = src.mu_se.iter().copied().zip(src.mu_sp.iter().copied()).collect();
    let credible = Ellipse::from_cloud(&cloud, opts.level)?;
    let prediction = match (&src.spread, opts.show_prediction) {
        (Some((s1, s2, rho)), true) => {
            let n = s1.len() as f64;
            let e11 = s1.iter().map(|s| s * s).sum::<f64>() / n;
            let e22 = s2.iter().map(|s| s * s).sum::<f64>() / n;
            let e12 = (0..s1.len()).map(|k| rho[k] * s1[k] * s2[k]).sum::<f64>() / n;
            Some(credible.widened(&[[e11, e12], [e12, e22]]).roc_polygon())
        }
        _ => None,
    };
    let curve = if opts.show_curve { summary_curve(src, fpr_range.0, fpr_range.1) } else { None };
    Ok(SummaryRegion {
        label: src.label.clone(),
        summary: median_pair(&src.mu_se, &src.mu_sp),
        credible: credible.roc_polygon(),
        prediction,
        curve,
    })
}

/// Observed FPR range of `points`, kept inside `[0.01, 0.99]`.
fn fpr_range(points: &[ScenePoint]) -> (f64, f64) {
    let lo = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).clamp(0.01, 0.99);
    let hi = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).clamp(0.01, 0.99);
    if hi - lo < 0.05 {
        ((lo - 0.025).max(0.01), (hi + 0.025).min(0.99))
    } else {
        (lo, hi)
    }
}

fn study_point(
    s: &StudyRecord,
    fit: &FitResult,
    group: Option<&str>,
    weights: Option<&WeightTable>,
    opts: &SceneOptions,
) -> Result<ScenePoint, OutputError> {
    let acc = study_accuracy(s)?;
    let (x, y) = match fit.config.model {
        ModelSpec::Tlcm(_) => {
            let se = need(fit, &format!("study_index_se[{}]", s.study_id))?;
            let sp = need(fit, &format!("study_index_sp[{}]", s.study_id))?;
            (1.0 - quantile(&sp, 0.5), quantile(&se, 0.5))
        }
        _ => (1.0 - acc.sp_hat, acc.se_hat),
    };
    let w = weights.and_then(|w| w.get(&s.study_id));
    Ok(ScenePoint {
        study_id: s.study_id.clone(),
        group: group.map(String::from),
        x,
        y,
        size: 0.0,
        n: s.total(),
        tp: s.tp,
        fp: s.fp,
        fn_: s.fn_,
        tn: s.tn,
        se: acc.se_hat,
        sp: acc.sp_hat,
        weight_se: w.map(|w| w.weight_se),
        weight_sp: w.map(|w| w.weight_sp),
        quadas: if opts.quadas_overlay { s.quadas.as_ref().map(QuadasGlyph::new) } else { None },
    })
}

fn legend() -> Vec<LegendEntry> {
    let mut out = Vec::new();
    for r in [Rating::Low, Rating::High, Rating::Unclear] {
        out.push(LegendEntry {
            label: format!("risk of bias: {}", r.as_str()),
            color: rating_color(r).into(),
            stroke: "solid".into(),
        });
    }
    for r in [Rating::Low, Rating::High, Rating::Unclear] {
        out.push(LegendEntry {
            label: format!("applicability concern: {}", r.as_str()),
            color: "#ffffff".into(),
            stroke: rating_stroke(r).into(),
        });
    }
    out
}

/// Scene for several labelled fits sharing one dataset (subgroups); a single
/// fit is the one-element case.
pub fn sroc_scene_groups(groups: &[(&str, &FitResult)], d: &Dataset, opts: &SceneOptions) -> Result<SrocScene, OutputError> {
    if opts.quadas_overlay && !d.has_quadas() {
        return Err(OutputError::MissingQuadas);
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(OutputError::BadLevel(opts.level));
    }
    let grouped = groups.len() > 1;
    let mut points = Vec::new();
    let mut regions = Vec::new();
    for (label, fit) in groups {
        let weights = if matches!(fit.config.model, ModelSpec::Tlcm(_)) { None } else { study_weights(fit, d).ok() };
        let mut pts = Vec::with_capacity(fit.info.study_ids.len());
        for id in &fit.info.study_ids {
            let s = d.study(id).ok_or_else(|| OutputError::UnknownStudy(id.clone()))?;
            pts.push(study_point(s, fit, grouped.then_some(*label), weights.as_ref(), opts)?);
        }
        let range = fpr_range(&pts);
        for src in sources(fit, label)? {
            regions.push(region(&src, opts, range)?);
        }
        points.extend(pts);
    }
    let raw: Vec<f64> = points
        .iter()
        .map(|p| match (opts.weight_sizing, p.weight_se, p.weight_sp) {
            (true, Some(a), Some(b)) => 0.5 * (a + b),
            _ => p.n as f64,
        })
        .collect();
    let max = raw.iter().copied().fold(0.0, f64::max);
    for (p, r) in points.iter_mut().zip(raw) {
        p.size = if max > 0.0 { r / max } else { 1.0 };
    }
    Ok(SrocScene {
        points,
        regions,
        x_range: [0.0, 1.0],
        y_range: [0.0, 1.0],
        x_label: X_LABEL.into(),
        y_label: Y_LABEL.into(),
        level: opts.level,
        legend: if opts.quadas_overlay { legend() } else { Vec::new() },
    })
}

pub fn sroc_scene(fit: &FitResult, d: &Dataset, opts: &SceneOptions) -> Result<SrocScene, OutputError> {
    sroc_scene_groups(&[("", fit)], d, opts)
}

/// Scene for subgroup fits; skipped groups contribute nothing.
pub fn subgroup_scene(
    outcomes: &BTreeMap<String, SubgroupOutcome>,
    d: &Dataset,
    opts: &SceneOptions,
) -> Result<SrocScene, OutputError> {
    let groups: Vec<(&str, &FitResult)> =
        outcomes.iter().filter_map(|(k, o)| o.fit().map(|f| (k.as_str(), f))).collect();
    if groups.is_empty() {
        return Err(OutputError::NothingToPlot);
    }
    sroc_scene_groups(&groups, d, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::HsrocParams;

    #[test]
    fn symmetric_curve_when_shape_is_zero() {
        let h = HsrocParams { lambda: 2.0, theta: 0.0, beta: 0.0, var_theta: 0.1, var_alpha: 0.1 };
        for i in 1..50 {
            let fpr = i as f64 / 50.0;
            let se = inv_logit(h.curve_logit_se(logit(fpr)));
            // Reflect (FPR, Se) across the Se = Sp line: (1 - Se, 1 - FPR).
            let se_reflected = inv_logit(h.curve_logit_se(logit(1.0 - se)));
            assert!((se_reflected - (1.0 - fpr)).abs() < 1e-12);
        }
    }

    #[test]
    fn range_is_clamped_and_widened() {
        let p = |x: f64| ScenePoint {
            study_id: "a".into(),
            group: None,
            x,
            y: 0.5,
            size: 1.0,
            n: 1,
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0,
            se: 0.5,
            sp: 0.5,
            weight_se: None,
            weight_sp: None,
            quadas: None,
        };
        assert_eq!(fpr_range(&[p(0.0), p(1.0)]), (0.01, 0.99));
        let (lo, hi) = fpr_range(&[p(0.3)]);
        assert!(lo < 0.3 && hi > 0.3);
    }
}
