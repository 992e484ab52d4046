//! Hierarchical summary ROC parameters implied by bivariate estimates.

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsrocParams {
    /// Accuracy.
    pub lambda: f64,
    /// Threshold.
    pub theta: f64,
    /// Shape.
    pub beta: f64,
    pub var_theta: f64,
    pub var_alpha: f64,
}

impl HsrocParams {
    /// Logit sensitivity on the summary curve at the given logit false
    /// positive rate.
    pub fn curve_logit_se(&self, logit_fpr: f64) -> f64 {
        self.lambda * (-self.beta / 2.0).exp() + (-self.beta).exp() * logit_fpr
    }
}

/// `mu_se`, `mu_sp` are pooled logit accuracies; `sigma_*` the between-study
/// SDs and `rho` their correlation.
pub fn hsroc_from_bivariate(
    mu_se: f64,
    mu_sp: f64,
    sigma_se: f64,
    sigma_sp: f64,
    rho: f64,
) -> Result<HsrocParams, ModelError> {
    if !(sigma_se > 0.0 && sigma_sp > 0.0 && rho.abs() <= 1.0) || !sigma_se.is_finite() || !sigma_sp.is_finite() {
        return Err(ModelError::BadSigma);
    }
    let ratio = sigma_sp / sigma_se;
    let cov = rho * sigma_se * sigma_sp;
    let prod = sigma_se * sigma_sp;
    Ok(HsrocParams {
        lambda: ratio.sqrt() * mu_se + ratio.recip().sqrt() * mu_sp,
        theta: 0.5 * (ratio.sqrt() * mu_se - ratio.recip().sqrt() * mu_sp),
        beta: ratio.ln(),
        var_theta: (0.5 * (prod - cov)).max(0.0),
        var_alpha: (2.0 * (prod + cov)).max(0.0),
    })
}
