//! Statistical models: the bivariate random-effects model with its
//! meta-regression and subgroup variants, and the latent class model.

pub mod bivariate;
pub mod hsroc;
pub mod metareg;
pub mod tlcm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CovariateKind, DataError};
use crate::priors::PriorError;
use crate::sampler::SamplerError;

pub use bivariate::{fit_bivariate, predictive_draws, BivariateDensity};
pub use hsroc::{hsroc_from_bivariate, HsrocParams};
pub use metareg::{fit_metareg, fit_subgroups, pairwise_contrasts, Contrast, SubgroupOutcome};
pub use tlcm::{
    cell_probabilities, correlation_residuals, covariance_bounds, fit_tlcm, phi_coefficient, CorrelationResidual,
    TlcmDensity,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("at least {needed} studies are required, {got} remain")]
    TooFewStudies { needed: usize, got: usize },
    #[error("bad covariate: {0}")]
    BadCovariate(String),
    #[error("degenerate covariate: {0}")]
    DegenerateCovariate(String),
    #[error("contrasts need a categorical meta-regression fit")]
    NotCategorical,
    #[error("study {0} has no reference-test type")]
    MissingRefType(String),
    #[error("between-study SDs must be > 0 and |rho| < 1")]
    BadSigma,
    #[error("probability {0} outside (0, 1)")]
    OutOfDomain(f64),
    #[error("covariance {value} outside [{lo}, {hi}]")]
    InfeasibleCovariance { value: f64, lo: f64, hi: f64 },
    #[error("a 2x2 margin is zero")]
    ZeroMargin,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectKind {
    Fixed,
    #[default]
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dependence {
    #[default]
    Independent,
    Dependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaregConfig {
    pub covariate: String,
    /// Overrides the kind inferred at parse time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<CovariateKind>,
    /// Continuous only; defaults to the covariate mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<f64>,
    /// Continuous only; defaults to the center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_at: Option<f64>,
}

fn default_min_studies() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupConfig {
    pub covariate: String,
    #[serde(default = "default_min_studies")]
    pub min_studies: usize,
}

fn default_true() -> bool {
    true
}

fn fixed() -> EffectKind {
    EffectKind::Fixed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlcmConfig {
    #[serde(default)]
    pub index: EffectKind,
    #[serde(default = "fixed")]
    pub refs: EffectKind,
    #[serde(default)]
    pub dependence: Dependence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_column: Option<String>,
    /// Correlated index-test random effects (2x2 covariance with an LKJ prior);
    /// independent normals when false.
    #[serde(default = "default_true")]
    pub index_correlated: bool,
}

impl Default for TlcmConfig {
    fn default() -> Self {
        TlcmConfig {
            index: EffectKind::Random,
            refs: EffectKind::Fixed,
            dependence: Dependence::Independent,
            ref_column: None,
            index_correlated: true,
        }
    }
}

/// The plain bivariate model has no settings of its own.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BivariateConfig {}

/// Which analysis to run, with its model-specific settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelSpec {
    Bivariate(BivariateConfig),
    Metareg(MetaregConfig),
    Subgroup(SubgroupConfig),
    Tlcm(TlcmConfig),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Bivariate(_) => "bivariate",
            ModelSpec::Metareg(_) => "metareg",
            ModelSpec::Subgroup(_) => "subgroup",
            ModelSpec::Tlcm(_) => "tlcm",
        }
    }
}
