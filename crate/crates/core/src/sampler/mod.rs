//! Gradient-based MCMC over differentiable log-densities on unconstrained space.

mod nuts;
pub mod transforms;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nuts::{leapfrog, nuts_sample, nuts_sample_with_progress, Progress};
pub use transforms::Transform;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("non-finite log density or gradient at {0:?}")]
    NonFiniteDensity(Vec<f64>),
    #[error("step-size adaptation failed in chain {chain}: {reason}")]
    AdaptationFailure { chain: usize, reason: String },
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("value {value} outside the domain of the {transform:?} transform")]
    OutOfDomain { transform: Transform, value: f64 },
    #[error("sampling cancelled")]
    Cancelled,
}

/// A joint log density on unconstrained space together with its gradient.
///
/// Implementations must be deterministic and safe to evaluate from several
/// chain workers at once.
pub trait ModelDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density. A
    /// non-finite return value marks the point as outside the support.
    fn log_density(&self, theta: &[f64], grad: &mut [f64]) -> f64;

    fn parameter_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("theta[{i}]")).collect()
    }

    /// Center of the random initialization box; the origin by default.
    fn init_center(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// Half-width of the initialization box.
    fn init_radius(&self) -> f64 {
        2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_treedepth: u32,
    pub divergence_energy_threshold: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            target_accept: 0.8,
            max_treedepth: 10,
            divergence_energy_threshold: 1000.0,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::InvalidConfig(m.to_string()));
        if self.chains < 1 {
            return bad("chains must be >= 1");
        }
        if self.warmup < 1 || self.samples < 1 {
            return bad("warmup and samples must be >= 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if self.max_treedepth < 1 || self.max_treedepth > 30 {
            return bad("max_treedepth must lie in [1, 30]");
        }
        if !(self.divergence_energy_threshold > 0.0) {
            return bad("divergence_energy_threshold must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub divergent: bool,
    pub treedepth: u32,
    pub max_treedepth_hit: bool,
    pub n_leapfrog: u32,
    pub energy: f64,
    pub step_size: f64,
    pub accept_stat: f64,
    pub log_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    /// `samples x dim` unconstrained draws.
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<IterationStats>,
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDraws {
    pub dim: usize,
    pub chains: Vec<ChainDraws>,
}

impl RawDraws {
    pub fn n_divergent(&self) -> usize {
        self.chains.iter().flat_map(|c| &c.stats).filter(|s| s.divergent).count()
    }

    pub fn n_max_treedepth(&self) -> usize {
        self.chains.iter().flat_map(|c| &c.stats).filter(|s| s.max_treedepth_hit).count()
    }

    /// Per-chain draws of one unconstrained coordinate.
    pub fn coordinate(&self, i: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.draws.iter().map(|d| d[i]).collect()).collect()
    }
}

/// Maximum relative disagreement between the analytic gradient and a
/// Richardson-extrapolated central difference, per coordinate
/// `|analytic - numeric| / (|analytic| + eps)`.
pub fn check_gradient<M: ModelDensity + ?Sized>(m: &M, theta: &[f64], eps: f64) -> Result<f64, SamplerError> {
    let n = m.dim();
    let mut grad = vec![0.0; n];
    let lp = m.log_density(theta, &mut grad);
    if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(SamplerError::NonFiniteDensity(theta.to_vec()));
    }
    let mut scratch = vec![0.0; n];
    let mut x = theta.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..n {
        let h = 1e-3 * theta[i].abs().max(1.0);
        let mut f = |v: f64| {
            x[i] = v;
            let out = m.log_density(&x, &mut scratch);
            x[i] = theta[i];
            out
        };
        let d1 = (f(theta[i] + h) - f(theta[i] - h)) / (2.0 * h);
        let d2 = (f(theta[i] + h / 2.0) - f(theta[i] - h / 2.0)) / h;
        let numeric = (4.0 * d2 - d1) / 3.0;
        if !numeric.is_finite() {
            return Err(SamplerError::NonFiniteDensity(theta.to_vec()));
        }
        worst = worst.max((grad[i] - numeric).abs() / (grad[i].abs() + eps));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic(usize);
    impl ModelDensity for Quadratic {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
            for (g, t) in grad.iter_mut().zip(theta) {
                *g = -t;
            }
            -0.5 * theta.iter().map(|t| t * t).sum::<f64>()
        }
    }

    struct Nan;
    impl ModelDensity for Nan {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, _: &[f64], grad: &mut [f64]) -> f64 {
            grad[0] = 0.0;
            f64::NAN
        }
    }

    #[test]
    fn quadratic_gradient_exact() {
        let err = check_gradient(&Quadratic(5), &[0.3, -1.2, 4.0, 0.0, 2.5], 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nan_density_reported() {
        assert!(matches!(check_gradient(&Nan, &[0.0], 1e-6), Err(SamplerError::NonFiniteDensity(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(SamplerConfig { chains: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { target_accept: 1.0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { samples: 0, ..Default::default() }.validate().is_err());
    }
}
