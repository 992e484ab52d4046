//! Bijections from the real line onto constrained parameter domains.

use serde::{Deserialize, Serialize};

use super::SamplerError;
use crate::math::{inv_logit, log1m_inv_logit, log_inv_logit, logit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    /// Means and coefficients.
    Identity,
    /// Positive scales.
    Log,
    /// Correlations in (-1, 1).
    Tanh,
    /// Probabilities and fractions in (0, 1).
    Logit,
}

impl Transform {
    /// Constrained value and `ln |dx/du|`.
    pub fn constrain(self, u: f64) -> (f64, f64) {
        match self {
            Transform::Identity => (u, 0.0),
            Transform::Log => (u.exp(), u),
            Transform::Tanh => (u.tanh(), ln_sech2(u)),
            Transform::Logit => (inv_logit(u), log_inv_logit(u) + log1m_inv_logit(u)),
        }
    }

    pub fn unconstrain(self, x: f64) -> Result<f64, SamplerError> {
        let ok = match self {
            Transform::Identity => x.is_finite(),
            Transform::Log => x > 0.0 && x.is_finite(),
            Transform::Tanh => x > -1.0 && x < 1.0,
            Transform::Logit => x > 0.0 && x < 1.0,
        };
        if !ok {
            return Err(SamplerError::OutOfDomain { transform: self, value: x });
        }
        Ok(match self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
            Transform::Tanh => x.atanh(),
            Transform::Logit => logit(x),
        })
    }

    /// `dx/du` at unconstrained `u`.
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Log => u.exp(),
            Transform::Tanh => ln_sech2(u).exp(),
            Transform::Logit => {
                let x = inv_logit(u);
                x * (1.0 - x)
            }
        }
    }

    /// Derivative of the log-Jacobian in `u`.
    pub fn log_jacobian_grad(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::Log => 1.0,
            Transform::Tanh => -2.0 * u.tanh(),
            Transform::Logit => 1.0 - 2.0 * inv_logit(u),
        }
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
fn ln_sech2(u: f64) -> f64 {
    let a = u.abs();
    std::f64::consts::LN_2 * 2.0 - 2.0 * a - 2.0 * (-2.0 * a).exp().ln_1p()
}
