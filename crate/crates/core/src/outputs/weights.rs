//! Percentage contribution of each study to the pooled sensitivity and
//! specificity.

use serde::{Deserialize, Serialize};

use super::OutputError;
use crate::data::{Dataset, StudyRecord};
use crate::fit::FitResult;
use crate::math::{inv2, mat2_add, mat2_mul, Mat2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub study_id: String,
    pub weight_se: f64,
    pub weight_sp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub rows: Vec<WeightRow>,
}

impl WeightTable {
    pub fn get(&self, id: &str) -> Option<&WeightRow> {
        self.rows.iter().find(|r| r.study_id == id)
    }
}

/// Within-study variance of the logit accuracies, with 0.5 added to every
/// cell when any cell is zero.
pub fn within_study_cov(s: &StudyRecord) -> Mat2 {
    let cc = if s.has_zero_cell() { 0.5 } else { 0.0 };
    let (tp, fp, fn_, tn) = (s.tp as f64 + cc, s.fp as f64 + cc, s.fn_ as f64 + cc, s.tn as f64 + cc);
    [[1.0 / tp + 1.0 / fn_, 0.0], [0.0, 1.0 / tn + 1.0 / fp]]
}

/// Weights from within-study covariances `s_i` and a between-study covariance.
pub fn weights_from(within: &[Mat2], between: &Mat2) -> Result<Vec<(f64, f64)>, OutputError> {
    let b: Vec<Mat2> =
        within.iter().map(|s| inv2(&mat2_add(s, between)).ok_or(OutputError::DegenerateCloud)).collect::<Result<_, _>>()?;
    let a = b.iter().fold([[0.0; 2]; 2], |acc, m| mat2_add(&acc, m));
    let a_inv = inv2(&a).ok_or(OutputError::DegenerateCloud)?;
    Ok(b.iter()
        .map(|bi| {
            let m = mat2_mul(&mat2_mul(&a_inv, bi), &a_inv);
            (100.0 * m[0][0] / a_inv[0][0], 100.0 * m[1][1] / a_inv[1][1])
        })
        .collect())
}

/// Posterior-median between-study covariance; `(sigma_se, sigma_sp, rho)`
/// medians combined so the result stays positive semi-definite.
pub fn median_between_cov(fit: &FitResult, prefix: &str) -> Option<Mat2> {
    let s1 = fit.median(&format!("{prefix}sigma_se"))?;
    let s2 = fit.median(&format!("{prefix}sigma_sp"))?;
    let rho = fit.median(&format!("{prefix}rho")).unwrap_or(0.0);
    let c = rho * s1 * s2;
    Some([[s1 * s1, c], [c, s2 * s2]])
}

pub fn study_weights(fit: &FitResult, d: &Dataset) -> Result<WeightTable, OutputError> {
    let between = median_between_cov(fit, "").ok_or(OutputError::NotBivariate)?;
    let studies: Vec<&StudyRecord> = fit
        .info
        .study_ids
        .iter()
        .map(|id| d.study(id).ok_or_else(|| OutputError::UnknownStudy(id.clone())))
        .collect::<Result<_, _>>()?;
    let within: Vec<Mat2> = studies.iter().map(|s| within_study_cov(s)).collect();
    let w = weights_from(&within, &between)?;
    Ok(WeightTable {
        rows: studies
            .iter()
            .zip(w)
            .map(|(s, (a, b))| WeightRow { study_id: s.study_id.clone(), weight_se: a, weight_sp: b })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cov(tp: u64, fp: u64, fn_: u64, tn: u64) -> Mat2 {
        within_study_cov(&StudyRecord::new("s", 2000, tp, fp, fn_, tn))
    }

    #[test]
    fn identical_studies_share_equally() {
        let within = vec![cov(20, 10, 5, 40); 7];
        for (a, b) in weights_from(&within, &[[0.3, 0.1], [0.1, 0.2]]).unwrap() {
            assert!((a - 100.0 / 7.0).abs() < 1e-9 && (b - 100.0 / 7.0).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_variance_limit() {
        let within = vec![cov(200, 100, 50, 400), cov(20, 10, 5, 40)];
        let w = weights_from(&within, &[[0.0; 2]; 2]).unwrap();
        assert!((w[0].0 / w[1].0 - 10.0).abs() < 1e-9);
        assert!((w[0].1 / w[1].1 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn zero_cell_correction() {
        let c = cov(10, 0, 2, 30);
        assert!((c[0][0] - (1.0 / 10.5 + 1.0 / 2.5)).abs() < 1e-15);
        assert!((c[1][1] - (1.0 / 30.5 + 1.0 / 0.5)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn columns_sum_to_hundred(
            counts in prop::collection::vec((0u64..200, 0u64..200, 0u64..200, 0u64..200), 2..20),
            s1 in 0.0f64..2.0, s2 in 0.0f64..2.0, rho in -0.95f64..0.95,
        ) {
            let within: Vec<Mat2> = counts.iter().map(|&(a, b, c, d)| cov(a, b, c, d)).collect();
            let between = [[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]];
            let w = weights_from(&within, &between).unwrap();
            let (sa, sb): (f64, f64) = w.iter().fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
            prop_assert!((sa - 100.0).abs() <= 1e-9 && (sb - 100.0).abs() <= 1e-9);
            prop_assert!(w.iter().all(|x| x.0 >= 0.0 && x.1 >= 0.0));
        }
    }
}
