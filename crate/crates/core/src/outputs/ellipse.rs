//! Moment-matched elliptical regions for 2-D posterior clouds.

use serde::{Deserialize, Serialize};

use super::OutputError;
use crate::math::{chi2_2_quantile, chol2, inv2, inv_logit, mat2_add, mean_cov2, Mat2};

pub const ELLIPSE_VERTICES: usize = 128;
const MIN_POINTS: usize = 100;

/// Ellipse `{x : (x - center)' cov^-1 (x - center) <= radius^2}` on the
/// `(logit Se, logit Sp)` scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub cov: Mat2,
    pub radius: f64,
}

fn check_level(level: f64) -> Result<f64, OutputError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(OutputError::BadLevel(level));
    }
    Ok(chi2_2_quantile(level).sqrt())
}

impl Ellipse {
    /// Sample mean and covariance of `points` with the chi-square radius at `level`.
    pub fn from_cloud(points: &[(f64, f64)], level: f64) -> Result<Ellipse, OutputError> {
        if points.len() < MIN_POINTS {
            return Err(OutputError::TooFewPoints { needed: MIN_POINTS, got: points.len() });
        }
        let radius = check_level(level)?;
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let (center, cov) = mean_cov2(&xs, &ys);
        let scale = cov[0][0] * cov[1][1];
        if chol2(&cov).is_none() || crate::math::det2(&cov) <= 1e-12 * scale {
            return Err(OutputError::DegenerateCloud);
        }
        Ok(Ellipse { center, cov, radius })
    }

    /// Same center, covariance widened by `extra` (a between-study covariance).
    pub fn widened(&self, extra: &Mat2) -> Ellipse {
        Ellipse { cov: mat2_add(&self.cov, extra), ..*self }
    }

    /// Closed vertex list on the logit scale (first vertex repeated last).
    pub fn vertices(&self) -> Vec<[f64; 2]> {
        let l = chol2(&self.cov).expect("positive definite");
        let mut out: Vec<[f64; 2]> = (0..ELLIPSE_VERTICES)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / ELLIPSE_VERTICES as f64;
                let (u, v) = (self.radius * t.cos(), self.radius * t.sin());
                [self.center[0] + l[0][0] * u, self.center[1] + l[1][0] * u + l[1][1] * v]
            })
            .collect();
        out.push(out[0]);
        out
    }

    /// Mahalanobis distance of `p` from the center.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let inv = inv2(&self.cov).expect("positive definite");
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        (dx * (inv[0][0] * dx + inv[0][1] * dy) + dy * (inv[1][0] * dx + inv[1][1] * dy)).sqrt()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.distance(p) <= self.radius
    }

    /// Every vertex of `other` lies inside this ellipse.
    pub fn contains_ellipse(&self, other: &Ellipse) -> bool {
        other.vertices().iter().all(|v| self.distance(*v) <= self.radius * (1.0 + 1e-12))
    }

    /// Closed polygon in ROC space `(1 - Sp, Se)`.
    pub fn roc_polygon(&self) -> Vec<[f64; 2]> {
        self.vertices().into_iter().map(to_roc).collect()
    }
}

/// `(logit Se, logit Sp)` to ROC-space `(1 - Sp, Se)`.
pub fn to_roc(p: [f64; 2]) -> [f64; 2] {
    [1.0 - inv_logit(p[1]), inv_logit(p[0])]
}

/// Credible region polygon for a cloud of `(logit Se, logit Sp)` draws, in ROC space.
pub fn credible_ellipse(points: &[(f64, f64)], level: f64) -> Result<Vec<[f64; 2]>, OutputError> {
    Ok(Ellipse::from_cloud(points, level)?.roc_polygon())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(n: usize, seed: u64, sx: f64, sy: f64, r: f64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                (1.0 + sx * a, -0.5 + sy * (r * a + (1.0 - r * r).sqrt() * b))
            })
            .collect()
    }

    #[test]
    fn standard_cloud_gives_chi_square_circle() {
        let e = Ellipse::from_cloud(&cloud(100_000, 1, 1.0, 1.0, 0.0), 0.95).unwrap();
        assert!((e.radius - 5.991_464_547_107_979f64.sqrt()).abs() < 1e-12);
        for v in e.vertices() {
            let d = ((v[0] - e.center[0]).powi(2) + (v[1] - e.center[1]).powi(2)).sqrt();
            assert!((d - 2.4477).abs() < 0.03, "{d}");
        }
    }

    #[test]
    fn polygon_closed_with_fixed_vertex_count() {
        let p = credible_ellipse(&cloud(500, 2, 0.4, 0.3, 0.5), 0.95).unwrap();
        assert_eq!(p.len(), ELLIPSE_VERTICES + 1);
        assert_eq!(p[0], p[ELLIPSE_VERTICES]);
        assert!(p.iter().all(|v| v.iter().all(|c| (0.0..=1.0).contains(c))));
    }

    #[test]
    fn gaussian_containment_near_nominal() {
        let pts = cloud(20_000, 3, 0.7, 0.4, -0.6);
        let e = Ellipse::from_cloud(&pts, 0.95).unwrap();
        let inside = pts.iter().filter(|p| e.contains([p.0, p.1])).count() as f64 / pts.len() as f64;
        assert!((inside - 0.95).abs() < 0.02, "{inside}");
    }

    #[test]
    fn degenerate_inputs() {
        let flat = vec![(0.3, 0.3); 200];
        assert_eq!(Ellipse::from_cloud(&flat, 0.95), Err(OutputError::DegenerateCloud));
        let line: Vec<(f64, f64)> = (0..200).map(|i| (i as f64, 2.0 * i as f64)).collect();
        assert_eq!(Ellipse::from_cloud(&line, 0.95), Err(OutputError::DegenerateCloud));
        assert!(matches!(Ellipse::from_cloud(&flat[..10], 0.95), Err(OutputError::TooFewPoints { .. })));
        assert_eq!(Ellipse::from_cloud(&cloud(200, 4, 1.0, 1.0, 0.0), 1.0), Err(OutputError::BadLevel(1.0)));
    }

    #[test]
    fn widening_contains_original() {
        let e = Ellipse::from_cloud(&cloud(1000, 5, 0.3, 0.2, 0.4), 0.95).unwrap();
        let w = e.widened(&[[0.5, -0.2], [-0.2, 0.3]]);
        assert!(w.contains_ellipse(&e));
        assert!(!e.contains_ellipse(&w));
    }
}
