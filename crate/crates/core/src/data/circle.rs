//! The unit circle in the `xy`-plane of R³ and angular samples on it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::networks::{Decoder, DistanceField, Encoder};
use crate::rng::SplitRng;

/// Exact geometry of the unit circle: distance field, angle decoder
/// `θ -> (cos θ, sin θ, 0)` and angle encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnitCircle;

impl UnitCircle {
    /// Closest point on the circle; `None` on the axis where it is not unique.
    pub fn project(p: &[f64]) -> Option<[f64; 3]> {
        let r = libm::hypot(p[0], p[1]);
        (r > 0.0).then(|| [p[0] / r, p[1] / r, 0.0])
    }
}

fn check3(p: &[f64]) -> Result<()> {
    if p.len() != 3 {
        return Err(Error::Dimension {
            context: "unit circle point",
            expected: 3,
            got: p.len(),
        });
    }
    Ok(())
}

impl DistanceField for UnitCircle {
    fn dim(&self) -> usize {
        3
    }

    fn distance(&self, p: &[f64]) -> Result<f64> {
        check3(p)?;
        Ok(libm::hypot(libm::hypot(p[0], p[1]) - 1.0, p[2]))
    }

    /// Zero where the gradient is undefined (on the circle and on the axis).
    fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        check3(p)?;
        let r = libm::hypot(p[0], p[1]);
        let d = libm::hypot(r - 1.0, p[2]);
        if r == 0.0 || d == 0.0 {
            return Ok(vec![0.0; 3]);
        }
        let radial = (r - 1.0) / (r * d);
        Ok(vec![p[0] * radial, p[1] * radial, p[2] / d])
    }
}

impl Decoder for UnitCircle {
    fn latent_dim(&self) -> usize {
        1
    }

    fn ambient_dim(&self) -> usize {
        3
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != 1 {
            return Err(Error::Dimension {
                context: "unit circle angle",
                expected: 1,
                got: z.len(),
            });
        }
        Ok(vec![libm::cos(z[0]), libm::sin(z[0]), 0.0])
    }
}

impl Encoder for UnitCircle {
    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check3(x)?;
        Ok(vec![libm::atan2(x[1], x[0])])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircleDatasetSpec {
    pub count: usize,
    pub theta0: f64,
    pub sigma_theta: f64,
    pub bounds: (f64, f64),
}

impl CircleDatasetSpec {
    /// The right half circle `x >= 0`, densest at `(1, 0, 0)`.
    pub fn half_circle(count: usize, sigma_theta: f64) -> Self {
        use core::f64::consts::FRAC_PI_2;
        Self {
            count,
            theta0: 0.0,
            sigma_theta,
            bounds: (-FRAC_PI_2, FRAC_PI_2),
        }
    }
}

/// Truncated-normal angle draw by rejection.
pub fn sample_angle(spec: &CircleDatasetSpec, rng: &mut SplitRng) -> Result<f64> {
    let (lo, hi) = spec.bounds;
    if !(lo < hi) || !(spec.sigma_theta > 0.0) || !spec.theta0.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "circle: need bounds lo < hi and sigma_theta > 0, got [{lo}, {hi}] and {}",
            spec.sigma_theta
        )));
    }
    for _ in 0..1_000_000 {
        let t = spec.theta0 + spec.sigma_theta * rng.normal();
        if (lo..=hi).contains(&t) {
            return Ok(t);
        }
    }
    Err(Error::InvalidConfig(format!(
        "circle: bounds [{lo}, {hi}] carry almost no mass around theta0 = {}",
        spec.theta0
    )))
}

pub fn sample_angles(spec: &CircleDatasetSpec, rng: &mut SplitRng) -> Result<Vec<f64>> {
    (0..spec.count).map(|_| sample_angle(spec, rng)).collect()
}

/// `count x 3` points `(cos θ, sin θ, 0)`.
pub fn sample_circle(spec: &CircleDatasetSpec, rng: &mut SplitRng) -> Result<Matrix> {
    let mut out = Matrix::zeros(spec.count, 3);
    for i in 0..spec.count {
        let t = sample_angle(spec, rng)?;
        out.row_mut(i).copy_from_slice(&[libm::cos(t), libm::sin(t), 0.0]);
    }
    Ok(out)
}

/// Adds isotropic Gaussian noise to every coordinate.
pub fn add_noise(points: &Matrix, sigma: f64, rng: &mut SplitRng) -> Matrix {
    let mut out = points.clone();
    for v in out.as_mut_slice() {
        *v += sigma * rng.normal();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::normalized_descent_direction;

    #[test]
    fn samples_lie_on_the_circle() {
        let spec = CircleDatasetSpec::half_circle(2000, 0.6);
        let pts = sample_circle(&spec, &mut SplitRng::new(1)).unwrap();
        for p in pts.iter_rows() {
            assert!((p[0] * p[0] + p[1] * p[1] - 1.0).abs() < 1e-12);
            assert_eq!(p[2], 0.0);
            assert!(p[0] >= 0.0);
        }
    }

    #[test]
    fn vanishing_spread_collapses_to_theta0() {
        let mut spec = CircleDatasetSpec::half_circle(10, 1e-300);
        spec.theta0 = 1.0;
        let pts = sample_circle(&spec, &mut SplitRng::new(2)).unwrap();
        for p in pts.iter_rows() {
            assert_eq!(p, &[libm::cos(1.0), libm::sin(1.0), 0.0]);
        }
    }

    #[test]
    fn angle_mean_is_theta0() {
        // symmetric bounds keep the truncated mean at theta0
        let spec = CircleDatasetSpec {
            count: 100_000,
            theta0: 1.2,
            sigma_theta: 0.4,
            bounds: (0.0, 2.4),
        };
        let a = sample_angles(&spec, &mut SplitRng::new(3)).unwrap();
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!((mean - 1.2).abs() < 3.0 * 0.4 / libm::sqrt(1e5));
    }

    #[test]
    fn degenerate_bounds_are_rejected() {
        let mut spec = CircleDatasetSpec::half_circle(1, 0.5);
        spec.bounds = (1.0, 1.0);
        assert!(sample_circle(&spec, &mut SplitRng::new(0)).is_err());
    }

    #[test]
    fn analytic_distance_and_direction() {
        let c = UnitCircle;
        assert_eq!(c.distance(&[2.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(c.distance(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(normalized_descent_direction(&c, &[2.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(normalized_descent_direction(&c, &[0.0, 0.5, 0.0]).unwrap(), vec![0.0, -1.0, 0.0]);
        let g = c.gradient(&[0.3, -1.4, 0.2]).unwrap();
        assert!((crate::linalg::norm(&g) - 1.0).abs() < 1e-12);
        assert!(c.distance(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn encoder_inverts_decoder() {
        for t in [-3.0, -0.5, 0.0, 1.0, 3.0] {
            let x = UnitCircle.decode(&[t]).unwrap();
            assert!((UnitCircle.encode(&x).unwrap()[0] - t).abs() < 1e-12);
        }
    }
}
