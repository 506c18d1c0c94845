//! Restoration quality measures.

use super::image::{check_dims, gaussian_kernel, GrayImage};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean squared difference over all entries.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "mse operands",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

fn planar_deviation(p: &[f64]) -> f64 {
    libm::fabs(libm::hypot(p[0], p[1]) - 1.0)
}

/// Largest `| |(x, y)| - 1 |` over the rows, ignoring `z`.
pub fn max_circle_deviation(points: &Matrix) -> Result<f64> {
    check_points(points)?;
    Ok(points.iter_rows().map(planar_deviation).fold(0.0, f64::max))
}

/// Mean of the squared planar deviations.
pub fn mean_sq_circle_deviation(points: &Matrix) -> Result<f64> {
    check_points(points)?;
    Ok(points
        .iter_rows()
        .map(|p| {
            let d = planar_deviation(p);
            d * d
        })
        .sum::<f64>()
        / points.rows() as f64)
}

/// Largest full 3-D distance to the unit circle in the `xy`-plane.
pub fn max_circle_distance_3d(points: &Matrix) -> Result<f64> {
    check_points(points)?;
    Ok(points
        .iter_rows()
        .map(|p| libm::hypot(libm::hypot(p[0], p[1]) - 1.0, p[2]))
        .fold(0.0, f64::max))
}

fn check_points(points: &Matrix) -> Result<()> {
    if points.cols() != 3 {
        return Err(Error::Dimension {
            context: "circle points",
            expected: 3,
            got: points.cols(),
        });
    }
    if points.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// evaluated at every position where the window fits inside the image, for
/// a dynamic range of 1.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    check_dims(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Dimension {
            context: "ssim needs images at least as large as the window",
            expected: SSIM_WINDOW,
            got: a.height.min(a.width),
        });
    }
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW);
    let (oh, ow) = (a.height - SSIM_WINDOW + 1, a.width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, ki) in k.iter().enumerate() {
                for (j, kj) in k.iter().enumerate() {
                    let w = ki * kj;
                    let x = a.get(r + i, c + j);
                    let y = b.get(r + i, c + j);
                    ma += w * x;
                    mb += w * y;
                    aa += w * x * x;
                    bb += w * y * y;
                    ab += w * x * y;
                }
            }
            let va = aa - ma * ma;
            let vb = bb - mb * mb;
            let cov = ab - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    fn noise_image(seed: u64) -> GrayImage {
        let mut rng = SplitRng::new(seed);
        GrayImage::new(28, 28, (0..784).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn identities() {
        let a = noise_image(1);
        assert_eq!(mse(&a.pixels, &a.pixels).unwrap(), 0.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_penalizes_contrast_loss() {
        let a = noise_image(2);
        let b = noise_image(3);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let mut half = a.clone();
        half.pixels.iter_mut().for_each(|p| *p *= 0.5);
        let s = ssim(&a, &half).unwrap();
        assert!(s < 1.0 && s > 0.0, "{s}");
        assert!(ssim(&a, &b).unwrap() < s);
    }

    #[test]
    fn ssim_of_constant_images_matches_the_luminance_term() {
        let a = GrayImage::filled(12, 12, 0.2);
        let b = GrayImage::filled(12, 12, 0.6);
        let want = (2.0 * 0.2 * 0.6 + C1) / (0.04 + 0.36 + C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn circle_deviation() {
        let pts = Matrix::from_vec(2, 3, alloc::vec![2.0, 0.0, 0.0, 0.0, 0.9, 5.0]).unwrap();
        assert_eq!(max_circle_deviation(&pts).unwrap(), 1.0);
        assert!((mean_sq_circle_deviation(&pts).unwrap() - 0.505).abs() < 1e-12);
        assert!((max_circle_distance_3d(&pts).unwrap() - libm::hypot(0.1, 5.0)).abs() < 1e-12);
        assert!(max_circle_deviation(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(ssim(&GrayImage::filled(12, 12, 0.0), &GrayImage::filled(12, 13, 0.0)).is_err());
        assert!(ssim(&GrayImage::filled(5, 5, 0.0), &GrayImage::filled(5, 5, 0.0)).is_err());
    }
}
