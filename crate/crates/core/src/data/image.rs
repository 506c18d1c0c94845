//! Grayscale images in `[0, 1]` and the resampling helpers shared by the
//! degradations.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SplitRng;

/// Row-major grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension {
                context: "image pixels",
                expected: height * width,
                got: pixels.len(),
            });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: alloc::vec![value; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.width + c] = v;
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn clip(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    fn same_dims(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Dimension {
                context: "image dims",
                expected: self.height * self.width,
                got: other.height * other.width,
            });
        }
        Ok(())
    }

    /// Bilinear sample at a continuous pixel-centre coordinate. Outside the
    /// image the value is `fill`; coordinates are clamped to the border
    /// instead when `fill` is `None`.
    pub fn sample_bilinear(&self, y: f64, x: f64, fill: Option<f64>) -> f64 {
        let (h, w) = (self.height as isize, self.width as isize);
        let y0 = libm::floor(y);
        let x0 = libm::floor(x);
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let at = |r: isize, c: isize| -> f64 {
            match fill {
                Some(f) if r < 0 || c < 0 || r >= h || c >= w => f,
                _ => self.get(r.clamp(0, h - 1) as usize, c.clamp(0, w - 1) as usize),
            }
        };
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with pixel-centre alignment and no antialiasing.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Self::filled(height, width, 0.0);
        for r in 0..height {
            let y = ((r as f64 + 0.5) * sy - 0.5).max(0.0);
            for c in 0..width {
                let x = ((c as f64 + 0.5) * sx - 0.5).max(0.0);
                out.set(r, c, self.sample_bilinear(y, x, None));
            }
        }
        out
    }

    /// Separable Gaussian blur of kernel size `size` (odd) with reflect
    /// padding at the borders.
    pub fn gaussian_blur(&self, sigma: f64, size: usize) -> Self {
        let kernel = gaussian_kernel(sigma, size);
        let half = (size / 2) as isize;
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i.rem_euclid(period);
            (if m < n { m } else { period - m }) as usize
        };
        let mut tmp = Self::filled(self.height, self.width, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * self.get(r, reflect(c as isize + k as isize - half, self.width)))
                    .sum();
                tmp.set(r, c, v);
            }
        }
        let mut out = Self::filled(self.height, self.width, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp.get(reflect(r as isize + k as isize - half, self.height), c))
                    .sum();
                out.set(r, c, v);
            }
        }
        out
    }
}

/// Normalized 1-D Gaussian taps centred on the middle of `size` samples.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let x = (i as f64 - half) / sigma;
            libm::exp(-0.5 * x * x)
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// A set of equally sized images, one per row of `pixels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub height: usize,
    pub width: usize,
    pub pixels: Matrix,
    pub labels: Option<Vec<u8>>,
}

impl ImageDataset {
    pub fn new(height: usize, width: usize, pixels: Matrix, labels: Option<Vec<u8>>) -> Result<Self> {
        if pixels.cols() != height * width {
            return Err(Error::Dimension {
                context: "image dataset width",
                expected: height * width,
                got: pixels.cols(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != pixels.rows() {
                return Err(Error::Dimension {
                    context: "label count",
                    expected: pixels.rows(),
                    got: l.len(),
                });
            }
        }
        if let Some(v) = pixels.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.row(i).to_vec(),
        }
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// `count` distinct images chosen by a seeded shuffle, in shuffled order.
    pub fn subset(&self, count: usize, rng: &mut SplitRng) -> Result<Self> {
        if count > self.len() {
            return Err(Error::InvalidConfig(format!("subset of {count} from {} images", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(count);
        Ok(self.select(&idx))
    }

    pub fn from_images(images: &[GrayImage], labels: Option<Vec<u8>>) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        for im in images {
            first.same_dims(im)?;
        }
        let rows = Matrix::from_rows(first.len(), images.iter().map(|im| im.pixels.as_slice()))?;
        Self::new(first.height, first.width, rows, labels)
    }
}

pub(crate) fn check_dims(a: &GrayImage, b: &GrayImage) -> Result<()> {
    a.same_dims(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> GrayImage {
        let px = (0..h * w).map(|i| i as f64 / (h * w) as f64).collect();
        GrayImage::new(h, w, px).unwrap()
    }

    #[test]
    fn resize_to_same_size_is_exact() {
        let im = ramp(7, 5);
        assert_eq!(im.resize_bilinear(7, 5), im);
    }

    #[test]
    fn resize_preserves_constants_and_linear_ramps() {
        let c = GrayImage::filled(9, 9, 0.3);
        assert!(c.resize_bilinear(4, 4).pixels.iter().all(|v| (v - 0.3).abs() < 1e-15));
        // horizontal ramp sampled at an interior point
        let px = (0..64).map(|i| (i % 8) as f64 / 7.0).collect();
        let im = GrayImage::new(8, 8, px).unwrap();
        assert!((im.sample_bilinear(3.0, 2.5, None) - 2.5 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn blur_preserves_constants_and_mass_of_a_centred_dot() {
        let c = GrayImage::filled(6, 6, 0.7);
        assert!(c.gaussian_blur(1.5, 13).pixels.iter().all(|v| (v - 0.7).abs() < 1e-12));
        let mut dot = GrayImage::filled(21, 21, 0.0);
        dot.set(10, 10, 1.0);
        let b = dot.gaussian_blur(1.0, 9);
        assert!((b.pixels.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(b.get(10, 10) > b.get(10, 11));
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.1, 9);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..9 {
            assert_eq!(k[i], k[8 - i]);
        }
    }

    #[test]
    fn outside_fill_is_used() {
        let im = GrayImage::filled(3, 3, 1.0);
        assert_eq!(im.sample_bilinear(-1.0, 1.0, Some(0.0)), 0.0);
        assert_eq!(im.sample_bilinear(-0.5, 1.0, Some(0.0)), 0.5);
        assert_eq!(im.sample_bilinear(-1.0, 1.0, None), 1.0);
    }

    #[test]
    fn dataset_checks_and_subset() {
        let m = Matrix::from_vec(3, 4, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let ds = ImageDataset::new(2, 2, m.clone(), Some(alloc::vec![1, 2, 3])).unwrap();
        assert!(ImageDataset::new(2, 3, m.clone(), None).is_err());
        assert!(ImageDataset::new(2, 2, m.clone(), Some(alloc::vec![1])).is_err());
        assert!(ImageDataset::new(2, 2, m.map(|v| v + 1.0), None).is_err());
        let s = ds.subset(2, &mut SplitRng::new(3)).unwrap();
        assert_eq!(s.len(), 2);
        for i in 0..2 {
            let label = s.label(i).unwrap() as usize;
            assert_eq!(s.image(i), ds.image(label - 1));
        }
        assert!(ds.subset(4, &mut SplitRng::new(3)).is_err());
        let back = ImageDataset::from_images(&[ds.image(0), ds.image(1), ds.image(2)], None).unwrap();
        assert_eq!(back.pixels, ds.pixels);
    }
}
