//! Kernel density over latent anchors and the score fields built on it.
//!
//! All softmax-style weights are formed in log space and shifted by their
//! maximum before exponentiation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::networks::{Decoder, DistanceField};
use crate::rng::SplitRng;

/// Anchor counts above this switch the kernel means to the nearest anchors.
pub const SUBSAMPLE_THRESHOLD: usize = 2000;
pub const DEFAULT_SUBSAMPLE_K: usize = 512;
/// Largest anchor subset used by the median bandwidth heuristic.
pub const MEDIAN_SUBSET: usize = 1000;

/// `ln(1e-300)`: total kernel mass below this is reported as underflow.
pub fn underflow_log_mass() -> f64 {
    libm::log(1e-300)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelDensity {
    pub anchors: Matrix,
    pub sigma_ker: f64,
    /// Monte Carlo draws per anchor.
    pub n_samples: usize,
    /// Nearest-anchor subset size used above [`SUBSAMPLE_THRESHOLD`]; 0 disables.
    pub subsample_k: usize,
}

impl KernelDensity {
    pub fn new(anchors: Matrix, sigma_ker: f64, n_samples: usize) -> Result<Self> {
        if anchors.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if !(sigma_ker > 0.0 && sigma_ker.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_ker must be positive, got {sigma_ker}")));
        }
        if n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
        }
        Ok(Self {
            anchors,
            sigma_ker,
            n_samples,
            subsample_k: DEFAULT_SUBSAMPLE_K,
        })
    }

    /// Bandwidth from the median heuristic, see [`median_bandwidth`].
    pub fn with_median_bandwidth(anchors: Matrix, n_samples: usize) -> Result<Self> {
        let sigma = median_bandwidth(&anchors)?;
        Self::new(anchors, sigma, n_samples)
    }

    pub fn latent_dim(&self) -> usize {
        self.anchors.cols()
    }

    /// Anchors entering the kernel means at `z`: all of them, or the
    /// `subsample_k` nearest (ties to the lower index) for large sets.
    pub fn active_anchors(&self, z: &[f64]) -> Vec<usize> {
        let n = self.anchors.rows();
        if n <= SUBSAMPLE_THRESHOLD || self.subsample_k == 0 || self.subsample_k >= n {
            return (0..n).collect();
        }
        let mut d: Vec<(f64, usize)> = self
            .anchors
            .iter_rows()
            .enumerate()
            .map(|(i, a)| (linalg::squared_distance(z, a), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        d.select_nth_unstable_by(self.subsample_k - 1, cmp);
        let mut idx: Vec<usize> = d[..self.subsample_k].iter().map(|p| p.1).collect();
        idx.sort_unstable();
        idx
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::Dimension {
                context: "latent point",
                expected: self.latent_dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Unnormalized density `sum_a exp(-|z - z_a|^2 / 2 sigma_ker^2)` over all anchors.
    pub fn density(&self, z: &[f64]) -> Result<f64> {
        self.check_latent(z)?;
        let s2 = 2.0 * self.sigma_ker * self.sigma_ker;
        Ok(self.anchors.iter_rows().map(|a| libm::exp(-linalg::squared_distance(z, a) / s2)).sum())
    }

    /// Kernel-weighted mean of the active anchors at `z`.
    pub fn z_bar(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let idx = self.active_anchors(z);
        let s2 = 2.0 * self.sigma_ker * self.sigma_ker;
        let logw: Vec<f64> = idx.iter().map(|&i| -linalg::squared_distance(z, self.anchors.row(i)) / s2).collect();
        softmax_mean(&logw, idx.iter().map(|&i| self.anchors.row(i)), z.len())
    }
}

pub fn kernel_density(z: &[f64], kernel: &KernelDensity) -> Result<f64> {
    kernel.density(z)
}

/// Kernel mean of `anchors` at `z` with bandwidth `sigma_ker`, over all anchors.
pub fn z_bar(z: &[f64], anchors: &Matrix, sigma_ker: f64) -> Result<Vec<f64>> {
    let mut k = KernelDensity::new(anchors.clone(), sigma_ker, 1)?;
    k.subsample_k = 0;
    k.z_bar(z)
}

/// Half the median pairwise distance between anchors. Sets larger than
/// [`MEDIAN_SUBSET`] use an evenly strided subset of that size.
pub fn median_bandwidth(anchors: &Matrix) -> Result<f64> {
    let n = anchors.rows();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "median bandwidth needs at least two anchors; set sigma_ker explicitly".into(),
        ));
    }
    let m = n.min(MEDIAN_SUBSET);
    let rows: Vec<&[f64]> = (0..m).map(|i| anchors.row(i * n / m)).collect();
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(linalg::distance(rows[i], rows[j]));
        }
    }
    let mid = d.len() / 2;
    d.select_nth_unstable_by(mid, f64::total_cmp);
    let mut median = d[mid];
    if d.len() % 2 == 0 {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        median = 0.5 * (median + lower);
    }
    if !(median > 0.0) {
        return Err(Error::InvalidConfig(
            "anchors coincide; the median bandwidth is zero, set sigma_ker explicitly".into(),
        ));
    }
    Ok(0.5 * median)
}

/// `sum_i w_i v_i / sum_i w_i` with `w_i = exp(logw_i)`.
fn softmax_mean<'a>(logw: &[f64], values: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Vec<f64>> {
    let log_mass = linalg::log_sum_exp(logw);
    if !(log_mass >= underflow_log_mass()) {
        return Err(Error::ScoreUnderflow { log_mass });
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for (&lw, v) in logw.iter().zip(values) {
        let w = libm::exp(lw - max);
        total += w;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(acc)
}

/// Decoded Monte Carlo draws `z ~ N(z_a, sigma_ker^2 I)`, `n_samples` per
/// anchor, stored anchor by anchor. One bank can serve many evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBank {
    pub kernel: KernelDensity,
    pub latents: Matrix,
    pub decoded: Matrix,
}

impl SampleBank {
    pub fn draw<D: Decoder + ?Sized>(decoder: &D, kernel: &KernelDensity, rng: &mut SplitRng) -> Result<Self> {
        if decoder.latent_dim() != kernel.latent_dim() {
            return Err(Error::Dimension {
                context: "decoder latent width vs anchors",
                expected: kernel.latent_dim(),
                got: decoder.latent_dim(),
            });
        }
        let n = kernel.n_samples;
        let d = kernel.latent_dim();
        let mut latents = Matrix::zeros(kernel.anchors.rows() * n, d);
        for (a, anchor) in kernel.anchors.iter_rows().enumerate() {
            for s in 0..n {
                let row = latents.row_mut(a * n + s);
                for (z, c) in row.iter_mut().zip(anchor) {
                    *z = c + kernel.sigma_ker * rng.normal();
                }
            }
        }
        let decoded = decoder.decode_batch(&latents)?;
        Ok(Self {
            kernel: kernel.clone(),
            latents,
            decoded,
        })
    }

    pub fn ambient_dim(&self) -> usize {
        self.decoded.cols()
    }

    /// Monte Carlo estimate of the kernel-weighted decoder mean at `x`.
    ///
    /// With `code` given (the query's latent code), large anchor sets are cut
    /// down to the anchors nearest to it.
    pub fn g_bar(&self, x: &[f64], sigma_d: f64, code: Option<&[f64]>) -> Result<Vec<f64>> {
        if x.len() != self.ambient_dim() {
            return Err(Error::Dimension {
                context: "g_bar point",
                expected: self.ambient_dim(),
                got: x.len(),
            });
        }
        let n = self.kernel.n_samples;
        let rows: Vec<usize> = match code {
            Some(z) => self.kernel.active_anchors(z).into_iter().flat_map(|a| a * n..(a + 1) * n).collect(),
            None => (0..self.decoded.rows()).collect(),
        };
        let s2 = 2.0 * sigma_d * sigma_d;
        let logw: Vec<f64> = rows.iter().map(|&r| -linalg::squared_distance(x, self.decoded.row(r)) / s2).collect();
        softmax_mean(&logw, rows.iter().map(|&r| self.decoded.row(r)), x.len())
    }

    /// `-(x - g_bar(x)) / 2 sigma_d^2`.
    pub fn score_non_u(&self, x: &[f64], sigma_d: f64, code: Option<&[f64]>) -> Result<Vec<f64>> {
        let g = self.g_bar(x, sigma_d, code)?;
        Ok(non_u_from_g_bar(x, &g, sigma_d))
    }
}

fn non_u_from_g_bar(x: &[f64], g: &[f64], sigma_d: f64) -> Vec<f64> {
    let c = -1.0 / (2.0 * sigma_d * sigma_d);
    x.iter().zip(g).map(|(a, b)| c * (a - b)).collect()
}

/// Monte Carlo `G_bar(x)` from fresh draws.
pub fn g_bar<D: Decoder + ?Sized>(x: &[f64], decoder: &D, kernel: &KernelDensity, sigma_d: f64, rng: &mut SplitRng) -> Result<Vec<f64>> {
    SampleBank::draw(decoder, kernel, rng)?.g_bar(x, sigma_d, None)
}

/// The kernel score `-(x - G_bar(x)) / 2 sigma_d^2`, evaluated through [`g_bar`].
pub fn score_non_u<D: Decoder + ?Sized>(x: &[f64], decoder: &D, kernel: &KernelDensity, sigma_d: f64, rng: &mut SplitRng) -> Result<Vec<f64>> {
    let g = g_bar(x, decoder, kernel, sigma_d, rng)?;
    Ok(non_u_from_g_bar(x, &g, sigma_d))
}

/// The distance score `-D(x) grad D(x) / sigma_d^2`.
pub fn score_d<F: DistanceField + ?Sized>(x: &[f64], field: &F, sigma_d: f64) -> Result<Vec<f64>> {
    let d = field.distance(x)?;
    let g = field.gradient(x)?;
    let c = -d / (sigma_d * sigma_d);
    Ok(g.iter().map(|v| c * v).collect())
}
