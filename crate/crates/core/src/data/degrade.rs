//! Image corruptions used at evaluation time.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::image::GrayImage;
use crate::error::{Error, Result};
use crate::rng::SplitRng;

/// Side of the square patches blacked out by [`Degradation::MissingPixels`].
pub const PATCH_SIZE: usize = 4;
/// Displacement scale of the elastic warp.
pub const ELASTIC_ALPHA: f64 = 34.0;
/// Blur width used by over-sharpening unless overridden.
pub const DEFAULT_SHARPEN_SIGMA: f64 = 1.0;
/// Segment-count range of one scribble.
pub const SCRIBBLE_SEGMENTS: (usize, usize) = (5, 15);
/// Segment-length range of one scribble, in pixels.
pub const SCRIBBLE_STEP: (f64, f64) = (2.0, 6.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Additive `N(0, sigma^2)` per pixel.
    GaussianNoise {
        sigma: f64,
    },
    /// Bilinear down by `factor`, then back up to the original size.
    Downsample {
        factor: f64,
    },
    /// Fraction of pixels covered by black square patches.
    MissingPixels {
        coverage: f64,
    },
    Scribbles {
        count: usize,
    },
    /// `I + s (I - blur_sigma(I))`.
    OverSharpen {
        s: f64,
        sigma: f64,
    },
    /// Smoothed random displacement field scaled by `alpha`.
    Elastic {
        alpha: f64,
        sigma: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: Degradation,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    Mild,
    Severe,
}

impl Severity {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mild => "mild",
            Self::Severe => "severe",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "mild" => Some(Self::Mild),
            "severe" => Some(Self::Severe),
            _ => None,
        }
    }
}

impl Degradation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianNoise { .. } => "noise",
            Self::Downsample { .. } => "downsample",
            Self::MissingPixels { .. } => "missing",
            Self::Scribbles { .. } => "scribbles",
            Self::OverSharpen { .. } => "sharpen",
            Self::Elastic { .. } => "elastic",
        }
    }

    /// The benchmark severity table.
    pub fn preset(name: &str, severity: Severity) -> Result<Self> {
        let mild = severity == Severity::Mild;
        let pick = |m: f64, s: f64| if mild { m } else { s };
        Ok(match name {
            "noise" => Self::GaussianNoise { sigma: pick(0.2, 0.3) },
            "elastic" => Self::Elastic {
                alpha: ELASTIC_ALPHA,
                sigma: pick(1.5, 1.1),
            },
            "downsample" => Self::Downsample { factor: pick(0.5, 0.35) },
            "missing" => Self::MissingPixels { coverage: pick(0.04, 0.1) },
            "scribbles" => Self::Scribbles {
                count: if mild { 13 } else { 20 },
            },
            "sharpen" => Self::OverSharpen {
                s: pick(10.0, 18.0),
                sigma: DEFAULT_SHARPEN_SIGMA,
            },
            other => return Err(Error::InvalidDegradation(format!("unknown degradation {other:?}"))),
        })
    }

    /// Short human-readable parameter list.
    pub fn describe(&self) -> String {
        match *self {
            Self::GaussianNoise { sigma } => format!("sigma={sigma}"),
            Self::Downsample { factor } => format!("factor={factor}"),
            Self::MissingPixels { coverage } => format!("coverage={coverage}"),
            Self::Scribbles { count } => format!("count={count}"),
            Self::OverSharpen { s, sigma } => format!("s={s};sigma={sigma}"),
            Self::Elastic { alpha, sigma } => format!("alpha={alpha};sigma={sigma}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDegradation(m));
        match *self {
            Self::GaussianNoise { sigma } if !(sigma >= 0.0) => bad(format!("noise sigma {sigma} must be >= 0")),
            Self::Downsample { factor } if !(factor > 0.0 && factor <= 1.0) => bad(format!("downsample factor {factor} must be in (0, 1]")),
            Self::MissingPixels { coverage } if !(0.0..=1.0).contains(&coverage) => bad(format!("coverage {coverage} must be in [0, 1]")),
            Self::OverSharpen { s, sigma } if !(s >= 0.0 && sigma > 0.0) => bad(format!("sharpen needs s >= 0 and sigma > 0, got {s}, {sigma}")),
            Self::Elastic { alpha, sigma } if !(alpha >= 0.0 && sigma >= 0.0) => {
                bad(format!("elastic needs alpha, sigma >= 0, got {alpha}, {sigma}"))
            }
            _ => Ok(()),
        }
    }
}

/// Applies `spec` to `image`. The output stays in `[0, 1]` and depends only
/// on the image and the spec (seed included).
pub fn degrade(image: &GrayImage, spec: &DegradationSpec) -> Result<GrayImage> {
    spec.kind.validate()?;
    let mut rng = SplitRng::new(spec.seed);
    let mut out = match spec.kind {
        Degradation::GaussianNoise { sigma } => {
            let mut out = image.clone();
            if sigma > 0.0 {
                out.pixels.iter_mut().for_each(|p| *p += sigma * rng.normal());
            }
            out
        }
        Degradation::Downsample { factor } => downsample(image, factor),
        Degradation::MissingPixels { coverage } => missing_pixels(image, coverage, &mut rng),
        Degradation::Scribbles { count } => scribbles(image, count, &mut rng),
        Degradation::OverSharpen { s, sigma } => over_sharpen(image, s, sigma),
        Degradation::Elastic { alpha, sigma } => elastic(image, alpha, sigma, &mut rng),
    };
    out.clip();
    Ok(out)
}

fn downsample(image: &GrayImage, factor: f64) -> GrayImage {
    let h = (libm::round(image.height as f64 * factor) as usize).max(1);
    let w = (libm::round(image.width as f64 * factor) as usize).max(1);
    image.resize_bilinear(h, w).resize_bilinear(image.height, image.width)
}

/// Blacks out whole grid cells of [`PATCH_SIZE`] in random order until the
/// covered fraction is as close to `coverage` as the cells allow.
fn missing_pixels(image: &GrayImage, coverage: f64, rng: &mut SplitRng) -> GrayImage {
    let (h, w) = (image.height, image.width);
    let target = coverage * (h * w) as f64;
    let mut cells: Vec<(usize, usize)> = (0..h.div_ceil(PATCH_SIZE))
        .flat_map(|r| (0..w.div_ceil(PATCH_SIZE)).map(move |c| (r * PATCH_SIZE, c * PATCH_SIZE)))
        .collect();
    rng.shuffle(&mut cells);
    let mut out = image.clone();
    let mut covered = 0usize;
    for (r0, c0) in cells {
        let rows = PATCH_SIZE.min(h - r0);
        let cols = PATCH_SIZE.min(w - c0);
        let size = rows * cols;
        // stop once adding the cell would overshoot by more than it helps
        if (covered + size) as f64 - target > target - covered as f64 {
            break;
        }
        for r in r0..r0 + rows {
            for c in c0..c0 + cols {
                out.set(r, c, 0.0);
            }
        }
        covered += size;
    }
    out
}

/// Random-walk polylines of one random intensity each.
fn scribbles(image: &GrayImage, count: usize, rng: &mut SplitRng) -> GrayImage {
    let mut out = image.clone();
    let (h, w) = (image.height as f64, image.width as f64);
    for _ in 0..count {
        let segments = SCRIBBLE_SEGMENTS.0 + rng.below(SCRIBBLE_SEGMENTS.1 - SCRIBBLE_SEGMENTS.0 + 1);
        let width = 1 + rng.below(2);
        let intensity = rng.uniform();
        let mut y = rng.uniform_range(0.0, h);
        let mut x = rng.uniform_range(0.0, w);
        let mut heading = rng.uniform_range(0.0, 2.0 * core::f64::consts::PI);
        for _ in 0..segments {
            heading += rng.uniform_range(-1.0, 1.0);
            let len = rng.uniform_range(SCRIBBLE_STEP.0, SCRIBBLE_STEP.1);
            let (ny, nx) = (
                (y + len * libm::sin(heading)).clamp(0.0, h - 1e-9),
                (x + len * libm::cos(heading)).clamp(0.0, w - 1e-9),
            );
            let ticks = (4.0 * len) as usize + 1;
            for t in 0..=ticks {
                let f = t as f64 / ticks as f64;
                stamp(&mut out, y + f * (ny - y), x + f * (nx - x), width, intensity);
            }
            y = ny;
            x = nx;
        }
    }
    out
}

fn stamp(image: &mut GrayImage, y: f64, x: f64, width: usize, value: f64) {
    let r0 = y as isize;
    let c0 = x as isize;
    for dr in 0..width as isize {
        for dc in 0..width as isize {
            let (r, c) = (r0 + dr, c0 + dc);
            if r >= 0 && c >= 0 && (r as usize) < image.height && (c as usize) < image.width {
                image.set(r as usize, c as usize, value);
            }
        }
    }
}

fn over_sharpen(image: &GrayImage, s: f64, sigma: f64) -> GrayImage {
    if s == 0.0 {
        return image.clone();
    }
    let blurred = image.gaussian_blur(sigma, blur_size(sigma));
    let mut out = image.clone();
    for (o, b) in out.pixels.iter_mut().zip(&blurred.pixels) {
        *o += s * (*o - b);
    }
    out
}

/// Odd kernel size `int(8 sigma + 1)`, as torchvision picks for elastic
/// smoothing.
fn blur_size(sigma: f64) -> usize {
    let k = (8.0 * sigma + 1.0) as usize;
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

/// Uniform `[-1, 1]` displacements blurred by `sigma` and scaled by
/// `alpha / size` in normalized `[-1, 1]` coordinates, i.e. `alpha / 2`
/// pixels per unit, followed by a bilinear warp with zero fill.
fn elastic(image: &GrayImage, alpha: f64, sigma: f64, rng: &mut SplitRng) -> GrayImage {
    let (h, w) = (image.height, image.width);
    let field = |rng: &mut SplitRng| {
        let raw = GrayImage {
            height: h,
            width: w,
            pixels: (0..h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        };
        if sigma > 0.0 {
            raw.gaussian_blur(sigma, blur_size(sigma))
        } else {
            raw
        }
    };
    let dx = field(rng);
    let dy = field(rng);
    if alpha == 0.0 {
        return image.clone();
    }
    let mut out = GrayImage::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let x = c as f64 + dx.pixels[i] * alpha / h as f64 * w as f64 / 2.0;
            let y = r as f64 + dy.pixels[i] * alpha / w as f64 * h as f64 / 2.0;
            out.set(r, c, image.sample_bilinear(y, x, Some(0.0)));
        }
    }
    out
}
