//! Iterative restoration: ambient MPPM and latent LMPPM.
//!
//! One step moves a point by `(1 - β) x + β m(x) - α D(x) ∇D/|∇D|`, where
//! `m` is the kernel mean (`G_bar` in data space, `z_bar` in latent space).
//! When the kernel mass underflows the kernel branch is dropped; when the
//! distance gradient vanishes only the kernel branch is taken.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernel::{KernelDensity, SampleBank};
use crate::linalg::{self, Matrix};
use crate::networks::{normalized_descent_direction, DistanceField, ManifoldModel, Space};
use crate::rng::SplitRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub num_steps: usize,
    pub convergence_tol: f64,
    pub record_trajectory: bool,
}

impl ProjectionConfig {
    /// Synthetic defaults: at most 60 steps, stopping below a 0.005 move.
    pub fn synthetic() -> Self {
        Self {
            alpha: 0.15,
            beta: 0.1,
            num_steps: 60,
            convergence_tol: 0.005,
            record_trajectory: false,
        }
    }

    /// Four latent steps for image restoration.
    pub fn restoration() -> Self {
        Self {
            num_steps: 4,
            convergence_tol: 0.0,
            ..Self::synthetic()
        }
    }

    /// Sixteen latent steps for generation from noise.
    pub fn generation() -> Self {
        Self {
            num_steps: 16,
            ..Self::restoration()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0 && self.beta >= 0.0 && self.alpha + self.beta < 1.0;
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "projection needs 0 < alpha, 0 <= beta, alpha + beta < 1; got alpha {} beta {}",
                self.alpha, self.beta
            )));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidConfig("num_steps must be at least 1".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "convergence_tol must be >= 0, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    MaxSteps,
    Tolerance,
    /// Neither the kernel mean nor the distance direction was available.
    ScoreUnderflowFallbackExhausted,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::MaxSteps => "max_steps",
            Termination::Tolerance => "tolerance",
            Termination::ScoreUnderflowFallbackExhausted => "fallback_exhausted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Full,
    /// Kernel mass underflowed; distance step only.
    DistanceOnly,
    /// Distance gradient vanished; kernel step only.
    KernelOnly,
    /// Neither branch available; the point is returned unchanged.
    Stalled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Every iterate with `record_trajectory`, otherwise the first and last.
    pub iterates: Vec<Vec<f64>>,
    /// Distance-field value at each entry of `iterates`.
    pub distances: Vec<f64>,
    pub terminated_by: Termination,
    pub steps: usize,
    pub distance_only_steps: usize,
    pub kernel_only_steps: usize,
}

impl Trajectory {
    pub fn initial_distance(&self) -> f64 {
        self.distances[0]
    }

    pub fn final_distance(&self) -> f64 {
        *self.distances.last().expect("trajectory is never empty")
    }
}

/// One update. `kernel_mean` supplies `G_bar` or `z_bar` at `x`; it is not
/// called when `beta` is zero.
pub fn projection_step<F, M>(x: &[f64], field: &F, mut kernel_mean: M, cfg: &ProjectionConfig) -> Result<(Vec<f64>, StepKind)>
where
    F: DistanceField + ?Sized,
    M: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mean = if cfg.beta == 0.0 {
        None
    } else {
        match kernel_mean(x) {
            Ok(m) => Some(m),
            Err(Error::ScoreUnderflow { .. }) => None,
            Err(e) => return Err(e),
        }
    };
    let dir = match normalized_descent_direction(field, x) {
        Ok(d) => Some(d),
        Err(Error::DegenerateGradient { .. }) => None,
        Err(e) => return Err(e),
    };
    let kind = match (mean.is_some(), dir.is_some()) {
        (true, true) => StepKind::Full,
        // with beta = 0 the kernel branch was never wanted
        (false, true) if cfg.beta == 0.0 => StepKind::Full,
        (false, true) => StepKind::DistanceOnly,
        (true, false) => StepKind::KernelOnly,
        (false, false) => StepKind::Stalled,
    };
    let mut next = x.to_vec();
    if let Some(m) = &mean {
        for (n, (xi, mi)) in next.iter_mut().zip(x.iter().zip(m)) {
            // (1 - β) x + β m, written to be exact when m = x
            *n = xi + cfg.beta * (mi - xi);
        }
    }
    if let Some(u) = &dir {
        let d = field.distance(x)?;
        for (n, ui) in next.iter_mut().zip(u) {
            *n -= cfg.alpha * d * ui;
        }
    }
    Ok((next, kind))
}

/// Iterates [`projection_step`] from `x0` until the budget is spent, a move
/// is shorter than the tolerance, or no branch is available.
pub fn iterate<F, M>(x0: &[f64], field: &F, mut kernel_mean: M, cfg: &ProjectionConfig) -> Result<(Vec<f64>, Trajectory)>
where
    F: DistanceField + ?Sized,
    M: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut x = x0.to_vec();
    let mut traj = Trajectory {
        iterates: alloc::vec![x.clone()],
        distances: alloc::vec![field.distance(&x)?],
        terminated_by: Termination::MaxSteps,
        steps: 0,
        distance_only_steps: 0,
        kernel_only_steps: 0,
    };
    for _ in 0..cfg.num_steps {
        let (next, kind) = projection_step(&x, field, &mut kernel_mean, cfg)?;
        match kind {
            StepKind::Stalled => {
                traj.terminated_by = Termination::ScoreUnderflowFallbackExhausted;
                break;
            }
            StepKind::DistanceOnly => traj.distance_only_steps += 1,
            StepKind::KernelOnly => traj.kernel_only_steps += 1,
            StepKind::Full => {}
        }
        traj.steps += 1;
        let moved = linalg::distance(&next, &x);
        x = next;
        if cfg.record_trajectory {
            traj.iterates.push(x.clone());
            traj.distances.push(field.distance(&x)?);
        }
        if moved < cfg.convergence_tol {
            traj.terminated_by = Termination::Tolerance;
            break;
        }
    }
    if !cfg.record_trajectory {
        traj.iterates.push(x.clone());
        traj.distances.push(field.distance(&x)?);
    }
    Ok((x, traj))
}

fn require(model: &ManifoldModel, space: Space) -> Result<()> {
    if model.space != space {
        return Err(Error::InvalidConfig(format!(
            "this loop needs a {} model, got {}",
            space.name(),
            model.space.name()
        )));
    }
    Ok(())
}

/// A single ambient update with `G_bar` taken from `bank`.
pub fn mppm_step(x: &[f64], model: &ManifoldModel, bank: &SampleBank, cfg: &ProjectionConfig) -> Result<(Vec<f64>, StepKind)> {
    require(model, Space::Ambient)?;
    projection_step(x, model, |p| ambient_mean(p, model, bank), cfg)
}

/// Ambient restoration of `x0`, iterating in data space.
pub fn mppm_reconstruct(x0: &[f64], model: &ManifoldModel, bank: &SampleBank, cfg: &ProjectionConfig) -> Result<(Vec<f64>, Trajectory)> {
    require(model, Space::Ambient)?;
    iterate(x0, model, |p| ambient_mean(p, model, bank), cfg)
}

/// `G_bar(p)`; large anchor sets are cut down around the code `F(p)`.
fn ambient_mean(p: &[f64], model: &ManifoldModel, bank: &SampleBank) -> Result<Vec<f64>> {
    let code = model.encoder.predict(p)?;
    bank.g_bar(p, model.sigma_d, Some(&code))
}

/// A single latent update with the kernel mean `z_bar` of `kernel`.
pub fn lmppm_step(z: &[f64], model: &ManifoldModel, kernel: &KernelDensity, cfg: &ProjectionConfig) -> Result<(Vec<f64>, StepKind)> {
    require(model, Space::Latent)?;
    projection_step(z, model, |p| kernel.z_bar(p), cfg)
}

/// Latent restoration: encode, iterate in latent space, decode. The
/// trajectory holds latent iterates.
pub fn lmppm_reconstruct(x0: &[f64], model: &ManifoldModel, kernel: &KernelDensity, cfg: &ProjectionConfig) -> Result<(Vec<f64>, Trajectory)> {
    require(model, Space::Latent)?;
    let z0 = model.encoder.predict(x0)?;
    let (z, traj) = iterate(&z0, model, |p| kernel.z_bar(p), cfg)?;
    Ok((model.decoder.predict(&z)?, traj))
}

/// The single-pass autoencoder baseline `G(F(x))`.
pub fn dae_restore(model: &ManifoldModel, x: &[f64]) -> Result<Vec<f64>> {
    model.reconstruct(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub noise: Vec<f64>,
    pub output: Vec<f64>,
    pub trajectory: Trajectory,
}

/// Per-pixel mean and standard deviation of the generation noise.
pub const NOISE_MEAN: f64 = 0.5;
pub const NOISE_STD: f64 = 0.5;

/// Runs [`lmppm_reconstruct`] from `count` images of i.i.d.
/// `N(NOISE_MEAN, NOISE_STD^2)` pixels.
pub fn generate(model: &ManifoldModel, kernel: &KernelDensity, cfg: &ProjectionConfig, rng: &mut SplitRng, count: usize) -> Result<Vec<Generated>> {
    require(model, Space::Latent)?;
    let dim = model.ambient_dim();
    (0..count)
        .map(|_| {
            let noise: Vec<f64> = (0..dim).map(|_| NOISE_MEAN + NOISE_STD * rng.normal()).collect();
            let (output, trajectory) = lmppm_reconstruct(&noise, model, kernel, cfg)?;
            Ok(Generated { noise, output, trajectory })
        })
        .collect()
}

/// Restores every row of `inputs` with [`mppm_reconstruct`].
pub fn mppm_reconstruct_all(inputs: &Matrix, model: &ManifoldModel, bank: &SampleBank, cfg: &ProjectionConfig) -> Result<(Matrix, Vec<Trajectory>)> {
    let mut out = Matrix::zeros(inputs.rows(), inputs.cols());
    let mut trajs = Vec::with_capacity(inputs.rows());
    for (i, x) in inputs.iter_rows().enumerate() {
        let (y, t) = mppm_reconstruct(x, model, bank, cfg)?;
        out.row_mut(i).copy_from_slice(&y);
        trajs.push(t);
    }
    Ok((out, trajs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::circle::UnitCircle;
    use crate::networks::{ArchitectureSpec, NetSpec};
    use crate::nn::{Activation, DenseLayer, MlpNetwork};
    use alloc::vec;

    fn no_mean(_: &[f64]) -> Result<Vec<f64>> {
        Err(Error::ScoreUnderflow { log_mass: f64::NEG_INFINITY })
    }

    fn cfg(alpha: f64, beta: f64, steps: usize, tol: f64) -> ProjectionConfig {
        ProjectionConfig {
            alpha,
            beta,
            num_steps: steps,
            convergence_tol: tol,
            record_trajectory: true,
        }
    }

    #[test]
    fn config_bounds() {
        assert!(ProjectionConfig::synthetic().validate().is_ok());
        assert!(cfg(0.0, 0.1, 1, 0.0).validate().is_err());
        assert!(cfg(0.5, 0.5, 1, 0.0).validate().is_err());
        assert!(cfg(0.1, -0.1, 1, 0.0).validate().is_err());
        assert!(cfg(0.1, 0.1, 0, 0.0).validate().is_err());
        assert!(cfg(0.1, 0.0, 1, 0.0).validate().is_ok());
    }

    #[test]
    fn exact_circle_step_arithmetic() {
        let (x, kind) = projection_step(&[2.0, 0.0, 0.0], &UnitCircle, no_mean, &cfg(0.15, 0.0, 1, 0.0)).unwrap();
        assert_eq!(x, vec![1.85, 0.0, 0.0]);
        assert_eq!(kind, StepKind::Full);
    }

    #[test]
    fn exact_circle_distance_contracts_geometrically() {
        let c = cfg(0.15, 0.0, 40, 0.0);
        let (_, t) = iterate(&[0.4, 1.9, -0.7], &UnitCircle, no_mean, &c).unwrap();
        assert_eq!(t.terminated_by, Termination::MaxSteps);
        assert_eq!(t.distances.len(), 41);
        for w in t.distances.windows(2) {
            assert!((w[1] - 0.85 * w[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn single_step_budget_equals_one_step() {
        let c = cfg(0.2, 0.3, 1, 0.0);
        let mean = |_: &[f64]| Ok(vec![0.0, 1.0, 0.0]);
        let (a, _) = projection_step(&[1.5, 0.5, 0.2], &UnitCircle, mean, &c).unwrap();
        let (b, t) = iterate(&[1.5, 0.5, 0.2], &UnitCircle, mean, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(t.steps, 1);
    }

    #[test]
    fn on_manifold_fixed_point() {
        let p = [0.6, 0.8, 0.0];
        let (x, kind) = projection_step(&p, &UnitCircle, |q: &[f64]| Ok(q.to_vec()), &cfg(0.15, 0.1, 1, 0.0)).unwrap();
        assert_eq!(x, p.to_vec());
        // the exact circle reports a zero gradient on the circle itself
        assert_eq!(kind, StepKind::KernelOnly);
    }

    #[test]
    fn fallbacks() {
        let c = cfg(0.15, 0.1, 1, 0.0);
        // underflow -> pure distance step
        let (x, kind) = projection_step(&[2.0, 0.0, 0.0], &UnitCircle, no_mean, &c).unwrap();
        assert_eq!((x, kind), (vec![1.85, 0.0, 0.0], StepKind::DistanceOnly));
        // degenerate gradient on the axis -> pure kernel step
        let (x, kind) = projection_step(&[0.0, 0.0, 0.0], &UnitCircle, |_: &[f64]| Ok(vec![1.0, 0.0, 0.0]), &c).unwrap();
        assert_eq!(kind, StepKind::KernelOnly);
        assert!((x[0] - 0.1).abs() < 1e-15);
        // neither -> unchanged, loop stops
        let (x, t) = iterate(&[0.0, 0.0, 0.0], &UnitCircle, no_mean, &cfg(0.15, 0.1, 5, 0.0)).unwrap();
        assert_eq!(x, vec![0.0; 3]);
        assert_eq!(t.terminated_by, Termination::ScoreUnderflowFallbackExhausted);
    }

    #[test]
    fn tolerance_stops_the_loop() {
        let c = cfg(0.5, 0.0, 100, 1e-3);
        let (_, t) = iterate(&[3.0, 0.0, 0.0], &UnitCircle, no_mean, &c).unwrap();
        assert_eq!(t.terminated_by, Termination::Tolerance);
        assert!(t.steps < 100);
    }

    #[test]
    fn kernel_pull_bends_the_path_toward_the_dense_arc() {
        use crate::data::circle::{sample_angles, CircleDatasetSpec};
        use crate::kernel::{KernelDensity, SampleBank};
        let spec = CircleDatasetSpec::half_circle(300, 0.3);
        let angles = sample_angles(&spec, &mut SplitRng::new(1)).unwrap();
        let anchors = Matrix::from_vec(angles.len(), 1, angles).unwrap();
        let k = KernelDensity::new(anchors, 0.1, 8).unwrap();
        let bank = SampleBank::draw(&UnitCircle, &k, &mut SplitRng::new(2)).unwrap();
        let t0 = 0.6;
        let x0 = [1.5 * libm::cos(t0), 1.5 * libm::sin(t0), 0.0];
        let (x, _) = iterate(&x0, &UnitCircle, |p| bank.g_bar(p, 0.3, None), &ProjectionConfig::synthetic()).unwrap();
        let azimuth = libm::atan2(x[1], x[0]);
        // the orthogonal projection keeps azimuth t0; the density sits at 0
        assert!(azimuth < t0 - 0.01 && azimuth > 0.0, "{azimuth}");
    }

    fn linear_field(w: &[f64], b: f64) -> MlpNetwork {
        let layer = DenseLayer::new(Matrix::from_vec(1, w.len(), w.to_vec()).unwrap(), vec![b], Activation::Identity, 0.0).unwrap();
        MlpNetwork::new(vec![layer]).unwrap()
    }

    fn latent_model(distance: MlpNetwork, seed: u64) -> ManifoldModel {
        let spec = ArchitectureSpec {
            encoder: NetSpec::mlp(&[4, 6, 2], Activation::Relu, Activation::Identity, 0.0),
            decoder: NetSpec::mlp(&[2, 6, 4], Activation::Relu, Activation::Sigmoid, 0.0),
            distance: NetSpec::mlp(&[2, 1], Activation::Identity, Activation::Identity, 0.0),
            latent_dim: 2,
        };
        let mut m = ManifoldModel::build(&spec, Space::Latent, 0.4, seed).unwrap();
        m.distance_net = distance;
        m
    }

    #[test]
    fn latent_zero_distance_fixed_point() {
        // D(z) = z0 + z1 - 1 vanishes at (0.25, 0.75)
        let m = latent_model(linear_field(&[1.0, 1.0], -1.0), 0);
        let k = KernelDensity::new(Matrix::from_vec(1, 2, vec![5.0, 5.0]).unwrap(), 1.0, 1).unwrap();
        let z = [0.25, 0.75];
        let (next, _) = lmppm_step(&z, &m, &k, &cfg(0.15, 0.0, 1, 0.0)).unwrap();
        assert_eq!(next, z.to_vec());
    }

    #[test]
    fn latent_single_anchor_blend() {
        let m = latent_model(linear_field(&[0.3, -0.2], 0.4), 1);
        let z0 = [1.0, -2.0];
        let k = KernelDensity::new(Matrix::from_vec(1, 2, z0.to_vec()).unwrap(), 0.7, 1).unwrap();
        let z = [0.3, 0.9];
        let (next, _) = lmppm_step(&z, &m, &k, &cfg(1e-15, 0.1, 1, 0.0)).unwrap();
        for j in 0..2 {
            assert!((next[j] - (0.9 * z[j] + 0.1 * z0[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_step_matches_direct_recomputation() {
        let mut rng = SplitRng::new(3);
        let dist = NetSpec::mlp(&[2, 5, 1], Activation::Relu, Activation::Identity, 0.0)
            .build(&mut rng)
            .unwrap();
        let m = latent_model(dist, 2);
        let anchors = Matrix::from_vec(30, 2, (0..60).map(|_| rng.normal()).collect()).unwrap();
        let k = KernelDensity::new(anchors.clone(), 0.6, 1).unwrap();
        let c = cfg(0.15, 0.1, 1, 0.0);
        for _ in 0..10 {
            let z = [rng.normal(), rng.normal()];
            let (next, _) = lmppm_step(&z, &m, &k, &c).unwrap();
            let zb = crate::kernel::z_bar(&z, &anchors, 0.6).unwrap();
            let d = m.distance_net.predict(&z).unwrap()[0];
            let g = m.distance_net.input_vjp(&z, &[1.0]).unwrap();
            let n = libm::sqrt(g[0] * g[0] + g[1] * g[1]);
            for j in 0..2 {
                let e = 0.9 * z[j] + 0.1 * zb[j] - 0.15 * d * g[j] / n;
                assert!((next[j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_bounded_and_deterministic() {
        let mut rng = SplitRng::new(4);
        let dist = NetSpec::mlp(&[2, 5, 1], Activation::Relu, Activation::Identity, 0.0)
            .build(&mut rng)
            .unwrap();
        let m = latent_model(dist, 5);
        let anchors = Matrix::from_vec(10, 2, (0..20).map(|_| rng.normal()).collect()).unwrap();
        let k = KernelDensity::new(anchors, 0.6, 1).unwrap();
        let c = ProjectionConfig::generation();
        assert!(generate(&m, &k, &c, &mut SplitRng::new(1), 0).unwrap().is_empty());
        let a = generate(&m, &k, &c, &mut SplitRng::new(9), 5).unwrap();
        let b = generate(&m, &k, &c, &mut SplitRng::new(9), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flat_map(|g| &g.output).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn loops_check_the_model_space() {
        let m = latent_model(linear_field(&[1.0, 0.0], 0.0), 0);
        let k = KernelDensity::new(Matrix::from_vec(1, 1, vec![0.0]).unwrap(), 1.0, 1).unwrap();
        let bank = SampleBank::draw(&UnitCircle, &k, &mut SplitRng::new(0)).unwrap();
        assert!(mppm_reconstruct(&[0.0; 4], &m, &bank, &ProjectionConfig::synthetic()).is_err());
    }
}
