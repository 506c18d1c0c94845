use mppm_core::data::circle::{add_noise, sample_angles, sample_circle, CircleDatasetSpec, UnitCircle};
use mppm_core::data::metrics::{max_circle_deviation, mean_sq_circle_deviation};
use mppm_core::kernel::{KernelDensity, SampleBank};
use mppm_core::linalg::Matrix;
use mppm_core::networks::{ArchitectureSpec, ManifoldModel, NetSpec, Space};
use mppm_core::nn::Activation;
use mppm_core::projection::{iterate, ProjectionConfig, Termination};
use mppm_core::rng::SplitRng;
use mppm_core::train::{train, window_means, TrainConfig};

fn restore_exact(noisy: &Matrix, bank: &SampleBank, sigma: f64) -> Matrix {
    let cfg = ProjectionConfig::synthetic();
    let mut out = Matrix::zeros(noisy.rows(), 3);
    for (i, x) in noisy.iter_rows().enumerate() {
        let (y, traj) = iterate(x, &UnitCircle, |p| bank.g_bar(p, sigma, None), &cfg).unwrap();
        assert_ne!(traj.terminated_by, Termination::ScoreUnderflowFallbackExhausted);
        out.row_mut(i).copy_from_slice(&y);
    }
    out
}

#[test]
fn exact_geometry_pulls_noisy_points_onto_the_circle() {
    let spec = CircleDatasetSpec::half_circle(300, 0.5);
    let angles = sample_angles(&spec, &mut SplitRng::new(1)).unwrap();
    let anchors = Matrix::from_vec(angles.len(), 1, angles).unwrap();
    let kernel = KernelDensity::new(anchors, 0.05, 4).unwrap();
    let bank = SampleBank::draw(&UnitCircle, &kernel, &mut SplitRng::new(2)).unwrap();

    let clean = sample_circle(&CircleDatasetSpec::half_circle(40, 0.5), &mut SplitRng::new(3)).unwrap();
    let noisy = add_noise(&clean, 0.2, &mut SplitRng::new(4));
    let restored = restore_exact(&noisy, &bank, 0.2);
    let before = max_circle_deviation(&noisy).unwrap();
    let after = max_circle_deviation(&restored).unwrap();
    assert!(after < 0.02 && after < before / 10.0, "{before} -> {after}");
    assert!(mean_sq_circle_deviation(&restored).unwrap() < 1e-4);
}

fn small_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        encoder: NetSpec::mlp(&[3, 16, 4], Activation::Relu, Activation::Identity, 0.0),
        decoder: NetSpec::mlp(&[4, 16, 3], Activation::Relu, Activation::Identity, 0.0),
        distance: NetSpec::mlp(&[3, 32, 16, 1], Activation::Relu, Activation::Identity, 0.2),
        latent_dim: 4,
    }
}

#[test]
fn short_ambient_training_lowers_the_loss_and_is_reproducible() {
    let clean = sample_circle(&CircleDatasetSpec::half_circle(400, 0.5), &mut SplitRng::new(0)).unwrap();
    let mut cfg = TrainConfig::synthetic(0.2, 9);
    cfg.epochs = 60;
    cfg.batch_size = 100;
    let run = || {
        let model = ManifoldModel::build(&small_spec(), Space::Ambient, cfg.sigma_d, 9).unwrap();
        train(model, &clean, &cfg, &mut ()).unwrap()
    };
    let a = run();
    let w = window_means(&a.history, 20);
    assert_eq!(w.len(), 3);
    assert!(w[2] < w[0], "{w:?}");
    assert!(a.best_epoch > 0);
    assert_eq!(a, run());
}

#[test]
fn observer_sees_every_epoch_in_order() {
    let clean = sample_circle(&CircleDatasetSpec::half_circle(60, 0.5), &mut SplitRng::new(0)).unwrap();
    let mut cfg = TrainConfig::synthetic(0.2, 1);
    cfg.epochs = 5;
    cfg.batch_size = 25;
    let model = ManifoldModel::build(&small_spec(), Space::Ambient, cfg.sigma_d, 1).unwrap();
    let mut seen = Vec::new();
    let out = train(model, &clean, &cfg, &mut |r: &mppm_core::train::EpochRecord, _: &ManifoldModel| {
        seen.push((r.epoch, r.total));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, out.history.iter().map(|r| (r.epoch, r.total)).collect::<Vec<_>>());
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
}
