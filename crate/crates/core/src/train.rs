//! Joint training of the encoder, decoder and distance network.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{ambient_loss, latent_loss, LatentAnchorSet, LossConfig, LossGradients, NearestIndex, TrainBatch};
use crate::networks::{ManifoldModel, Space};
use crate::nn::{adam_step, AdamConfig, AdamState, MlpNetwork};
use crate::rng::SplitRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without an improved epoch loss before stopping; 0 disables.
    pub patience: usize,
    /// Standard deviation of the training corruption.
    pub sigma_d: f64,
    /// Clip corrupted samples to `[0, 1]`, the range of image data.
    pub clip_corruption: bool,
    pub loss: LossConfig,
    /// Shared by encoder and decoder.
    pub autoencoder_optim: AdamConfig,
    pub distance_optim: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Circle benchmark settings: 500 epochs of batch 550, Adam at 1e-3 with
    /// weight decay 1e-4 for all three networks, patience 100.
    pub fn synthetic(sigma_d: f64, seed: u64) -> Self {
        let adam = AdamConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            ..AdamConfig::default()
        };
        Self {
            epochs: 500,
            batch_size: 550,
            patience: 100,
            sigma_d,
            clip_corruption: false,
            loss: LossConfig::default(),
            autoencoder_optim: adam,
            distance_optim: adam,
            seed,
        }
    }

    /// MNIST latent settings: 100 epochs of batch 128, autoencoder lr 1e-3,
    /// distance lr 3e-4, patience 8, clipped corruption.
    pub fn mnist(sigma_d: f64, seed: u64) -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            patience: 8,
            sigma_d,
            clip_corruption: true,
            loss: LossConfig::default(),
            autoencoder_optim: AdamConfig::default(),
            distance_optim: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.sigma_d > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma_d must be positive, got {}", self.sigma_d)));
        }
        for (name, c) in [("autoencoder", &self.autoencoder_optim), ("distance", &self.distance_optim)] {
            let ok = c.lr >= 0.0 && (0.0..1.0).contains(&c.beta1) && (0.0..1.0).contains(&c.beta2) && c.eps > 0.0 && c.weight_decay >= 0.0;
            if !ok {
                return Err(Error::InvalidConfig(format!("{name} optimizer settings out of range: {c:?}")));
            }
        }
        self.loss.weights.validate()
    }
}

/// Mean over the epoch's batches of each raw term and of the weighted total.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub terms: [f64; 6],
    pub total: f64,
    pub degenerate: usize,
    pub negative_distances: usize,
}

pub trait TrainObserver {
    fn on_epoch(&mut self, record: &EpochRecord, model: &ManifoldModel) -> Result<()>;
}

impl TrainObserver for () {
    fn on_epoch(&mut self, _: &EpochRecord, _: &ManifoldModel) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&EpochRecord, &ManifoldModel) -> Result<()>> TrainObserver for F {
    fn on_epoch(&mut self, record: &EpochRecord, model: &ManifoldModel) -> Result<()> {
        self(record, model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest loss.
    pub model: ManifoldModel,
    pub history: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct Optimizers {
    encoder: AdamState,
    decoder: AdamState,
    distance: AdamState,
}

fn step(net: &mut MlpNetwork, grads: &[f64], state: &mut AdamState) -> Result<()> {
    let mut p = net.params_flat();
    adam_step(&mut p, grads, state)?;
    net.set_params_flat(&p)
}

impl Optimizers {
    fn apply(&mut self, model: &mut ManifoldModel, g: &LossGradients) -> Result<()> {
        step(&mut model.encoder, &g.encoder, &mut self.encoder)?;
        step(&mut model.decoder, &g.decoder, &mut self.decoder)?;
        step(&mut model.distance_net, &g.distance, &mut self.distance)
    }
}

/// Trains `model` on the rows of `clean`.
///
/// Each epoch shuffles the rows, cuts them into batches (the last may be
/// short), corrupts a permuted copy of each batch with `N(0, sigma_d^2)` and
/// takes one Adam step per batch. Latent models refresh their anchor codes at
/// the start of every epoch. The returned model holds the parameters of the
/// best epoch.
pub fn train<O: TrainObserver>(mut model: ManifoldModel, clean: &Matrix, cfg: &TrainConfig, observer: &mut O) -> Result<TrainOutcome> {
    cfg.validate()?;
    if clean.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if clean.cols() != model.ambient_dim() {
        return Err(Error::Dimension {
            context: "training data",
            expected: model.ambient_dim(),
            got: clean.cols(),
        });
    }
    let index = NearestIndex::new(clean)?;
    let mut rng = SplitRng::new(cfg.seed);
    let mut opt = Optimizers {
        encoder: AdamState::new(model.encoder.param_count(), cfg.autoencoder_optim),
        decoder: AdamState::new(model.decoder.param_count(), cfg.autoencoder_optim),
        distance: AdamState::new(model.distance_net.param_count(), cfg.distance_optim),
    };
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..clean.rows()).collect();

    for epoch in 1..=cfg.epochs {
        let mut epoch_rng = rng.split();
        let anchors = match model.space {
            Space::Latent => Some(LatentAnchorSet::compute(&model, clean, epoch)?),
            Space::Ambient => None,
        };
        epoch_rng.shuffle(&mut order);
        let mut rec = EpochRecord {
            epoch,
            ..EpochRecord::default()
        };
        let mut batches = 0usize;
        for rows in order.chunks(cfg.batch_size) {
            let batch = TrainBatch::sample_with(&index, rows, cfg.sigma_d, cfg.clip_corruption, &mut epoch_rng)?;
            let dropout = Some(epoch_rng.split());
            let eval = match &anchors {
                Some(a) => latent_loss(&model, &batch, a, &cfg.loss, dropout)?,
                None => ambient_loss(&model, &batch, &cfg.loss, dropout)?,
            };
            let t = &eval.terms;
            let finite = t.total.is_finite()
                && eval
                    .grads
                    .encoder
                    .iter()
                    .chain(&eval.grads.decoder)
                    .chain(&eval.grads.distance)
                    .all(|g| g.is_finite());
            if !finite {
                return Err(Error::NonFiniteLoss { epoch });
            }
            for k in 0..6 {
                rec.terms[k] += t.terms[k];
            }
            rec.total += t.total;
            rec.degenerate += t.degenerate;
            rec.negative_distances += t.negative_distances;
            batches += 1;
            opt.apply(&mut model, &eval.grads)?;
        }
        let n = batches as f64;
        rec.terms.iter_mut().for_each(|v| *v /= n);
        rec.total /= n;
        observer.on_epoch(&rec, &model)?;
        let improved = rec.total < best_loss;
        history.push(rec);
        if improved {
            best_loss = history[history.len() - 1].total;
            best = model.clone();
            best_epoch = epoch;
        } else if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Means of consecutive non-overlapping windows of the epoch totals.
pub fn window_means(history: &[EpochRecord], window: usize) -> Vec<f64> {
    history
        .chunks_exact(window.max(1))
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::circle::{sample_circle, CircleDatasetSpec};
    use crate::networks::{ArchitectureSpec, NetSpec};
    use crate::nn::Activation;

    fn small_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            encoder: NetSpec::mlp(&[3, 16, 2], Activation::Relu, Activation::Identity, 0.0),
            decoder: NetSpec::mlp(&[2, 16, 3], Activation::Relu, Activation::Identity, 0.0),
            distance: NetSpec::mlp(&[3, 16, 1], Activation::Relu, Activation::Identity, 0.2),
            latent_dim: 2,
        }
    }

    fn circle(n: usize) -> Matrix {
        sample_circle(&CircleDatasetSpec::half_circle(n, 0.6), &mut SplitRng::new(0)).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            ..TrainConfig::synthetic(0.2, 11)
        }
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let m = ManifoldModel::build(&small_spec(), Space::Ambient, 0.2, 1).unwrap();
        let out = train(m.clone(), &circle(50), &quick_cfg(0), &mut ()).unwrap();
        assert_eq!(out.model, m);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let m = ManifoldModel::build(&small_spec(), Space::Ambient, 0.2, 1).unwrap();
        let data = circle(128);
        let a = train(m.clone(), &data, &quick_cfg(30), &mut ()).unwrap();
        let b = train(m, &data, &quick_cfg(30), &mut ()).unwrap();
        assert_eq!(a, b);
        let h = &a.history;
        assert!(h.last().unwrap().total < h[0].total);
    }

    #[test]
    fn observer_sees_every_epoch() {
        let m = ManifoldModel::build(&small_spec(), Space::Ambient, 0.2, 2).unwrap();
        let mut seen = Vec::new();
        let mut obs = |r: &EpochRecord, _: &ManifoldModel| {
            seen.push(r.epoch);
            Ok(())
        };
        train(m, &circle(40), &quick_cfg(3), &mut obs).unwrap();
        assert_eq!(seen, [1, 2, 3]);
    }

    #[test]
    fn early_stopping_restores_the_best_epoch() {
        let m = ManifoldModel::build(&small_spec(), Space::Ambient, 0.2, 3).unwrap();
        let mut cfg = quick_cfg(200);
        cfg.patience = 2;
        // a large step size makes the loss bounce
        cfg.autoencoder_optim.lr = 0.3;
        cfg.distance_optim.lr = 0.3;
        let out = train(m, &circle(64), &cfg, &mut ()).unwrap();
        assert!(out.stopped_early);
        let best = out.history[out.best_epoch - 1].total;
        assert!(out.history.iter().all(|r| r.total >= best));
        assert_eq!(out.history.len(), out.best_epoch + 2);
    }

    #[test]
    fn latent_training_runs() {
        let spec = ArchitectureSpec {
            distance: NetSpec::mlp(&[2, 8, 1], Activation::Relu, Activation::Identity, 0.2),
            ..small_spec()
        };
        let m = ManifoldModel::build(&spec, Space::Latent, 0.2, 4).unwrap();
        let out = train(m, &circle(64), &quick_cfg(3), &mut ()).unwrap();
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = ManifoldModel::build(&small_spec(), Space::Ambient, 0.2, 1).unwrap();
        assert!(matches!(
            train(m.clone(), &Matrix::zeros(0, 3), &quick_cfg(1), &mut ()),
            Err(Error::EmptyDataset)
        ));
        assert!(train(m.clone(), &Matrix::zeros(4, 2), &quick_cfg(1), &mut ()).is_err());
        let mut cfg = quick_cfg(1);
        cfg.batch_size = 0;
        assert!(train(m, &circle(4), &cfg, &mut ()).is_err());
    }

    #[test]
    fn window_means_of_a_ramp() {
        let h: Vec<EpochRecord> = (0..6)
            .map(|i| EpochRecord {
                epoch: i + 1,
                total: i as f64,
                ..EpochRecord::default()
            })
            .collect();
        assert_eq!(window_means(&h, 2), [0.5, 2.5, 4.5]);
    }
}
