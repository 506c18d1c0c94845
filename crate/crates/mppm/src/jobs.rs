//! The five commands. Each writes its artifacts and a manifest into the run
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use mppm_core::data::circle::{add_noise, sample_circle, CircleDatasetSpec};
use mppm_core::data::degrade::{degrade, DegradationSpec};
use mppm_core::data::image::{GrayImage, ImageDataset};
use mppm_core::data::metrics::{max_circle_deviation, mean_sq_circle_deviation, mse, ssim};
use mppm_core::kernel::{KernelDensity, SampleBank};
use mppm_core::linalg::{self, Matrix};
use mppm_core::losses::{gradient_check, LatentAnchorSet, LossWeights, NearestIndex, TrainBatch};
use mppm_core::networks::{ArchitectureSpec, ManifoldModel, NetSpec, Space};
use mppm_core::nn::{Activation, GradCheckReport, Mode};
use mppm_core::projection::{dae_restore, generate, lmppm_reconstruct, mppm_reconstruct_all, Trajectory};
use mppm_core::rng::SplitRng;
use mppm_core::train::{train, EpochRecord};

use crate::checkpoint;
use crate::config::{CircleSettings, DataSettings, DegradationEntry, MnistSettings, RunConfig, Settings};
use crate::error::{Error, Result};
use crate::idx::{load_mnist, Split};
use crate::pgm::{montage, write_pgm};
use crate::runlog::{num, CsvWriter, Manifest};

pub const CHECKPOINT: &str = "model.ckpt";
pub const EPOCHS_CSV: &str = "epochs.csv";

/// Stream tags for [`SplitRng::fork`], one per use of randomness.
mod stream {
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const TEST_NOISE: u64 = 3;
    pub const SAMPLE_BANK: u64 = 4;
    pub const GENERATION: u64 = 5;
    pub const DEGRADATION: u64 = 6;
    pub const GRADCHECK: u64 = 7;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Reconstruct,
    Generate,
    Evaluate,
    GradCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Reconstruct => "reconstruct",
            Self::Generate => "generate",
            Self::Evaluate => "evaluate",
            Self::GradCheck => "gradcheck",
        }
    }

    fn needs_checkpoint(self) -> bool {
        matches!(self, Self::Reconstruct | Self::Generate | Self::Evaluate)
    }
}

/// Resolves the configuration, runs `command` and records the outcome in the
/// manifest.
pub fn run(command: Command, settings: &Settings, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::from_settings(settings)?;
    if command.needs_checkpoint() && checkpoint.is_none() {
        return Err(Error::Config(format!("{} needs --checkpoint", command.name())));
    }
    if let Some(p) = checkpoint {
        if !p.is_file() {
            return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = Manifest::begin(out, command.name(), settings)?;
    let outcome = match command {
        Command::Train => train_job(&cfg, out, &mut manifest),
        Command::Reconstruct => with_model(&cfg, checkpoint, |m, d| reconstruct_job(&cfg, m, d, out, &mut manifest)),
        Command::Generate => with_model(&cfg, checkpoint, |m, d| generate_job(&cfg, m, d, out, &mut manifest)),
        Command::Evaluate => with_model(&cfg, checkpoint, |m, d| evaluate_job(&cfg, m, d, out, &mut manifest)),
        Command::GradCheck => gradcheck_job(&cfg, out, &mut manifest),
    };
    manifest.finish(&outcome)?;
    outcome
}

fn with_model<T>(cfg: &RunConfig, path: Option<&Path>, f: impl FnOnce(&ManifoldModel, &Data) -> Result<T>) -> Result<T> {
    let path = path.expect("checked by run");
    let mut model = checkpoint::load(path)?;
    if model.space != cfg.space || model.ambient_dim() != cfg.architecture.ambient_dim() {
        return Err(Error::format(
            path,
            format!(
                "checkpoint is a {} model on {} values, config expects {} on {}",
                model.space.name(),
                model.ambient_dim(),
                cfg.space.name(),
                cfg.architecture.ambient_dim()
            ),
        ));
    }
    model.set_mode(Mode::Eval);
    let data = load_data(cfg)?;
    f(&model, &data)
}

/// Training and test data of a run.
#[derive(Clone, Debug, PartialEq)]
pub enum Data {
    Circle { train: Matrix, test: Matrix },
    Mnist { train: ImageDataset, test: ImageDataset },
}

impl Data {
    pub fn train_matrix(&self) -> &Matrix {
        match self {
            Self::Circle { train, .. } => train,
            Self::Mnist { train, .. } => &train.pixels,
        }
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let fork = |tag| SplitRng::fork(cfg.seed, tag);
    match &cfg.data {
        DataSettings::Circle(c) => {
            let test_spec = CircleDatasetSpec {
                count: c.test_count,
                sigma_theta: c.test_sigma_theta,
                ..c.train
            };
            Ok(Data::Circle {
                train: sample_circle(&c.train, &mut fork(stream::TRAIN_DATA))?,
                test: sample_circle(&test_spec, &mut fork(stream::TEST_DATA))?,
            })
        }
        DataSettings::Mnist(m) => load_mnist_data(m, &fork),
    }
}

fn load_mnist_data(m: &MnistSettings, fork: &dyn Fn(u64) -> SplitRng) -> Result<Data> {
    let train = load_mnist(&m.dir, Split::Train)?;
    let train = if m.train_count == 0 || m.train_count == train.len() {
        train
    } else {
        train.subset(m.train_count, &mut fork(stream::TRAIN_DATA))?
    };
    let test = load_mnist(&m.dir, Split::Test)?.subset(m.test_count, &mut fork(stream::TEST_DATA))?;
    Ok(Data::Mnist { train, test })
}

fn train_job(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<()> {
    let data = load_data(cfg)?;
    let model = ManifoldModel::build(&cfg.architecture, cfg.space, cfg.train.sigma_d, cfg.seed)?;
    let log_path = out.join(EPOCHS_CSV);
    manifest.add_artifact("epoch_log", &log_path);
    let mut log = CsvWriter::create(
        &log_path,
        &[
            "epoch",
            "term1",
            "term2",
            "term3",
            "term4",
            "term5",
            "term6",
            "total",
            "degenerate",
            "negative_distances",
        ],
    )?;
    let mut last: Option<EpochRecord> = None;
    let mut log_error = None;
    let mut observer = |r: &EpochRecord, _: &ManifoldModel| {
        last = Some(r.clone());
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.terms.iter().map(|&t| num(t)));
        row.extend([num(r.total), r.degenerate.to_string(), r.negative_distances.to_string()]);
        log.row(&row).map_err(|e| {
            log_error = Some(e);
            mppm_core::Error::EmptyDataset
        })
    };
    let outcome = train(model, data.train_matrix(), &cfg.train, &mut observer);
    if let Some(e) = log_error {
        return Err(e);
    }
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ mppm_core::Error::NonFiniteLoss { .. }) => {
            let p = out.join("diagnostic.txt");
            let text = format!("{e}\nlast finite epoch: {last:?}\n");
            fs::write(&p, text).map_err(|err| Error::io(&p, err))?;
            manifest.add_artifact("diagnostic", &p);
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = out.join(CHECKPOINT);
    checkpoint::save(&ckpt, &outcome.model)?;
    manifest.add_artifact("checkpoint", &ckpt);
    let summary = out.join("train_summary.csv");
    let mut w = CsvWriter::create(&summary, &["epochs_run", "best_epoch", "best_total", "stopped_early"])?;
    let best_total = outcome.history.get(outcome.best_epoch.wrapping_sub(1)).map_or(f64::NAN, |r| r.total);
    w.row(&[
        outcome.history.len().to_string(),
        outcome.best_epoch.to_string(),
        num(best_total),
        outcome.stopped_early.to_string(),
    ])?;
    manifest.add_artifact("summary", &summary);
    Ok(())
}

/// Kernel over the latent codes of the training data.
pub fn build_kernel(cfg: &RunConfig, model: &ManifoldModel, data: &Data) -> Result<KernelDensity> {
    let codes = model.encode_batch(data.train_matrix())?;
    let mut kernel = match cfg.kernel.sigma_ker {
        Some(s) => KernelDensity::new(codes, s, cfg.kernel.n_samples)?,
        None => KernelDensity::with_median_bandwidth(codes, cfg.kernel.n_samples)?,
    };
    kernel.subsample_k = cfg.kernel.subsample_k;
    Ok(kernel)
}

/// Circle restoration results for one noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct CircleRun {
    pub noisy: Matrix,
    pub mppm: Matrix,
    pub dae: Matrix,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMetrics {
    pub max_deviation: f64,
    pub mean_sq_deviation: f64,
    pub mse: f64,
}

impl PointMetrics {
    pub fn of(points: &Matrix, clean: &Matrix) -> Result<Self> {
        Ok(Self {
            max_deviation: max_circle_deviation(points)?,
            mean_sq_deviation: mean_sq_circle_deviation(points)?,
            mse: mse(points.as_slice(), clean.as_slice())?,
        })
    }
}

pub fn restore_circle(cfg: &RunConfig, model: &ManifoldModel, data: &Data, sigma: f64, noise_tag: u64) -> Result<CircleRun> {
    let Data::Circle { test, .. } = data else {
        return Err(Error::Config("circle restoration on image data".into()));
    };
    let kernel = build_kernel(cfg, model, data)?;
    let bank = SampleBank::draw(model, &kernel, &mut SplitRng::fork(cfg.seed, stream::SAMPLE_BANK))?;
    let noisy = add_noise(test, sigma, &mut SplitRng::fork(cfg.seed, noise_tag));
    let (mppm, trajectories) = mppm_reconstruct_all(&noisy, model, &bank, &cfg.restoration)?;
    let mut dae = Matrix::zeros(noisy.rows(), noisy.cols());
    for (i, x) in noisy.iter_rows().enumerate() {
        dae.row_mut(i).copy_from_slice(&dae_restore(model, x)?);
    }
    Ok(CircleRun {
        noisy,
        mppm,
        dae,
        trajectories,
    })
}

/// Per-image restoration results for one degradation.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRun {
    pub degraded: Vec<GrayImage>,
    pub lmppm: Vec<GrayImage>,
    pub dae: Vec<GrayImage>,
    pub trajectories: Vec<Trajectory>,
}

/// Degrades every test image (one seed per image, drawn in order from the
/// run seed) and restores it with LMPPM and the DAE baseline.
pub fn restore_images(
    cfg: &RunConfig,
    model: &ManifoldModel,
    kernel: &KernelDensity,
    test: &ImageDataset,
    entry: &DegradationEntry,
) -> Result<ImageRun> {
    if test.is_empty() {
        return Err(mppm_core::Error::EmptyDataset.into());
    }
    let mut seeds = SplitRng::fork(cfg.seed, stream::DEGRADATION);
    let mut run = ImageRun {
        degraded: Vec::with_capacity(test.len()),
        lmppm: Vec::with_capacity(test.len()),
        dae: Vec::with_capacity(test.len()),
        trajectories: Vec::with_capacity(test.len()),
    };
    for i in 0..test.len() {
        let clean = test.image(i);
        let seed = seeds.next_u64();
        let degraded = match entry.kind {
            Some(kind) => degrade(&clean, &DegradationSpec { kind, seed })?,
            None => clean.clone(),
        };
        let (restored, traj) = lmppm_reconstruct(&degraded.pixels, model, kernel, &cfg.restoration)?;
        let dae = dae_restore(model, &degraded.pixels)?;
        run.lmppm.push(GrayImage::new(test.height, test.width, restored)?);
        run.dae.push(GrayImage::new(test.height, test.width, dae)?);
        run.degraded.push(degraded);
        run.trajectories.push(traj);
    }
    Ok(run)
}

fn reconstruct_job(cfg: &RunConfig, model: &ManifoldModel, data: &Data, out: &Path, manifest: &mut Manifest) -> Result<()> {
    match (data, &cfg.data) {
        (Data::Circle { test, .. }, DataSettings::Circle(c)) => reconstruct_circle(cfg, c, model, data, test, out, manifest),
        (Data::Mnist { test, .. }, DataSettings::Mnist(m)) => {
            let kernel = build_kernel(cfg, model, data)?;
            let entry = &m.degradation;
            let run = restore_images(cfg, model, &kernel, test, entry)?;
            let p = out.join("per_image.csv");
            let mut w = CsvWriter::create(
                &p,
                &[
                    "index",
                    "label",
                    "ssim_degraded",
                    "ssim_lmppm",
                    "ssim_dae",
                    "mse_degraded",
                    "mse_lmppm",
                    "mse_dae",
                    "steps",
                    "initial_distance",
                    "final_distance",
                ],
            )?;
            for i in 0..test.len() {
                let clean = test.image(i);
                let mut row = vec![i.to_string(), test.label(i).map_or(String::new(), |l| l.to_string())];
                for im in [&run.degraded[i], &run.lmppm[i], &run.dae[i]] {
                    row.push(num(ssim(im, &clean)?));
                }
                for im in [&run.degraded[i], &run.lmppm[i], &run.dae[i]] {
                    row.push(num(mse(&im.pixels, &clean.pixels)?));
                }
                let t = &run.trajectories[i];
                row.extend([t.steps.to_string(), num(t.initial_distance()), num(t.final_distance())]);
                w.row(&row)?;
            }
            manifest.add_artifact("per_image", &p);
            let k = cfg.montage_count.min(test.len());
            let originals: Vec<GrayImage> = (0..k).map(|i| test.image(i)).collect();
            for (name, images) in [
                ("original", &originals[..]),
                ("degraded", &run.degraded[..k]),
                ("restored", &run.lmppm[..k]),
                ("dae", &run.dae[..k]),
            ] {
                if images.is_empty() {
                    continue;
                }
                let p = out.join(format!("{name}.pgm"));
                write_pgm(&p, &montage(images, k, 1)?)?;
                manifest.add_artifact(name, &p);
            }
            Ok(())
        }
        _ => unreachable!("data follows the dataset setting"),
    }
}

fn reconstruct_circle(
    cfg: &RunConfig,
    c: &CircleSettings,
    model: &ManifoldModel,
    data: &Data,
    test: &Matrix,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<()> {
    let run = restore_circle(cfg, model, data, c.test_noise, stream::TEST_NOISE)?;
    let p = out.join("points.csv");
    let mut w = CsvWriter::create(
        &p,
        &[
            "index",
            "clean_x",
            "clean_y",
            "clean_z",
            "noisy_x",
            "noisy_y",
            "noisy_z",
            "mppm_x",
            "mppm_y",
            "mppm_z",
            "dae_x",
            "dae_y",
            "dae_z",
            "steps",
            "termination",
        ],
    )?;
    for i in 0..test.rows() {
        let mut row = vec![i.to_string()];
        for m in [test, &run.noisy, &run.mppm, &run.dae] {
            row.extend(m.row(i).iter().map(|&v| num(v)));
        }
        let t = &run.trajectories[i];
        row.extend([t.steps.to_string(), t.terminated_by.name().to_string()]);
        w.row(&row)?;
    }
    manifest.add_artifact("points", &p);
    let p = out.join("metrics.csv");
    let mut w = CsvWriter::create(&p, &["method", "max_deviation", "mean_sq_deviation", "mse"])?;
    for (name, m) in [("noisy", &run.noisy), ("dae", &run.dae), ("mppm", &run.mppm)] {
        let pm = PointMetrics::of(m, test)?;
        w.row(&[name.to_string(), num(pm.max_deviation), num(pm.mean_sq_deviation), num(pm.mse)])?;
    }
    manifest.add_artifact("metrics", &p);
    Ok(())
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub image: GrayImage,
    pub trajectory: Trajectory,
    pub nearest_anchor: usize,
    pub nearest_label: Option<u8>,
}

pub fn generate_samples(cfg: &RunConfig, model: &ManifoldModel, data: &Data) -> Result<Vec<GeneratedSample>> {
    let Data::Mnist { train, .. } = data else {
        return Err(Error::Config("generate needs an image dataset".into()));
    };
    if model.space != Space::Latent {
        return Err(Error::Config("generate needs a latent model".into()));
    }
    let kernel = build_kernel(cfg, model, data)?;
    let mut rng = SplitRng::fork(cfg.seed, stream::GENERATION);
    let generated = generate(model, &kernel, &cfg.generation, &mut rng, cfg.generate_count)?;
    generated
        .into_iter()
        .map(|g| {
            let z = g.trajectory.iterates.last().expect("trajectory is never empty");
            let nearest = nearest_row(&kernel.anchors, z);
            Ok(GeneratedSample {
                image: GrayImage::new(train.height, train.width, g.output)?,
                trajectory: g.trajectory,
                nearest_anchor: nearest,
                nearest_label: train.label(nearest),
            })
        })
        .collect()
}

fn nearest_row(m: &Matrix, p: &[f64]) -> usize {
    m.iter_rows()
        .map(|r| linalg::squared_distance(r, p))
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, d)| if d < best.1 { (i, d) } else { best })
        .0
}

fn generate_job(cfg: &RunConfig, model: &ManifoldModel, data: &Data, out: &Path, manifest: &mut Manifest) -> Result<()> {
    let samples = generate_samples(cfg, model, data)?;
    let p = out.join("generation.csv");
    let mut w = CsvWriter::create(
        &p,
        &[
            "index",
            "initial_distance",
            "final_distance",
            "ratio",
            "steps",
            "nearest_anchor",
            "nearest_label",
        ],
    )?;
    for (i, s) in samples.iter().enumerate() {
        let (d0, d1) = (s.trajectory.initial_distance(), s.trajectory.final_distance());
        w.row(&[
            i.to_string(),
            num(d0),
            num(d1),
            num(d1 / d0),
            s.trajectory.steps.to_string(),
            s.nearest_anchor.to_string(),
            s.nearest_label.map_or(String::new(), |l| l.to_string()),
        ])?;
    }
    manifest.add_artifact("generation", &p);
    if !samples.is_empty() {
        let images: Vec<GrayImage> = samples.iter().map(|s| s.image.clone()).collect();
        let p = out.join("generated.pgm");
        write_pgm(&p, &montage(&images, 10, 1)?)?;
        manifest.add_artifact("generated", &p);
    }
    Ok(())
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: &'static str,
    pub degradation: &'static str,
    pub severity: &'static str,
    pub parameter: f64,
    pub count: usize,
    pub mean_ssim: Option<f64>,
    pub mean_mse: f64,
    pub max_deviation: Option<f64>,
}

pub fn evaluate_rows(cfg: &RunConfig, model: &ManifoldModel, data: &Data) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    match data {
        Data::Circle { test, .. } => {
            for (k, entry) in cfg.degradations.iter().enumerate() {
                let sigma = match entry.kind {
                    Some(mppm_core::data::degrade::Degradation::GaussianNoise { sigma }) => sigma,
                    None => 0.0,
                    Some(other) => return Err(Error::Config(format!("circle data supports noise only, got {}", other.name()))),
                };
                let run = restore_circle(cfg, model, data, sigma, 100 + k as u64)?;
                for (method, m) in [("degraded", &run.noisy), ("dae", &run.dae), ("mppm", &run.mppm)] {
                    let pm = PointMetrics::of(m, test)?;
                    rows.push(EvalRow {
                        method,
                        degradation: entry.name(),
                        severity: entry.level,
                        parameter: entry.value,
                        count: test.rows(),
                        mean_ssim: None,
                        mean_mse: pm.mse,
                        max_deviation: Some(pm.max_deviation),
                    });
                }
            }
        }
        Data::Mnist { test, .. } => {
            let kernel = build_kernel(cfg, model, data)?;
            for entry in &cfg.degradations {
                let run = restore_images(cfg, model, &kernel, test, entry)?;
                for (method, images) in [("degraded", &run.degraded), ("dae", &run.dae), ("lmppm", &run.lmppm)] {
                    let (s, m) = image_means(images, test)?;
                    rows.push(EvalRow {
                        method,
                        degradation: entry.name(),
                        severity: entry.level,
                        parameter: entry.value,
                        count: test.len(),
                        mean_ssim: Some(s),
                        mean_mse: m,
                        max_deviation: None,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Mean SSIM and mean MSE of `images` against the matching test images.
pub fn image_means(images: &[GrayImage], test: &ImageDataset) -> Result<(f64, f64)> {
    if images.is_empty() || images.len() != test.len() {
        return Err(mppm_core::Error::EmptyDataset.into());
    }
    let (mut s, mut m) = (0.0, 0.0);
    for (i, im) in images.iter().enumerate() {
        let clean = test.image(i);
        s += ssim(im, &clean)?;
        m += mse(&im.pixels, &clean.pixels)?;
    }
    let n = images.len() as f64;
    Ok((s / n, m / n))
}

pub fn write_eval_table(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = CsvWriter::create(
        path,
        &[
            "method",
            "degradation",
            "severity",
            "parameter",
            "count",
            "mean_ssim",
            "mean_mse",
            "max_deviation",
        ],
    )?;
    let opt = |v: Option<f64>| v.map_or(String::new(), num);
    for r in rows {
        w.row(&[
            r.method.to_string(),
            r.degradation.to_string(),
            r.severity.to_string(),
            num(r.parameter),
            r.count.to_string(),
            opt(r.mean_ssim),
            num(r.mean_mse),
            opt(r.max_deviation),
        ])?;
    }
    Ok(())
}

fn evaluate_job(cfg: &RunConfig, model: &ManifoldModel, data: &Data, out: &Path, manifest: &mut Manifest) -> Result<()> {
    let rows = evaluate_rows(cfg, model, data)?;
    let p = out.join("evaluation.csv");
    write_eval_table(&p, &rows)?;
    manifest.add_artifact("evaluation", &p);
    Ok(())
}

/// A small model for gradient checks: 3 ambient values, 2 latent.
/// Small models for gradient checks; both distance networks read the code,
/// as in the shipped architectures.
pub fn tiny_architecture() -> ArchitectureSpec {
    ArchitectureSpec {
        encoder: NetSpec::mlp(&[3, 5, 2], Activation::Relu, Activation::Identity, 0.0),
        decoder: NetSpec::mlp(&[2, 5, 3], Activation::Relu, Activation::Sigmoid, 0.0),
        distance: NetSpec::mlp(&[2, 6, 4, 1], Activation::Relu, Activation::Identity, 0.0),
        latent_dim: 2,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub space: Space,
    /// `None` for the full weighted objective, otherwise the 1-based term.
    pub term: Option<usize>,
    pub report: GradCheckReport,
}

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-3;

/// Checks the full objective and each term alone on tiny ambient and latent
/// models, with the loss switches of `cfg`.
pub fn gradcheck_rows(cfg: &RunConfig) -> Result<Vec<GradCheckRow>> {
    let mut rng = SplitRng::fork(cfg.seed, stream::GRADCHECK);
    let data = Matrix::from_vec(6, 3, (0..18).map(|_| rng.uniform_range(-1.0, 1.0)).collect())?;
    let index = NearestIndex::new(&data)?;
    let batch = TrainBatch::sample(&index, &[0, 2, 5], 0.4, &mut rng)?;
    let mut rows = Vec::new();
    for space in [Space::Ambient, Space::Latent] {
        let model = ManifoldModel::build(&tiny_architecture(), space, 0.3, cfg.seed)?;
        let anchors = LatentAnchorSet::compute(&model, &data, 0)?;
        for term in std::iter::once(None).chain((1..=6).map(Some)) {
            let mut loss = cfg.train.loss;
            if let Some(k) = term {
                let mut lambda = [0.0; 6];
                lambda[k - 1] = 1.0;
                loss.weights = LossWeights { lambda };
            }
            let report = gradient_check(&model, &batch, Some(&anchors), &loss, GRADCHECK_STEP, GRADCHECK_TOL)?;
            rows.push(GradCheckRow { space, term, report });
        }
    }
    Ok(rows)
}

fn gradcheck_job(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<()> {
    let rows = gradcheck_rows(cfg)?;
    let p: PathBuf = out.join("gradcheck.csv");
    let mut w = CsvWriter::create(
        &p,
        &["model", "term", "max_rel_err", "max_abs_err", "checked", "non_differentiable", "pass"],
    )?;
    for r in &rows {
        w.row(&[
            r.space.name().to_string(),
            r.term.map_or("total".to_string(), |k| format!("term{k}")),
            num(r.report.max_rel_err),
            num(r.report.max_abs_err),
            r.report.checked.to_string(),
            r.report.non_differentiable.len().to_string(),
            r.report.pass.to_string(),
        ])?;
    }
    manifest.add_artifact("gradcheck", &p);
    match rows.iter().find(|r| !r.report.pass) {
        Some(r) => Err(Error::Check(format!(
            "gradient check failed on the {} model, {:?}: relative error {:e} above {GRADCHECK_TOL}",
            r.space.name(),
            r.term,
            r.report.max_rel_err
        ))),
        None => Ok(()),
    }
}
