//! Flat `key = value` run configuration.
//!
//! Every key has a default that depends on `dataset`; a file and
//! `--override` flags only replace values. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mppm_core::data::circle::CircleDatasetSpec;
use mppm_core::data::degrade::{Degradation, Severity, DEFAULT_SHARPEN_SIGMA, ELASTIC_ALPHA};
use mppm_core::losses::{LossConfig, LossWeights};
use mppm_core::networks::{ArchitectureSpec, Space};
use mppm_core::nn::AdamConfig;
use mppm_core::projection::ProjectionConfig;
use mppm_core::train::TrainConfig;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Circle,
    Mnist,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Mnist => "mnist",
        }
    }

    fn from_name(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(Self::Circle),
            "mnist" => Ok(Self::Mnist),
            other => Err(Error::Config(format!("dataset must be circle or mnist, got {other:?}"))),
        }
    }
}

fn defaults(dataset: DatasetKind) -> Vec<(&'static str, &'static str)> {
    let shared = [
        ("seed", "0"),
        ("loss.lambda1", "1"),
        ("loss.lambda2", "1"),
        ("loss.lambda3", "1"),
        ("loss.lambda4", "1"),
        ("loss.lambda5", "1"),
        ("loss.lambda6", "1"),
        ("loss.detach_shift_direction", "false"),
        ("loss.square_consistency_terms", "false"),
        ("loss.denoising_autoencoder", "true"),
        ("loss.detach_projection_target", "true"),
        ("projection.alpha", "0.15"),
        ("projection.beta", "0.1"),
        ("kernel.sigma_ker", "auto"),
        ("kernel.subsample_k", "512"),
        ("evaluate.montage_count", "8"),
    ];
    let specific: &[(&str, &str)] = match dataset {
        DatasetKind::Circle => &[
            ("dataset", "circle"),
            ("model.space", "ambient"),
            ("model.architecture", "synthetic"),
            ("circle.count", "5500"),
            ("circle.theta0", "0"),
            ("circle.sigma_theta", "0.5"),
            ("circle.test_count", "200"),
            ("circle.test_noise", "0.2"),
            ("circle.test_sigma_theta", "0.5"),
            ("train.epochs", "500"),
            ("train.batch_size", "550"),
            ("train.patience", "100"),
            ("train.sigma_d", "0.2"),
            ("train.clip_corruption", "false"),
            ("train.ae_lr", "0.001"),
            ("train.ae_weight_decay", "0.0001"),
            ("train.distance_lr", "0.001"),
            ("train.distance_weight_decay", "0.0001"),
            ("projection.num_steps", "60"),
            ("projection.tol", "0.005"),
            ("kernel.n_samples", "256"),
            ("generate.count", "0"),
            ("generate.num_steps", "16"),
            ("evaluate.degradations", "noise"),
        ],
        DatasetKind::Mnist => &[
            ("dataset", "mnist"),
            ("model.space", "latent"),
            ("model.architecture", "mnist"),
            ("mnist.dir", "/root/data/mnist"),
            ("mnist.train_count", "10000"),
            ("mnist.test_count", "200"),
            ("mnist.degradation", "noise:0.5"),
            ("train.epochs", "100"),
            ("train.batch_size", "128"),
            ("train.patience", "8"),
            ("train.sigma_d", "0.4"),
            ("train.clip_corruption", "true"),
            ("train.ae_lr", "0.001"),
            ("train.ae_weight_decay", "0"),
            ("train.distance_lr", "0.0003"),
            ("train.distance_weight_decay", "0"),
            ("projection.num_steps", "4"),
            ("projection.tol", "0"),
            ("kernel.n_samples", "64"),
            ("generate.count", "50"),
            ("generate.num_steps", "16"),
            (
                "evaluate.degradations",
                "noise:0.5, noise:mild, noise:severe, elastic:mild, elastic:severe, downsample:mild, downsample:severe",
            ),
        ],
    };
    shared.iter().chain(specific).copied().collect()
}

/// The resolved key/value table of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// ignored; surrounding whitespace is trimmed.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value, got {line:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(Error::Config(format!("{origin}:{}: bad key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Settings {
    /// Defaults for the dataset named by the last `dataset` entry (circle if
    /// none), then every pair applied in order.
    pub fn resolve(pairs: &[(String, String)]) -> Result<Self> {
        let dataset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "dataset")
            .map(|(_, v)| DatasetKind::from_name(v))
            .transpose()?
            .unwrap_or(DatasetKind::Circle);
        let mut values: BTreeMap<String, String> = defaults(dataset).into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in pairs {
            match values.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(Error::Config(format!("unknown key {k:?} for dataset {}", dataset.name()))),
            }
        }
        Ok(Self { values })
    }

    /// File contents (if any) followed by `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_pairs(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        for o in overrides {
            pairs.extend(parse_pairs(o, "--override")?);
        }
        Self::resolve(&pairs)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no default for {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid {}", std::any::type_name::<T>())))
    }

    /// One `key = value` line per entry, sorted by key; parseable by
    /// [`parse_pairs`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// A degradation named in `evaluate.degradations`, with the label used in
/// reports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationEntry {
    /// `None` leaves the image untouched.
    pub kind: Option<Degradation>,
    pub level: &'static str,
    pub value: f64,
}

impl DegradationEntry {
    pub fn name(&self) -> &'static str {
        self.kind.as_ref().map_or("identity", Degradation::name)
    }
}

/// `identity`, or `name[:level]` where level is `mild`, `severe` or the number for the
/// operator's main parameter (noise sigma, downsample factor, missing
/// coverage, scribble count, sharpening factor, elastic sigma).
pub fn parse_degradation(item: &str) -> Result<DegradationEntry> {
    let (name, level) = item.trim().split_once(':').unwrap_or((item.trim(), "mild"));
    let (name, level) = (name.trim(), level.trim());
    if name == "identity" {
        return Ok(DegradationEntry {
            kind: None,
            level: "none",
            value: 0.0,
        });
    }
    if let Some(sev) = Severity::from_name(level) {
        let kind = Degradation::preset(name, sev)?;
        return Ok(DegradationEntry {
            kind: Some(kind),
            level: sev.name(),
            value: main_parameter(&kind),
        });
    }
    let v: f64 = level
        .parse()
        .map_err(|_| Error::Config(format!("degradation level {level:?} is neither mild, severe nor a number")))?;
    let kind = match name {
        "noise" => Degradation::GaussianNoise { sigma: v },
        "downsample" => Degradation::Downsample { factor: v },
        "missing" => Degradation::MissingPixels { coverage: v },
        "scribbles" if v >= 0.0 && v.fract() == 0.0 => Degradation::Scribbles { count: v as usize },
        "sharpen" => Degradation::OverSharpen {
            s: v,
            sigma: DEFAULT_SHARPEN_SIGMA,
        },
        "elastic" => Degradation::Elastic {
            alpha: ELASTIC_ALPHA,
            sigma: v,
        },
        other => return Err(Error::Config(format!("unknown degradation {other:?} or bad level {level}"))),
    };
    kind.validate()?;
    Ok(DegradationEntry {
        kind: Some(kind),
        level: "custom",
        value: v,
    })
}

fn main_parameter(kind: &Degradation) -> f64 {
    match *kind {
        Degradation::GaussianNoise { sigma } => sigma,
        Degradation::Downsample { factor } => factor,
        Degradation::MissingPixels { coverage } => coverage,
        Degradation::Scribbles { count } => count as f64,
        Degradation::OverSharpen { s, .. } => s,
        Degradation::Elastic { sigma, .. } => sigma,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CircleSettings {
    pub train: CircleDatasetSpec,
    pub test_count: usize,
    /// Angular spread of the test points; same centre and bounds as training.
    pub test_sigma_theta: f64,
    pub test_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnistSettings {
    pub dir: PathBuf,
    /// 0 means the full training split.
    pub train_count: usize,
    pub test_count: usize,
    /// Used by `reconstruct`.
    pub degradation: DegradationEntry,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSettings {
    Circle(CircleSettings),
    Mnist(MnistSettings),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSettings {
    pub n_samples: usize,
    /// `None` picks the median heuristic.
    pub sigma_ker: Option<f64>,
    pub subsample_k: usize,
}

/// Typed view of [`Settings`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetKind,
    pub data: DataSettings,
    pub space: Space,
    pub architecture: ArchitectureSpec,
    pub train: TrainConfig,
    pub restoration: ProjectionConfig,
    pub generation: ProjectionConfig,
    pub generate_count: usize,
    pub kernel: KernelSettings,
    pub degradations: Vec<DegradationEntry>,
    pub montage_count: usize,
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let seed: u64 = s.get("seed")?;
        let dataset = DatasetKind::from_name(s.raw("dataset"))?;
        let space_name = s.raw("model.space");
        let space =
            Space::from_name(space_name).ok_or_else(|| Error::Config(format!("model.space must be ambient or latent, got {space_name:?}")))?;
        let architecture = match s.raw("model.architecture") {
            "synthetic" => ArchitectureSpec::synthetic(),
            "mnist" => ArchitectureSpec::mnist_desk(),
            other => return Err(Error::Config(format!("model.architecture must be synthetic or mnist, got {other:?}"))),
        };
        let data = match dataset {
            DatasetKind::Circle => {
                let mut spec = CircleDatasetSpec::half_circle(s.get("circle.count")?, s.get("circle.sigma_theta")?);
                spec.theta0 = s.get("circle.theta0")?;
                DataSettings::Circle(CircleSettings {
                    train: spec,
                    test_count: s.get("circle.test_count")?,
                    test_sigma_theta: s.get("circle.test_sigma_theta")?,
                    test_noise: s.get("circle.test_noise")?,
                })
            }
            DatasetKind::Mnist => DataSettings::Mnist(MnistSettings {
                dir: PathBuf::from(s.raw("mnist.dir")),
                train_count: s.get("mnist.train_count")?,
                test_count: s.get("mnist.test_count")?,
                degradation: parse_degradation(s.raw("mnist.degradation"))?,
            }),
        };
        let mut lambda = [0.0; 6];
        for (k, l) in lambda.iter_mut().enumerate() {
            *l = s.get(&format!("loss.lambda{}", k + 1))?;
        }
        let loss = LossConfig {
            weights: LossWeights { lambda },
            detach_shift_direction: s.get("loss.detach_shift_direction")?,
            square_consistency_terms: s.get("loss.square_consistency_terms")?,
            denoising_autoencoder: s.get("loss.denoising_autoencoder")?,
            detach_projection_target: s.get("loss.detach_projection_target")?,
        };
        let adam = |lr: &str, wd: &str| -> Result<AdamConfig> {
            Ok(AdamConfig {
                lr: s.get(lr)?,
                weight_decay: s.get(wd)?,
                ..AdamConfig::default()
            })
        };
        let train = TrainConfig {
            epochs: s.get("train.epochs")?,
            batch_size: s.get("train.batch_size")?,
            patience: s.get("train.patience")?,
            sigma_d: s.get("train.sigma_d")?,
            clip_corruption: s.get("train.clip_corruption")?,
            loss,
            autoencoder_optim: adam("train.ae_lr", "train.ae_weight_decay")?,
            distance_optim: adam("train.distance_lr", "train.distance_weight_decay")?,
            seed,
        };
        let restoration = ProjectionConfig {
            alpha: s.get("projection.alpha")?,
            beta: s.get("projection.beta")?,
            num_steps: s.get("projection.num_steps")?,
            convergence_tol: s.get("projection.tol")?,
            record_trajectory: false,
        };
        let generation = ProjectionConfig {
            num_steps: s.get("generate.num_steps")?,
            convergence_tol: 0.0,
            record_trajectory: true,
            ..restoration
        };
        let sigma_ker = match s.raw("kernel.sigma_ker") {
            "auto" => None,
            v => Some(
                v.parse()
                    .map_err(|_| Error::Config(format!("kernel.sigma_ker must be auto or a number, got {v:?}")))?,
            ),
        };
        let kernel = KernelSettings {
            n_samples: s.get("kernel.n_samples")?,
            sigma_ker,
            subsample_k: s.get("kernel.subsample_k")?,
        };
        let degradations = s
            .raw("evaluate.degradations")
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(parse_degradation)
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            seed,
            dataset,
            data,
            space,
            architecture,
            train,
            restoration,
            generation,
            generate_count: s.get("generate.count")?,
            kernel,
            degradations,
            montage_count: s.get("evaluate.montage_count")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate(self.space)?;
        self.train.validate()?;
        self.restoration.validate()?;
        self.generation.validate()?;
        if self.kernel.n_samples == 0 {
            return Err(Error::Config("kernel.n_samples must be at least 1".into()));
        }
        if let Some(s) = self.kernel.sigma_ker {
            if !(s > 0.0) {
                return Err(Error::Config(format!("kernel.sigma_ker must be positive, got {s}")));
            }
        }
        let ambient = self.architecture.ambient_dim();
        let want = match self.dataset {
            DatasetKind::Circle => 3,
            DatasetKind::Mnist => 784,
        };
        if ambient != want {
            return Err(Error::Config(format!(
                "{} data has {want} values per sample but the architecture reads {ambient}",
                self.dataset.name()
            )));
        }
        if let DataSettings::Circle(c) = &self.data {
            if self.space != Space::Ambient {
                return Err(Error::Config("circle runs use model.space = ambient".into()));
            }
            if c.train.count == 0 || c.test_count == 0 || !(c.test_noise >= 0.0) {
                return Err(Error::Config("circle counts must be positive and test_noise >= 0".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_pairs(text, "t").unwrap()
    }

    #[test]
    fn grammar() {
        let p = pairs("# comment\n\n  seed = 4 \ntrain.epochs=3\nevaluate.degradations = noise:0.5, elastic:mild\n");
        assert_eq!(p.len(), 3);
        assert_eq!(p[0], ("seed".into(), "4".into()));
        assert_eq!(p[2].1, "noise:0.5, elastic:mild");
        assert!(parse_pairs("novalue\n", "t").is_err());
        assert!(parse_pairs("bad key = 1\n", "t").is_err());
    }

    #[test]
    fn defaults_follow_the_dataset() {
        let c = RunConfig::from_settings(&Settings::resolve(&[]).unwrap()).unwrap();
        assert_eq!(
            (c.dataset, c.space, c.train.batch_size, c.train.epochs),
            (DatasetKind::Circle, Space::Ambient, 550, 500)
        );
        assert_eq!((c.restoration.alpha, c.restoration.beta, c.restoration.num_steps), (0.15, 0.1, 60));
        assert_eq!(c.restoration.convergence_tol, 0.005);
        let m = RunConfig::from_settings(&Settings::resolve(&pairs("dataset = mnist")).unwrap()).unwrap();
        assert_eq!((m.space, m.train.batch_size, m.train.patience), (Space::Latent, 128, 8));
        assert_eq!(m.train.distance_optim.lr, 3e-4);
        assert_eq!(m.architecture.latent_dim, 18);
        assert_eq!(m.generation.num_steps, 16);
        assert_eq!(m.degradations[0].kind, Some(Degradation::GaussianNoise { sigma: 0.5 }));
    }

    #[test]
    fn later_entries_win_and_unknown_keys_fail() {
        let s = Settings::resolve(&pairs("seed = 1\nseed = 2")).unwrap();
        assert_eq!(s.get::<u64>("seed").unwrap(), 2);
        assert!(Settings::resolve(&pairs("nope = 1")).is_err());
        assert!(Settings::resolve(&pairs("mnist.dir = x")).is_err());
        assert!(Settings::resolve(&pairs("dataset = faces")).is_err());
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "seed = -1",
            "projection.alpha = 0.95",
            "model.space = sideways",
            "model.space = latent",
            "kernel.sigma_ker = -2",
            "train.batch_size = 0",
        ] {
            let r = Settings::resolve(&pairs(text)).and_then(|s| RunConfig::from_settings(&s));
            let e = r.unwrap_err();
            assert_eq!(e.exit_code(), 1, "{text}: {e}");
        }
    }

    #[test]
    fn text_round_trip() {
        let s = Settings::resolve(&pairs("dataset = mnist\nseed = 9")).unwrap();
        assert_eq!(Settings::resolve(&pairs(&s.to_text())).unwrap(), s);
    }

    #[test]
    fn degradation_entries() {
        let e = parse_degradation("noise:severe").unwrap();
        assert_eq!(
            (e.kind, e.level, e.value),
            (Some(Degradation::GaussianNoise { sigma: 0.3 }), "severe", 0.3)
        );
        let e = parse_degradation(" elastic : 1.8 ").unwrap();
        assert_eq!(e.kind, Some(Degradation::Elastic { alpha: 34.0, sigma: 1.8 }));
        assert_eq!(
            parse_degradation("missing").unwrap().kind,
            Some(Degradation::MissingPixels { coverage: 0.04 })
        );
        assert_eq!(parse_degradation("identity").unwrap().kind, None);
        assert!(parse_degradation("scribbles:2.5").is_err());
        assert!(parse_degradation("missing:3").is_err());
        assert!(parse_degradation("blur:mild").is_err());
    }
}
