use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mppm::checkpoint;
use mppm::config::{parse_pairs, RunConfig, Settings};
use mppm::idx::{encode_images, encode_labels};
use mppm::jobs;
use mppm_core::data::image::ImageDataset;
use mppm_core::linalg::Matrix;
use mppm_core::networks::{ManifoldModel, Space};
use mppm_core::rng::SplitRng;

fn mppm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mppm")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Ten blurry blobs per split, two per label.
fn write_fake_mnist(dir: &Path) {
    let mut rng = SplitRng::new(1);
    for (stem, n) in [("train", 40), ("t10k", 10)] {
        let mut px = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let (cy, cx) = (rng.uniform_range(8.0, 20.0), rng.uniform_range(8.0, 20.0));
            for r in 0..28 {
                for c in 0..28 {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    px.push((-d2 / 18.0).exp());
                }
            }
            labels.push((i % 5) as u8);
        }
        let ds = ImageDataset::new(28, 28, Matrix::from_vec(n, 784, px).unwrap(), Some(labels.clone())).unwrap();
        fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), encode_images(&ds)).unwrap();
        fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), encode_labels(&labels)).unwrap();
    }
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&mppm(&["--help"])), 0);
    assert_eq!(code(&mppm(&[])), 1);
    assert_eq!(code(&mppm(&["train", "--seed", "x"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = mppm(&["reconstruct", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
    let o = mppm(&["train", "--out", out.to_str().unwrap(), "--override", "projection.alpha=0.95"]);
    assert_eq!(code(&o), 1);
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "# a comment\nunknown.key = 3\n").unwrap();
    assert_eq!(code(&mppm(&["train", "--config", cfg.to_str().unwrap()])), 1);
    assert_eq!(code(&mppm(&["train", "--config", dir.path().join("missing").to_str().unwrap()])), 2);
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = dir.path().join("r");
    let o = mppm(&["evaluate", "--checkpoint", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("# status: failed"));
    let o = mppm(&[
        "train",
        "--out",
        out.to_str().unwrap(),
        "--override",
        "dataset=mnist",
        "--override",
        "mnist.dir=/nonexistent",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_epochs_write_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = mppm(&["train", "--seed", "4", "--out", out.to_str().unwrap(), "--override", "train.epochs=0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let saved = checkpoint::load(&out.join(jobs::CHECKPOINT)).unwrap();
    let cfg = RunConfig::from_settings(&Settings::load(Some(&out.join("manifest.txt")), &[]).unwrap()).unwrap();
    let init = ManifoldModel::build(&cfg.architecture, cfg.space, cfg.train.sigma_d, 4).unwrap();
    assert_eq!(saved, init);
    assert_eq!(fs::read_to_string(out.join(jobs::EPOCHS_CSV)).unwrap().lines().count(), 1);
}

#[test]
fn circle_pipeline_and_manifest_replay() {
    let dir = tempfile::tempdir().unwrap();
    let run = |cmd: &str, out: &Path, extra: &[&str]| {
        let mut args = vec![cmd, "--out", out.to_str().unwrap()];
        for o in [
            "circle.count=200",
            "circle.test_count=15",
            "train.epochs=4",
            "train.batch_size=50",
            "evaluate.degradations=identity, noise:0.1, noise:0.2",
        ] {
            args.extend(["--override", o]);
        }
        args.extend(extra);
        let o = mppm(&args);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let t = dir.path().join("train");
    run("train", &t, &[]);
    let log = fs::read_to_string(t.join(jobs::EPOCHS_CSV)).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("epoch,term1,term2,term3,term4,term5,term6,total"));
    let manifest = fs::read_to_string(t.join("manifest.txt")).unwrap();
    assert!(manifest.contains("# status: complete") && manifest.contains("train.epochs = 4"));

    let ckpt = t.join(jobs::CHECKPOINT);
    let r = dir.path().join("rec");
    run("reconstruct", &r, &["--checkpoint", ckpt.to_str().unwrap()]);
    let metrics = fs::read_to_string(r.join("metrics.csv")).unwrap();
    let methods: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["noisy", "dae", "mppm"]);
    assert_eq!(fs::read_to_string(r.join("points.csv")).unwrap().lines().count(), 16);

    let e = dir.path().join("eval");
    run("evaluate", &e, &["--checkpoint", ckpt.to_str().unwrap()]);
    let table = fs::read_to_string(e.join("evaluation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * 3);
    for (i, deg) in ["identity", "noise", "noise"].iter().enumerate() {
        for (j, method) in ["degraded", "dae", "mppm"].iter().enumerate() {
            assert_eq!((rows[3 * i + j][0], rows[3 * i + j][1]), (*method, *deg));
        }
    }
    // the identity rows measure clean points, which lie on the circle
    assert_eq!(rows[0][6].parse::<f64>().unwrap(), 0.0);

    // the manifest alone reproduces the checkpoint
    let again = dir.path().join("again");
    let o = mppm(&[
        "train",
        "--config",
        t.join("manifest.txt").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join(jobs::CHECKPOINT)).unwrap());

    // an ambient config cannot use a latent checkpoint
    let latent = dir.path().join("latent.ckpt");
    let m = ManifoldModel::build(&jobs::tiny_architecture(), Space::Latent, 0.3, 1).unwrap();
    checkpoint::save(&latent, &m).unwrap();
    let mut args = vec!["reconstruct", "--checkpoint", latent.to_str().unwrap(), "--out", r.to_str().unwrap()];
    args.extend(["--override", "circle.count=20"]);
    let o = mppm(&args);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("latent model"));
}

#[test]
fn image_pipeline_on_a_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    write_fake_mnist(&data);
    let common = [
        "dataset=mnist".to_string(),
        format!("mnist.dir={}", data.display()),
        "mnist.train_count=0".into(),
        "mnist.test_count=6".into(),
        "train.epochs=2".into(),
        "generate.count=4".into(),
        "evaluate.montage_count=3".into(),
        "evaluate.degradations=identity, missing:severe, scribbles:mild".into(),
    ];
    let run = |cmd: &str, out: &Path, ckpt: Option<&Path>| {
        let mut args = vec![cmd.to_string(), "--out".into(), out.display().to_string()];
        if let Some(c) = ckpt {
            args.extend(["--checkpoint".into(), c.display().to_string()]);
        }
        for o in &common {
            args.extend(["--override".into(), o.clone()]);
        }
        let o = Command::new(env!("CARGO_BIN_EXE_mppm")).args(&args).output().unwrap();
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let t = dir.path().join("train");
    run("train", &t, None);
    let ckpt = t.join(jobs::CHECKPOINT);
    let r = dir.path().join("rec");
    run("reconstruct", &r, Some(&ckpt));
    for name in ["original", "degraded", "restored", "dae"] {
        let im = mppm::pgm::read_pgm(&r.join(format!("{name}.pgm"))).unwrap();
        assert_eq!((im.height, im.width), (30, 88));
    }
    let per_image = fs::read_to_string(r.join("per_image.csv")).unwrap();
    assert_eq!(per_image.lines().count(), 7);
    let g = dir.path().join("gen");
    run("generate", &g, Some(&ckpt));
    assert_eq!(fs::read_to_string(g.join("generation.csv")).unwrap().lines().count(), 5);
    assert!(g.join("generated.pgm").is_file());
    let e = dir.path().join("eval");
    run("evaluate", &e, Some(&ckpt));
    let table = fs::read_to_string(e.join("evaluation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    assert_eq!((rows[0][0], rows[0][1], rows[0][5]), ("degraded", "identity", "1.0"));
    assert_eq!((rows[3][1], rows[3][2]), ("missing", "severe"));
    assert_eq!((rows[6][1], rows[6][2]), ("scribbles", "mild"));
}

#[test]
fn perfect_restorations_score_one() {
    let px = (0..3 * 144).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
    let ds = ImageDataset::new(12, 12, Matrix::from_vec(3, 144, px).unwrap(), None).unwrap();
    let images: Vec<_> = (0..3).map(|i| ds.image(i)).collect();
    assert_eq!(jobs::image_means(&images, &ds).unwrap(), (1.0, 0.0));
}

#[test]
fn gradcheck_reports_every_term() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = mppm(&["gradcheck", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 7);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    let s = Settings::resolve(&parse_pairs("loss.square_consistency_terms = true", "t").unwrap()).unwrap();
    let rows = jobs::gradcheck_rows(&RunConfig::from_settings(&s).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.report.max_rel_err < jobs::GRADCHECK_TOL));
}
