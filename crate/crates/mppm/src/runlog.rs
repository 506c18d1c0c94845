//! Run manifests and per-epoch CSV logs.

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::Settings;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";

/// `manifest.txt` in the run directory: `#` header lines followed by the
/// resolved configuration, so the file itself is a valid `--config` input.
pub struct Manifest {
    path: PathBuf,
    command: String,
    config: String,
    started: Instant,
    artifacts: Vec<(String, PathBuf)>,
}

impl Manifest {
    /// Writes the manifest with status `running`.
    pub fn begin(out: &Path, command: &str, settings: &Settings) -> Result<Self> {
        let m = Self {
            path: out.join(MANIFEST),
            command: command.to_string(),
            config: settings.to_text(),
            started: Instant::now(),
            artifacts: Vec::new(),
        };
        m.write("running", None)?;
        Ok(m)
    }

    pub fn add_artifact(&mut self, role: &str, path: &Path) {
        self.artifacts.push((role.to_string(), path.to_path_buf()));
    }

    /// Rewrites the manifest with the final status and wall-clock time.
    pub fn finish(&self, outcome: &Result<()>) -> Result<()> {
        let status = match outcome {
            Ok(()) => "complete".to_string(),
            Err(e) => format!("failed: {}", e.to_string().replace('\n', " ")),
        };
        self.write(&status, Some(self.started.elapsed().as_secs_f64()))
    }

    fn write(&self, status: &str, seconds: Option<f64>) -> Result<()> {
        let mut s = String::from("# mppm run manifest\n");
        s += &format!("# command: {}\n", self.command);
        s += &format!("# version: {} ({})\n", env!("CARGO_PKG_VERSION"), env!("MPPM_GIT_DESCRIBE"));
        s += &format!("# status: {status}\n");
        if let Some(t) = seconds {
            s += &format!("# wall_clock_seconds: {t:.3}\n");
        }
        for (role, p) in &self.artifacts {
            s += &format!("# artifact {role}: {}\n", p.display());
        }
        s += &self.config;
        fs::write(&self.path, s).map_err(|e| Error::io(&self.path, e))
    }
}

/// A CSV file whose rows are flushed as they are written.
pub struct CsvWriter {
    path: PathBuf,
    out: csv::Writer<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: csv::Writer::from_writer(file),
        };
        w.row(header)?;
        Ok(w)
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        self.out
            .write_record(fields.iter().map(AsRef::as_ref))
            .map_err(io::Error::from)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_pairs, Settings};

    #[test]
    fn manifest_is_a_loadable_config() {
        let dir = tempfile::tempdir().unwrap();
        let settings = Settings::resolve(&parse_pairs("seed = 5", "t").unwrap()).unwrap();
        let mut m = Manifest::begin(dir.path(), "train", &settings).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("# status: running"));
        m.add_artifact("checkpoint", &dir.path().join("model.ckpt"));
        m.finish(&Ok(())).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("# status: complete") && text.contains("# wall_clock_seconds: "));
        assert!(text.contains("# artifact checkpoint: "));
        assert_eq!(Settings::load(Some(&dir.path().join(MANIFEST)), &[]).unwrap(), settings);
    }

    #[test]
    fn failures_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::begin(dir.path(), "train", &Settings::resolve(&[]).unwrap()).unwrap();
        m.finish(&Err(Error::Config("boom".into()))).unwrap();
        assert!(fs::read_to_string(dir.path().join(MANIFEST))
            .unwrap()
            .contains("# status: failed: config: boom"));
    }

    #[test]
    fn csv_rows_are_visible_before_close() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let mut w = CsvWriter::create(&p, &["a", "b"]).unwrap();
        w.row(&[num(0.1), num(2.0)]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a,b\n0.1,2.0\n");
    }
}
