//! Run directories: staged writes, manifest, metric table, atomic publish.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use droplab::{LabError, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// Environment variable naming the default artifact root.
pub const OUT_ENV: &str = "DROPLAB_OUT";

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";
pub const CONFIG: &str = "config.toml";

fn io_err(path: &Path, e: std::io::Error) -> LabError {
    LabError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Collects files for one run in a private staging directory.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    metrics: Vec<(String, f64)>,
    files: Vec<String>,
}

impl ArtifactWriter {
    pub fn create(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(ArtifactWriter {
            dir,
            metrics: Vec::new(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `name` (relative, may contain `/`) with the bytes produced by `fill`.
    pub fn file(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        let mut buf = Vec::new();
        fill(&mut buf).map_err(|e| io_err(&path, e))?;
        fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.file(name, |buf| {
            serde_json::to_writer_pretty(&mut *buf, value).map_err(std::io::Error::other)?;
            buf.write_all(b"\n")
        })
    }

    /// Records one scalar for the metric table; names must be unique.
    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.push((name.into(), value));
    }

    pub fn metrics(&self) -> &[(String, f64)] {
        &self.metrics
    }

    fn write_metrics(&mut self) -> Result<()> {
        let rows = std::mem::take(&mut self.metrics);
        self.file(METRICS, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["metric", "value"])?;
            for (k, v) in &rows {
                w.write_record([k.as_str(), &format!("{v:e}")])?;
            }
            w.flush()
        })?;
        self.metrics = rows;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub kind: String,
    /// SHA-256 of `config.toml` as written next to this manifest.
    pub config_digest: String,
    pub seed: u64,
    pub droplab_version: String,
    pub threads: usize,
    pub wall_time_s: f64,
    pub finished_unix_s: u64,
    pub verdict: Option<bool>,
    pub files: Vec<String>,
}

/// A published run directory.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub summary: serde_json::Value,
    pub metrics: Vec<(String, f64)>,
}

impl RunArtifact {
    pub fn verdict(&self) -> Option<bool> {
        self.manifest.verdict
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

/// Resolves the artifact root: explicit flag, then the config, then
/// `DROPLAB_OUT`, then `./runs`.
pub fn output_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Final directory name of a run: `<name>-<first 12 digest chars>`.
pub fn run_dir_name(cfg: &ExperimentConfig) -> String {
    format!("{}-{}", cfg.name, &cfg.digest()[..12])
}

pub(crate) struct Staging {
    pub writer: ArtifactWriter,
    root: PathBuf,
    final_dir: PathBuf,
}

impl Staging {
    pub fn new(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
        let staging = root.join(format!(".staging-{}-{}-{nanos}", cfg.name, std::process::id()));
        let mut writer = ArtifactWriter::create(staging)?;
        let text = cfg.to_toml();
        writer.file(CONFIG, |buf| buf.write_all(text.as_bytes()))?;
        Ok(Staging {
            writer,
            root: root.to_path_buf(),
            final_dir: root.join(run_dir_name(cfg)),
        })
    }

    /// Writes the metric table and manifest, then renames the staging
    /// directory into place (replacing an earlier run of the same config).
    pub fn publish(
        mut self,
        cfg: &ExperimentConfig,
        summary: serde_json::Value,
        verdict: Option<bool>,
        threads: usize,
        wall_time_s: f64,
    ) -> Result<RunArtifact> {
        self.writer.json(SUMMARY, &summary)?;
        self.writer.write_metrics()?;
        let mut files = self.writer.files.clone();
        files.sort();
        let manifest = Manifest {
            name: cfg.name.clone(),
            kind: cfg.experiment.kind().to_string(),
            config_digest: cfg.digest(),
            seed: cfg.seed,
            droplab_version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
            wall_time_s,
            finished_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            verdict,
            files,
        };
        self.writer.json(MANIFEST, &manifest)?;
        if self.final_dir.exists() {
            let trash = self.root.join(format!(
                ".trash-{}-{}",
                self.final_dir.file_name().and_then(|s| s.to_str()).unwrap_or("run"),
                std::process::id()
            ));
            fs::rename(&self.final_dir, &trash).map_err(|e| io_err(&self.final_dir, e))?;
            fs::remove_dir_all(&trash).map_err(|e| io_err(&trash, e))?;
        }
        fs::rename(&self.writer.dir, &self.final_dir).map_err(|e| io_err(&self.final_dir, e))?;
        Ok(RunArtifact {
            dir: self.final_dir,
            manifest,
            summary,
            metrics: self.writer.metrics,
        })
    }

    pub fn abandon(self) {
        let _ = fs::remove_dir_all(&self.writer.dir);
    }
}

/// Reads `metrics.csv` of a published run.
pub fn read_metrics(dir: &Path) -> Result<Vec<(String, f64)>> {
    let path = dir.join(METRICS);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| LabError::Format(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| LabError::Format(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["metric", "value"] {
        return Err(LabError::Format(format!("{}: expected header metric,value", path.display())));
    }
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| LabError::Format(format!("{}: {e}", path.display())))?;
            let v: f64 = r[1]
                .parse()
                .map_err(|_| LabError::Format(format!("{}: bad value `{}`", path.display(), &r[1])))?;
            Ok((r[0].to_string(), v))
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::Format(format!("{}: {e}", path.display())))
}
