//! Experiment runner for the dropout laboratory: declarative TOML configs in,
//! reproducible artifact directories out.

pub mod artifact;
pub mod config;
pub mod experiments;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use droplab::{LabError, Result};
use serde::Serialize;

pub use artifact::{ArtifactWriter, Manifest, RunArtifact};
pub use config::{Experiment, ExperimentConfig};

/// Exit status for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status when training diverged.
pub const EXIT_DIVERGENCE: i32 = 3;
/// Exit status when a verifier experiment failed.
pub const EXIT_VERIFIER: i32 = 4;

pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Config { .. } => EXIT_CONFIG,
        LabError::Divergence { .. } | LabError::NonFinite(_) => EXIT_DIVERGENCE,
        _ => 1,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the config's global seed.
    pub seed: Option<u64>,
    /// Artifact root, overriding the config and `DROPLAB_OUT`.
    pub out: Option<PathBuf>,
    /// Worker threads for parallel sections; rayon's default when unset.
    pub threads: Option<usize>,
    /// Directory that relative dataset paths are resolved against.
    pub base_dir: PathBuf,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    ExperimentConfig::from_toml(&text)
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| LabError::Format(e.to_string()))
}

/// Runs `cfg` and publishes its artifact directory. Verifier kinds record
/// their verdict in the manifest; the caller decides the exit status.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunArtifact> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let root = artifact::output_root(opts.out.as_deref(), &cfg);
    cfg.output_dir = None;
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| LabError::config("threads", e.to_string()))?;
    let threads = pool.current_num_threads();
    let mut staging = artifact::Staging::new(&root, &cfg)?;
    let started = Instant::now();
    let result = pool.install(|| dispatch(&cfg, &opts.base_dir, &mut staging.writer));
    match result {
        Ok((summary, verdict)) => staging.publish(&cfg, summary, verdict, threads, started.elapsed().as_secs_f64()),
        Err(e) => {
            staging.abandon();
            Err(e)
        }
    }
}

fn dispatch(cfg: &ExperimentConfig, base: &Path, out: &mut ArtifactWriter) -> Result<(serde_json::Value, Option<bool>)> {
    use experiments::*;
    let seed = cfg.seed;
    Ok(match &cfg.experiment {
        Experiment::CondensationFit(c) => (to_value(&condensation_fit(c, seed, base, out)?)?, None),
        Experiment::LossSwitch(c) => (to_value(&loss_switch(c, seed, base, out)?)?, None),
        Experiment::R1Equivalence(c) => (to_value(&r1_equivalence(c, seed, base, out)?)?, None),
        Experiment::R2Duality(c) => (to_value(&r2_duality(c, seed, base, out)?)?, None),
        Experiment::TeacherStudentSweep(c) => (to_value(&teacher_student_sweep(c, seed, out)?)?, None),
        Experiment::FlatnessProfile(c) => (to_value(&flatness_profile(c, seed, base, out)?)?, None),
        Experiment::InterpolationStudy(c) => (to_value(&interpolation_study(c, seed, base, out)?)?, None),
        Experiment::TheoryVerify(c) => {
            let s = theory_verify(c, seed, out)?;
            let pass = s.pass;
            (to_value(&s)?, Some(pass))
        }
        Experiment::ModifiedFlowCheck(c) => {
            let s = flow_check(c, seed, base, out)?;
            let pass = s.pass;
            (to_value(&s)?, Some(pass))
        }
    })
}

/// Which metrics to align; all shared metrics when empty.
#[derive(Debug, Clone, Default)]
pub struct CompareSpec {
    /// Keep only metrics whose name starts with one of these prefixes.
    pub prefixes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub diff: f64,
}

/// Aligns the metric tables of two runs. Both runs must be of the same kind
/// and carry the same (filtered) metric names.
pub fn compare_runs(a: &Path, b: &Path, spec: &CompareSpec) -> Result<Vec<ComparisonRow>> {
    let (ma, mb) = (artifact::read_manifest(a)?, artifact::read_manifest(b)?);
    if ma.kind != mb.kind {
        return Err(LabError::Format(format!("schema mismatch: {} vs {} runs", ma.kind, mb.kind)));
    }
    let keep = |name: &str| spec.prefixes.is_empty() || spec.prefixes.iter().any(|p| name.starts_with(p.as_str()));
    let xa: Vec<_> = artifact::read_metrics(a)?.into_iter().filter(|(k, _)| keep(k)).collect();
    let xb: Vec<_> = artifact::read_metrics(b)?.into_iter().filter(|(k, _)| keep(k)).collect();
    let names = |x: &[(String, f64)]| {
        let mut v: Vec<String> = x.iter().map(|(k, _)| k.clone()).collect();
        v.sort();
        v
    };
    if names(&xa) != names(&xb) {
        return Err(LabError::Format(format!(
            "schema mismatch: metric sets differ ({} vs {} entries)",
            xa.len(),
            xb.len()
        )));
    }
    Ok(xa
        .iter()
        .map(|(k, va)| {
            let vb = xb.iter().find(|(kb, _)| kb == k).map(|(_, v)| *v).expect("same names");
            ComparisonRow {
                metric: k.clone(),
                a: *va,
                b: vb,
                diff: vb - va,
            }
        })
        .collect())
}

pub fn write_comparison<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| LabError::Format(e.to_string());
    w.write_record(["metric", "a", "b", "diff"]).map_err(fail)?;
    for r in rows {
        w.write_record([r.metric.clone(), format!("{:e}", r.a), format!("{:e}", r.b), format!("{:e}", r.diff)])
            .map_err(fail)?;
    }
    w.flush().map_err(|e| LabError::Format(e.to_string()))
}
