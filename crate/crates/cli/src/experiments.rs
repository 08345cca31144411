//! One runner per experiment kind. Each writes its CSV/JSON files through an
//! [`ArtifactWriter`] and returns a typed summary.

use std::ops::ControlFlow;
use std::path::Path;

use droplab::data::{teacher_dataset, Dataset};
use droplab::dropout::DropoutConfig;
use droplab::losses::{mse, r1, LossSpec};
use droplab::metrics::{
    accuracy, derivative_total_variation, drop_ratio_statistic, effective_ratio, interpolate, loss_profile,
    neuron_features, random_direction, write_curve_csv, DropRatio, EffectiveRatio,
};
use droplab::nn::{init_params, predict, Activation, InitScheme, NetworkShape, ParamSet};
use droplab::optimize::{
    modified_flow_check, train, train_with_observer, FlowCheckConfig, FlowReport, Optimizer, Phase, TrainConfig,
    Trajectory,
};
use droplab::theory::{
    generate_fixture, verify_flatness_descent, verify_lemma1, verify_perturbation, FlatnessReport, LemmaMode,
    LemmaReport, PerturbationKind, PerturbationReport,
};
use droplab::{Dataset64, LabError, ParamSet64, Result, Scalar};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::artifact::ArtifactWriter;
use crate::config::{
    CondensationFit, FlatnessProfile, InterpolationStudy, LossSwitch, ModifiedFlowCheck, Precision, R1Equivalence,
    R2Duality, SwitchBranch, TeacherStudentSweep, TheoryVerify,
};

/// Independent sub-seed for the stream named `label`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let h = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(label.as_bytes()).finalize();
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn p_label(p: f64) -> String {
    format!("p{p}")
}

/// `R_S` when `p == 1`, otherwise dropout MSE at the last (or every) hidden layer.
fn dropout_loss(p: f64, all_hidden: bool, shape: &NetworkShape) -> Result<LossSpec> {
    if p == 1.0 {
        return Ok(LossSpec::mse());
    }
    let cfg = if all_hidden {
        DropoutConfig::all_hidden(p, shape)?
    } else {
        DropoutConfig::last_hidden(p, shape)?
    };
    Ok(LossSpec::dropout_mse(cfg))
}

fn trajectory_csv<T: Scalar>(out: &mut ArtifactWriter, name: &str, traj: &Trajectory<T>) -> Result<()> {
    out.file(name, |buf| traj.write_csv(buf))
}

fn curve_csv(out: &mut ArtifactWriter, name: &str, curve: &[(f64, f64)]) -> Result<()> {
    out.file(name, |buf| write_curve_csv(curve, buf))
}

/// Trains and stops at the first error raised inside the observer.
fn train_observed<T: Scalar>(
    init: &ParamSet<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    every: usize,
    mut probe: impl FnMut(usize, &ParamSet<T>) -> Result<()>,
) -> Result<(ParamSet<T>, Trajectory<T>)> {
    let total = cfg.total_iterations();
    let mut failure = None;
    probe(0, init)?;
    let result = train_with_observer(init, data, cfg, |info, params| {
        if info.iteration % every == 0 || info.iteration == total {
            if let Err(e) = probe(info.iteration, params) {
                failure = Some(e);
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(result),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CondensationRun {
    pub p: f64,
    pub final_loss: f64,
    pub final_mse: f64,
    /// One entry per hidden layer, at initialization.
    pub initial_ratio: Vec<EffectiveRatio>,
    /// One entry per hidden layer, after training.
    pub effective_ratio: Vec<EffectiveRatio>,
    pub derivative_tv: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CondensationSummary {
    pub runs: Vec<CondensationRun>,
}

impl CondensationSummary {
    pub fn run(&self, p: f64) -> Option<&CondensationRun> {
        self.runs.iter().find(|r| r.p == p)
    }
}

fn hidden_ratios(params: &ParamSet64, threshold: f64) -> Result<Vec<EffectiveRatio>> {
    (1..params.depth()).map(|l| effective_ratio(params, l, threshold)).collect()
}

pub fn condensation_fit(c: &CondensationFit, seed: u64, base: &Path, out: &mut ArtifactWriter) -> Result<CondensationSummary> {
    let (data, _) = c.data.load(base)?;
    let shape = &c.model.shape;
    let init: ParamSet64 = init_params(shape, &c.model.scheme(derive_seed(seed, "init")))?;
    let initial_ratio = hidden_ratios(&init, c.threshold)?;
    let xs = c.curve.values();
    let grid = Array2::from_shape_vec((xs.len(), 1), xs.clone()).expect("column");
    let mut runs = Vec::new();
    for &p in &c.keep_probs {
        let loss = dropout_loss(p, c.all_hidden, shape)?;
        let mut cfg = TrainConfig::single(c.optimizer.clone(), loss, c.iterations, derive_seed(seed, "masks"));
        cfg.record_every = c.record_every;
        let (params, traj) = train(&init, &data, &cfg)?;
        let tag = p_label(p);
        trajectory_csv(out, &format!("{tag}/trajectory.csv"), &traj)?;
        for l in 1..params.depth() {
            let feats = neuron_features(&params, l, true)?;
            out.file(&format!("{tag}/features_layer{l}.csv"), |buf| feats.write_csv(buf))?;
        }
        let init_feats = neuron_features(&init, 1, true)?;
        out.file(&format!("{tag}/features_init_layer1.csv"), |buf| init_feats.write_csv(buf))?;
        let ys = predict(&params, grid.view(), None)?;
        out.file(&format!("{tag}/output.csv"), |buf| {
            use std::io::Write;
            writeln!(buf, "x,f")?;
            for (x, y) in xs.iter().zip(ys.iter()) {
                writeln!(buf, "{x:e},{y:e}")?;
            }
            Ok(())
        })?;
        let effective = hidden_ratios(&params, c.threshold)?;
        let derivative_tv = derivative_total_variation(&params, c.curve.lo, c.curve.hi, c.curve.points)?;
        let last = traj.last().expect("at least one record");
        let final_mse = mse(&params, &data)?;
        out.metric(format!("{tag}/final_mse"), final_mse);
        out.metric(format!("{tag}/effective_ratio"), effective[0].ratio);
        out.metric(format!("{tag}/derivative_tv"), derivative_tv);
        runs.push(CondensationRun {
            p,
            final_loss: last.loss,
            final_mse,
            initial_ratio: initial_ratio.clone(),
            effective_ratio: effective,
            derivative_tv,
        });
    }
    Ok(CondensationSummary { runs })
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchResult {
    pub branch: SwitchBranch,
    pub rs_final: f64,
    /// Largest `R_S` recorded after the switch.
    pub rs_max_post: f64,
    pub r1_final: f64,
    /// Fraction of consecutive post-switch records where `R_1` did not rise.
    pub r1_monotone_fraction: f64,
    pub effective_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossSwitchSummary {
    pub p: f64,
    pub rs_pre: f64,
    pub r1_pre: f64,
    pub ratio_pre: f64,
    pub branches: Vec<BranchResult>,
}

pub fn loss_switch(c: &LossSwitch, seed: u64, base: &Path, out: &mut ArtifactWriter) -> Result<LossSwitchSummary> {
    let (data, _) = c.data.load(base)?;
    let shape = &c.model.shape;
    let init: ParamSet64 = init_params(shape, &c.model.scheme(derive_seed(seed, "init")))?;
    let mask_seed = derive_seed(seed, "masks");
    let mut pre_cfg = TrainConfig::single(c.optimizer.clone(), LossSpec::mse(), c.pre_iterations, mask_seed);
    pre_cfg.record_every = c.record_every;
    let (pre, pre_traj) = train(&init, &data, &pre_cfg)?;
    trajectory_csv(out, "pre/trajectory.csv", &pre_traj)?;
    let rs_pre = mse(&pre, &data)?;
    let r1_pre = r1(&pre, &data, c.p)?;
    let ratio_pre = effective_ratio(&pre, 1, c.threshold)?.ratio;
    out.metric("pre/rs", rs_pre);
    out.metric("pre/r1", r1_pre);
    out.metric("pre/effective_ratio", ratio_pre);

    let dropout = DropoutConfig::last_hidden(c.p, shape)?;
    let mut branches = Vec::new();
    for &branch in &c.branches {
        let (loss, label) = match branch {
            SwitchBranch::MsePlusR1 => (LossSpec::mse_plus_r1(dropout.clone()), "mse_plus_r1"),
            SwitchBranch::Dropout => (LossSpec::dropout_mse(dropout.clone()), "dropout"),
        };
        // The full schedule replays the deterministic pre-switch phase so the
        // optimizer state carries across the switch.
        let cfg = TrainConfig {
            optimizer: c.optimizer.clone(),
            phases: vec![
                Phase {
                    loss: LossSpec::mse(),
                    iterations: c.pre_iterations,
                    reset_optimizer: false,
                },
                Phase {
                    loss,
                    iterations: c.post_iterations,
                    reset_optimizer: c.reset_optimizer,
                },
            ],
            resample_mask_each_step: true,
            seed: mask_seed,
            record_every: c.record_every,
            snapshot_every: 0,
        };
        let (params, traj) = train(&init, &data, &cfg)?;
        trajectory_csv(out, &format!("{label}/trajectory.csv"), &traj)?;
        let post: Vec<_> = traj.records.iter().filter(|r| r.phase == 1).collect();
        let rs_final = mse(&params, &data)?;
        let rs_max_post = post.iter().map(|r| r.mse).fold(rs_final, f64::max);
        let r1_final = r1(&params, &data, c.p)?;
        let r1_series: Vec<f64> = post.iter().map(|r| r.r1).chain(std::iter::once(r1_final)).collect();
        let steps = r1_series.len().saturating_sub(1).max(1);
        let r1_monotone_fraction =
            r1_series.windows(2).filter(|w| w[1] <= w[0]).count() as f64 / steps as f64;
        let ratio = effective_ratio(&params, 1, c.threshold)?.ratio;
        out.metric(format!("{label}/rs_final"), rs_final);
        out.metric(format!("{label}/rs_max_post"), rs_max_post);
        out.metric(format!("{label}/r1_final"), r1_final);
        out.metric(format!("{label}/effective_ratio"), ratio);
        branches.push(BranchResult {
            branch,
            rs_final,
            rs_max_post,
            r1_final,
            r1_monotone_fraction,
            effective_ratio: ratio,
        });
    }
    Ok(LossSwitchSummary {
        p: c.p,
        rs_pre,
        r1_pre,
        ratio_pre,
        branches,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Score {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub rs: f64,
    /// `R_1` at the comparison keep probability.
    pub r1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalencePair {
    pub p: f64,
    pub dropout: Score,
    pub mse_plus_r1: Score,
}

#[derive(Debug, Clone, Serialize)]
pub struct R1EquivalenceSummary {
    pub baseline: Score,
    pub pairs: Vec<EquivalencePair>,
}

fn score<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>, test: &Dataset<T>, p: f64) -> Result<Score> {
    Ok(Score {
        train_accuracy: accuracy(params, data)?,
        test_accuracy: accuracy(params, test)?,
        rs: mse(params, data)?.to_f64_lossy(),
        r1: if p < 1.0 { r1(params, data, p)?.to_f64_lossy() } else { 0.0 },
    })
}

/// Runs `cfg` and logs train/test accuracy every `every` iterations.
fn classification_run<T: Scalar>(
    init: &ParamSet<T>,
    data: &Dataset<T>,
    test: &Dataset<T>,
    cfg: &TrainConfig,
    every: usize,
    out: &mut ArtifactWriter,
    name: &str,
) -> Result<ParamSet<T>> {
    let mut rows = Vec::new();
    let (params, traj) = train_observed(init, data, cfg, every, |it, params| {
        rows.push((it, accuracy(params, data)?, accuracy(params, test)?));
        Ok(())
    })?;
    trajectory_csv(out, &format!("{name}/trajectory.csv"), &traj)?;
    out.file(&format!("{name}/accuracy.csv"), |buf| {
        use std::io::Write;
        writeln!(buf, "iteration,train_accuracy,test_accuracy")?;
        for (it, a, b) in &rows {
            writeln!(buf, "{it},{a},{b}")?;
        }
        Ok(())
    })?;
    Ok(params)
}

fn require_test(test: Option<Dataset64>) -> Result<Dataset64> {
    test.ok_or_else(|| LabError::config("experiment.data", "this experiment needs a dataset with a test split"))
}

pub fn r1_equivalence(c: &R1Equivalence, seed: u64, base: &Path, out: &mut ArtifactWriter) -> Result<R1EquivalenceSummary> {
    match c.precision {
        Precision::F32 => r1_equivalence_in::<f32>(c, seed, base, out),
        Precision::F64 => r1_equivalence_in::<f64>(c, seed, base, out),
    }
}

fn r1_equivalence_in<T: Scalar>(c: &R1Equivalence, seed: u64, base: &Path, out: &mut ArtifactWriter) -> Result<R1EquivalenceSummary> {
    let (data, test) = c.data.load(base)?;
    let (data, test) = (data.cast::<T>(), require_test(test)?.cast::<T>());
    let shape = &c.model.shape;
    let init: ParamSet<T> = init_params(shape, &c.model.scheme(derive_seed(seed, "init")))?;
    let mask_seed = derive_seed(seed, "masks");
    let gd = Optimizer::Gd { lr: c.lr };
    let run = |loss: LossSpec, name: &str, out: &mut ArtifactWriter| {
        let mut cfg = TrainConfig::single(gd.clone(), loss, c.iterations, mask_seed);
        cfg.record_every = c.record_every;
        classification_run(&init, &data, &test, &cfg, c.record_every, out, name)
    };
    let base_params = run(LossSpec::mse(), "mse", out)?;
    let baseline = score(&base_params, &data, &test, 1.0)?;
    out.metric("mse/test_accuracy", baseline.test_accuracy);
    let mut pairs = Vec::new();
    for &p in &c.keep_probs {
        let cfg = DropoutConfig::last_hidden(p, shape)?;
        let tag = p_label(p);
        let d = run(LossSpec::dropout_mse(cfg.clone()), &format!("{tag}/dropout"), out)?;
        let e = run(LossSpec::mse_plus_r1(cfg), &format!("{tag}/mse_plus_r1"), out)?;
        let pair = EquivalencePair {
            p,
            dropout: score(&d, &data, &test, p)?,
            mse_plus_r1: score(&e, &data, &test, p)?,
        };
        out.metric(format!("{tag}/dropout/test_accuracy"), pair.dropout.test_accuracy);
        out.metric(format!("{tag}/mse_plus_r1/test_accuracy"), pair.mse_plus_r1.test_accuracy);
        out.metric(format!("{tag}/dropout/r1"), pair.dropout.r1);
        out.metric(format!("{tag}/mse_plus_r1/r1"), pair.mse_plus_r1.r1);
        pairs.push(pair);
    }
    Ok(R1EquivalenceSummary { baseline, pairs })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityPoint {
    /// Learning rate of the dropout run, equal to `λ` of the penalty run.
    pub lr: f64,
    pub dropout_steps: usize,
    pub penalty_steps: usize,
    pub dropout_ratio: DropRatio,
    pub penalty_ratio: DropRatio,
    /// `max / min` of the two ratios.
    pub factor: f64,
    pub dropout_test_accuracy: Option<f64>,
    pub penalty_test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct R2DualitySummary {
    pub p: f64,
    pub small_lr: f64,
    pub points: Vec<DualityPoint>,
}

pub fn r2_duality(c: &R2Duality, seed: u64, base: &Path, out: &mut ArtifactWriter) -> Result<R2DualitySummary> {
    match c.precision {
        Precision::F32 => r2_duality_in::<f32>(c, seed, base, out),
        Precision::F64 => r2_duality_in::<f64>(c, seed, base, out),
    }
}

fn r2_duality_in<T: Scalar>(c: &R2Duality, seed: u64, base: &Path, out: &mut ArtifactWriter) -> Result<R2DualitySummary> {
    let (data, test) = c.data.load(base)?;
    let data = data.cast::<T>();
    let test = test.map(|t| t.cast::<T>());
    let shape = &c.model.shape;
    let init: ParamSet<T> = init_params(shape, &c.model.scheme(derive_seed(seed, "init")))?;
    let dropout = DropoutConfig::last_hidden(c.p, shape)?;
    let mask_seed = derive_seed(seed, "masks");
    let ratio_seed = derive_seed(seed, "ratio");
    let mut points = Vec::new();
    for &lr in &c.learning_rates {
        let dropout_steps = (c.horizon / lr).round() as usize;
        let mut penalty_steps = (c.horizon / c.small_lr).round() as usize;
        if let Some(cap) = c.max_small_steps {
            penalty_steps = penalty_steps.min(cap);
        }
        let tag = format!("lr{lr}");
        let mut cfg = TrainConfig::single(
            Optimizer::Gd { lr },
            LossSpec::dropout_mse(dropout.clone()),
            dropout_steps,
            mask_seed,
        );
        cfg.record_every = c.record_every;
        let (a, ta) = train(&init, &data, &cfg)?;
        trajectory_csv(out, &format!("{tag}/dropout.csv"), &ta)?;
        let mut cfg = TrainConfig::single(
            Optimizer::Gd { lr: c.small_lr },
            LossSpec::dropout_mse_with_penalty(dropout.clone(), lr),
            penalty_steps,
            mask_seed,
        );
        cfg.record_every = c.record_every;
        let (b, tb) = train(&init, &data, &cfg)?;
        trajectory_csv(out, &format!("{tag}/penalty.csv"), &tb)?;
        let dropout_ratio = drop_ratio_statistic(&a, &data, c.p, c.ratio_samples, ratio_seed)?;
        let penalty_ratio = drop_ratio_statistic(&b, &data, c.p, c.ratio_samples, ratio_seed)?;
        let factor = dropout_ratio.ratio.max(penalty_ratio.ratio) / dropout_ratio.ratio.min(penalty_ratio.ratio);
        let (da, pa) = match &test {
            Some(t) if t.target_dim() > 1 => (Some(accuracy(&a, t)?), Some(accuracy(&b, t)?)),
            _ => (None, None),
        };
        out.metric(format!("{tag}/dropout_ratio"), dropout_ratio.ratio);
        out.metric(format!("{tag}/penalty_ratio"), penalty_ratio.ratio);
        out.metric(format!("{tag}/factor"), factor);
        points.push(DualityPoint {
            lr,
            dropout_steps,
            penalty_steps,
            dropout_ratio,
            penalty_ratio,
            factor,
            dropout_test_accuracy: da,
            penalty_test_accuracy: pa,
        });
    }
    Ok(R2DualitySummary {
        p: c.p,
        small_lr: c.small_lr,
        points,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub n: usize,
    pub p: f64,
    pub mean_test_mse: f64,
    pub std_error: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub cells: Vec<SweepCell>,
}

pub fn teacher_student_sweep(c: &TeacherStudentSweep, seed: u64, out: &mut ArtifactWriter) -> Result<SweepSummary> {
    let teacher_shape = NetworkShape::new(vec![c.input_dim, c.teacher_width, 1], Activation::Tanh)?;
    let teacher: ParamSet64 = init_params(
        &teacher_shape,
        &InitScheme {
            kind: c.teacher_init.clone(),
            seed: derive_seed(seed, "teacher"),
        },
    )?;
    let test = teacher_dataset(&teacher, c.test_size, derive_seed(seed, "test"))?;
    let jobs: Vec<(usize, f64, usize)> = c
        .sample_sizes
        .iter()
        .flat_map(|&n| c.keep_probs.iter().flat_map(move |&p| (0..c.trials).map(move |t| (n, p, t))))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(n, p, t)| {
            let data = teacher_dataset(&teacher, n, derive_seed(seed, &format!("data-{n}-{t}")))?;
            let init: ParamSet64 = init_params(&c.student.shape, &c.student.scheme(derive_seed(seed, &format!("init-{t}"))))?;
            let loss = dropout_loss(p, false, &c.student.shape)?;
            let cfg = TrainConfig::single(
                c.optimizer.clone(),
                loss,
                c.iterations,
                derive_seed(seed, &format!("masks-{n}-{p}-{t}")),
            );
            let (params, _) = train(&init, &data, &cfg)?;
            mse(&params, &test)
        })
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for (chunk, job) in errors.chunks(c.trials).zip(jobs.chunks(c.trials)) {
        let (n, p, _) = job[0];
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let std_error = if chunk.len() > 1 {
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (chunk.len() - 1) as f64;
            (var / chunk.len() as f64).sqrt()
        } else {
            0.0
        };
        out.metric(format!("n{n}/{}/test_mse", p_label(p)), mean);
        cells.push(SweepCell {
            n,
            p,
            mean_test_mse: mean,
            std_error,
            trials: chunk.len(),
        });
    }
    out.file("grid.csv", |buf| {
        use std::io::Write;
        writeln!(buf, "n,p,mean_test_mse,std_error,trials")?;
        for cell in &cells {
            writeln!(buf, "{},{},{:e},{:e},{}", cell.n, cell.p, cell.mean_test_mse, cell.std_error, cell.trials)?;
        }
        Ok(())
    })?;
    Ok(SweepSummary { cells })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileCurve {
    pub p: f64,
    pub final_mse: f64,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlatnessProfileSummary {
    pub curves: Vec<ProfileCurve>,
}

impl FlatnessProfileSummary {
    /// Fraction of grid points where the curve for `p` lies at or below the
    /// curve for `reference`.
    pub fn fraction_below(&self, p: f64, reference: f64) -> Option<f64> {
        let a = self.curves.iter().find(|c| c.p == p)?;
        let b = self.curves.iter().find(|c| c.p == reference)?;
        let below = a.curve.iter().zip(&b.curve).filter(|(x, y)| x.1 <= y.1).count();
        Some(below as f64 / a.curve.len() as f64)
    }
}

pub fn flatness_profile(c: &FlatnessProfile, seed: u64, base: &Path, out: &mut ArtifactWriter) -> Result<FlatnessProfileSummary> {
    let (data, _) = c.data.load(base)?;
    let shape = &c.model.shape;
    let init: ParamSet64 = init_params(shape, &c.model.scheme(derive_seed(seed, "init")))?;
    let alphas = c.alphas.values();
    let direction_seed = derive_seed(seed, "direction");
    let mut curves = Vec::new();
    for &p in &c.keep_probs {
        let loss = dropout_loss(p, false, shape)?;
        let cfg = TrainConfig::single(c.optimizer.clone(), loss, c.iterations, derive_seed(seed, "masks"));
        let (params, traj) = train(&init, &data, &cfg)?;
        let tag = p_label(p);
        trajectory_csv(out, &format!("{tag}/trajectory.csv"), &traj)?;
        let dir = random_direction(&params, direction_seed);
        let curve = loss_profile(&params, &dir.direction, &alphas, &data, &LossSpec::mse())?;
        curve_csv(out, &format!("{tag}/profile.csv"), &curve)?;
        let final_mse = mse(&params, &data)?;
        out.metric(format!("{tag}/final_mse"), final_mse);
        out.metric(format!("{tag}/profile_max"), curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max));
        curves.push(ProfileCurve { p, final_mse, curve });
    }
    Ok(FlatnessProfileSummary { curves })
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpolationSummary {
    pub losses: (String, String),
    pub endpoint_rs: (f64, f64),
    pub interior_max: f64,
    /// `interior_max / max(endpoint_rs)`.
    pub interior_ratio: f64,
    pub test_accuracy: Option<(f64, f64)>,
    pub curve: Vec<(f64, f64)>,
}

pub fn interpolation_study(c: &InterpolationStudy, seed: u64, base: &Path, out: &mut ArtifactWriter) -> Result<InterpolationSummary> {
    match c.precision {
        Precision::F32 => interpolation_study_in::<f32>(c, seed, base, out),
        Precision::F64 => interpolation_study_in::<f64>(c, seed, base, out),
    }
}

fn interpolation_study_in<T: Scalar>(
    c: &InterpolationStudy,
    seed: u64,
    base: &Path,
    out: &mut ArtifactWriter,
) -> Result<InterpolationSummary> {
    let (data, test) = c.data.load(base)?;
    let data = data.cast::<T>();
    let test = test.map(|t| t.cast::<T>());
    let shape = &c.model.shape;
    let init: ParamSet<T> = init_params(shape, &c.model.scheme(derive_seed(seed, "init")))?;
    let mask_seed = derive_seed(seed, "masks");
    let mut ends = Vec::new();
    for loss in [c.losses.0, c.losses.1] {
        let mut cfg = TrainConfig::single(Optimizer::Gd { lr: c.lr }, loss.spec(c.p, c.lr, shape)?, c.iterations, mask_seed);
        cfg.record_every = c.record_every;
        let (params, traj) = train(&init, &data, &cfg)?;
        trajectory_csv(out, &format!("{}/trajectory.csv", loss.label()), &traj)?;
        ends.push(params);
    }
    let curve = interpolate(&ends[0], &ends[1], &c.alphas.values(), &data)?;
    curve_csv(out, "interpolation.csv", &curve)?;
    let endpoint_rs = (mse(&ends[0], &data)?.to_f64_lossy(), mse(&ends[1], &data)?.to_f64_lossy());
    let interior_max = curve
        .iter()
        .filter(|(a, _)| *a > 0.0 && *a < 1.0)
        .map(|c| c.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let interior_ratio = interior_max / endpoint_rs.0.max(endpoint_rs.1);
    let test_accuracy = match &test {
        Some(t) if t.target_dim() > 1 => Some((accuracy(&ends[0], t)?, accuracy(&ends[1], t)?)),
        _ => None,
    };
    out.metric("endpoint_rs_a", endpoint_rs.0);
    out.metric("endpoint_rs_b", endpoint_rs.1);
    out.metric("interior_max", interior_max);
    out.metric("interior_ratio", interior_ratio);
    Ok(InterpolationSummary {
        losses: (c.losses.0.label().into(), c.losses.1.label().into()),
        endpoint_rs,
        interior_max,
        interior_ratio,
        test_accuracy,
        curve,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TheorySummary {
    pub pass: bool,
    pub lemma: Vec<LemmaReport>,
    pub perturbation: Vec<PerturbationReport>,
    pub flatness: Vec<FlatnessReport>,
}

/// Random `(θ, S)` for the expectation check: `[3, width, 2]` tanh network
/// with unit-variance parameters and Gaussian data.
pub fn lemma_instance(width: usize, samples: usize, seed: u64) -> Result<(ParamSet64, Dataset64)> {
    let shape = NetworkShape::new(vec![3, width, 2], Activation::Tanh)?;
    let params = init_params(&shape, &InitScheme::gaussian(1.0, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut draw = |rows, cols| Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng));
    let inputs = draw(samples, 3);
    let targets = draw(samples, 2);
    let data = Dataset64::new(inputs, targets, format!("gaussian(n={samples}, seed={seed})"))?;
    Ok((params, data))
}

pub fn theory_verify(c: &TheoryVerify, seed: u64, out: &mut ArtifactWriter) -> Result<TheorySummary> {
    let mut lemma = Vec::new();
    if let Some(l) = &c.lemma {
        let jobs: Vec<(usize, f64, usize)> = l
            .widths
            .iter()
            .flat_map(|&w| l.keep_probs.iter().flat_map(move |&p| (0..l.instances).map(move |i| (w, p, i))))
            .collect();
        lemma = jobs
            .par_iter()
            .map(|&(w, p, i)| {
                let (params, data) = lemma_instance(w, l.samples, derive_seed(seed, &format!("lemma-{w}-{p}-{i}")))?;
                let mode = match l.monte_carlo {
                    Some(samples) => LemmaMode::MonteCarlo {
                        samples,
                        seed: derive_seed(seed, &format!("lemma-mc-{w}-{p}-{i}")),
                    },
                    None => LemmaMode::Exhaustive,
                };
                verify_lemma1(&params, &data, p, mode)
            })
            .collect::<Result<_>>()?;
        let worst = lemma.iter().map(|r| r.abs_error).fold(0.0, f64::max);
        out.metric("lemma/max_abs_error", worst);
        out.metric("lemma/passed", lemma.iter().filter(|r| r.pass).count() as f64);
    }
    let mut perturbation = Vec::new();
    if let Some(pc) = &c.perturbation {
        for kind in PerturbationKind::ALL {
            for i in 0..pc.fixtures_per_case {
                let f = generate_fixture(kind, derive_seed(seed, &format!("fixture-{kind:?}-{i}")));
                perturbation.push(verify_perturbation(&f.net, &f.data()?, &f.case, pc.p)?);
            }
        }
        out.metric("perturbation/passed", perturbation.iter().filter(|r| r.pass).count() as f64);
        out.metric("perturbation/total", perturbation.len() as f64);
    }
    let mut flatness = Vec::new();
    if let Some(fc) = &c.flatness {
        flatness = (0..fc.instances)
            .into_par_iter()
            .map(|i| verify_flatness_descent(derive_seed(seed, &format!("flatness-{i}"))))
            .collect::<Result<_>>()?;
        out.metric("flatness/passed", flatness.iter().filter(|r| r.pass).count() as f64);
    }
    let pass = lemma.iter().all(|r| r.pass) && perturbation.iter().all(|r| r.pass) && flatness.iter().all(|r| r.pass);
    out.metric("pass", if pass { 1.0 } else { 0.0 });
    let summary = TheorySummary {
        pass,
        lemma,
        perturbation,
        flatness,
    };
    out.json("verdict.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowSummary {
    pub reports: Vec<FlowReport>,
    /// Mean iterate nearer the `R_S + R_1` flow than the `R_S` flow, at every rate.
    pub closer_to_r1: bool,
    /// Distance to the modified flow falls each time the rate is reduced.
    pub gap_shrinks: bool,
    pub pass: bool,
}

pub fn flow_check(c: &ModifiedFlowCheck, seed: u64, base: &Path, out: &mut ArtifactWriter) -> Result<FlowSummary> {
    let (data, _) = c.data.load(base)?;
    let init: ParamSet64 = init_params(&c.model.shape, &c.model.scheme(derive_seed(seed, "init")))?;
    let reports: Vec<FlowReport> = c
        .learning_rates
        .iter()
        .map(|&lr| {
            let cfg = FlowCheckConfig {
                p: c.p,
                lr,
                horizon: c.horizon,
                runs: c.runs,
                substeps: c.substeps,
                r2_average: c.r2_average,
                seed: derive_seed(seed, "flow"),
            };
            modified_flow_check(&init, &data, &cfg)
        })
        .collect::<Result<_>>()?;
    for r in &reports {
        let tag = format!("lr{}", r.lr);
        out.metric(format!("{tag}/dist_modified"), r.dist_modified);
        out.metric(format!("{tag}/dist_r1"), r.dist_r1);
        out.metric(format!("{tag}/dist_mse"), r.dist_mse);
    }
    let closer_to_r1 = reports.iter().all(|r| r.dist_r1 < r.dist_mse);
    let gap_shrinks = reports.windows(2).all(|w| w[1].dist_modified < w[0].dist_modified);
    let pass = closer_to_r1 && gap_shrinks;
    out.metric("pass", if pass { 1.0 } else { 0.0 });
    let summary = FlowSummary {
        reports,
        closer_to_r1,
        gap_shrinks,
        pass,
    };
    out.json("verdict.json", &summary)?;
    Ok(summary)
}
