//! Training loops: full-batch GD, minibatch SGD and Adam over a list of loss
//! phases, plus the dropout-GD vs modified-flow comparison.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, hvp_analytic, value_and_grad};
use crate::data::Dataset;
use crate::dropout::{enumerate_masks, sample_mask_seeded, stream_rng, DropoutConfig, DropoutMask};
use crate::error::{LabError, Result};
use crate::losses::{eval_components, LossSpec};
use crate::nn::{GradientSet, ParamSet};
use crate::scalar::Scalar;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Gd {
        lr: f64,
    },
    Sgd {
        lr: f64,
        batch_size: usize,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Gd { lr } | Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => lr,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let lr = self.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(LabError::config("optimizer.lr", format!("learning rate must be > 0, got {lr}")));
        }
        match *self {
            Optimizer::Sgd { batch_size, .. } if batch_size == 0 || batch_size > n => Err(LabError::config(
                "optimizer.batch_size",
                format!("batch size must lie in [1, {n}], got {batch_size}"),
            )),
            Optimizer::Adam { beta1, beta2, eps, .. }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(LabError::config("optimizer", "Adam needs beta1, beta2 in [0, 1) and eps > 0"))
            }
            _ => Ok(()),
        }
    }
}

/// One stage of a loss schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub loss: LossSpec,
    pub iterations: usize,
    /// Clear optimizer state (Adam moments) at the start of this phase.
    #[serde(default)]
    pub reset_optimizer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub phases: Vec<Phase>,
    /// Fresh `η` each step; otherwise one mask is drawn and reused.
    #[serde(default = "default_true")]
    pub resample_mask_each_step: bool,
    pub seed: u64,
    #[serde(default = "default_one")]
    pub record_every: usize,
    /// Keep a parameter snapshot every this many iterations (never if 0).
    #[serde(default)]
    pub snapshot_every: usize,
}

impl TrainConfig {
    pub fn single(optimizer: Optimizer, loss: LossSpec, iterations: usize, seed: u64) -> Self {
        TrainConfig {
            optimizer,
            phases: vec![Phase {
                loss,
                iterations,
                reset_optimizer: false,
            }],
            resample_mask_each_step: true,
            seed,
            record_every: 1,
            snapshot_every: 0,
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    pub fn validate<T: Scalar>(&self, init: &ParamSet<T>, data: &Dataset<T>) -> Result<()> {
        self.optimizer.validate(data.len())?;
        if self.phases.is_empty() {
            return Err(LabError::config("train.phases", "at least one phase is required"));
        }
        if self.record_every == 0 {
            return Err(LabError::config("train.record_every", "must be positive"));
        }
        for phase in &self.phases {
            phase.loss.validate(&init.shape)?;
        }
        init.validate()
    }
}

/// Loss components at one iteration, measured before that iteration's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub phase: usize,
    /// The optimized loss at the step's mask (and minibatch).
    pub loss: f64,
    pub mse: f64,
    pub r1: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub records: Vec<IterRecord>,
    pub snapshots: Vec<(usize, ParamSet<T>)>,
    pub seed: u64,
    /// How masks and minibatches were drawn.
    pub rng_provenance: String,
}

impl<T: Scalar> Trajectory<T> {
    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,phase,loss,mse,r1,penalty")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e}",
                r.iteration, r.phase, r.loss, r.mse, r.r1, r.penalty
            )?;
        }
        Ok(())
    }

    /// Writes `snapshot_<iteration>.bin` files into `dir`.
    pub fn write_snapshots(&self, dir: &Path) -> Result<()> {
        for (it, p) in &self.snapshots {
            p.save(&dir.join(format!("snapshot_{it:08}.bin")))?;
        }
        Ok(())
    }
}

/// What the observer sees after each update.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// Number of updates applied so far.
    pub iteration: usize,
    pub phase: usize,
    pub loss: f64,
}

enum State<T> {
    Plain,
    Adam { m: ParamSet<T>, v: ParamSet<T>, t: i32 },
}

impl<T: Scalar> State<T> {
    fn fresh(opt: &Optimizer, shape: &crate::nn::NetworkShape) -> Self {
        match opt {
            Optimizer::Adam { .. } => State::Adam {
                m: ParamSet::zeros(shape),
                v: ParamSet::zeros(shape),
                t: 0,
            },
            _ => State::Plain,
        }
    }

    fn apply(&mut self, opt: &Optimizer, params: &mut ParamSet<T>, g: &GradientSet<T>) {
        match (self, opt) {
            (State::Adam { m, v, t }, Optimizer::Adam { lr, beta1, beta2, eps }) => {
                *t += 1;
                let (b1, b2) = (T::from_f64_lossy(*beta1), T::from_f64_lossy(*beta2));
                let one = T::one();
                let c1 = one - b1.powi(*t);
                let c2 = one - b2.powi(*t);
                let (lr, eps) = (T::from_f64_lossy(*lr), T::from_f64_lossy(*eps));
                for (((p, mb), vb), gb) in params
                    .blocks_mut()
                    .into_iter()
                    .zip(m.blocks_mut())
                    .zip(v.blocks_mut())
                    .zip(g.blocks())
                {
                    for k in 0..p.len() {
                        mb[k] = b1 * mb[k] + (one - b1) * gb[k];
                        vb[k] = b2 * vb[k] + (one - b2) * gb[k] * gb[k];
                        let m_hat = mb[k] / c1;
                        let v_hat = vb[k] / c2;
                        p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            (_, opt) => params.axpy(-T::from_f64_lossy(opt.lr()), g),
        }
    }
}

/// Minibatch index stream: shuffled once per epoch, last short batch kept.
/// A batch covering the whole set is the full set in order.
struct Batcher {
    n: usize,
    size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        Batcher {
            n,
            size,
            order: (0..n).collect(),
            cursor: n,
            rng: stream_rng(seed, u64::MAX),
        }
    }

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.size >= self.n {
            return None;
        }
        if self.cursor >= self.n {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.size).min(self.n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}

pub fn train<T: Scalar>(init: &ParamSet<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<(ParamSet<T>, Trajectory<T>)> {
    train_with_observer(init, data, cfg, |_, _| ControlFlow::Continue(()))
}

/// Trains with `cfg`, calling `observer` after every update. The observer
/// can stop training early with `ControlFlow::Break`.
pub fn train_with_observer<T, F>(
    init: &ParamSet<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<(ParamSet<T>, Trajectory<T>)>
where
    T: Scalar,
    F: FnMut(&StepInfo, &ParamSet<T>) -> ControlFlow<()>,
{
    cfg.validate(init, data)?;
    let mut params = init.clone();
    let mut state = State::fresh(&cfg.optimizer, &init.shape);
    let mut trajectory = Trajectory {
        records: Vec::new(),
        snapshots: Vec::new(),
        seed: cfg.seed,
        rng_provenance: format!(
            "chacha8 seed={}; mask stream = iteration{}; minibatch shuffle stream = 2^64-1",
            cfg.seed,
            if cfg.resample_mask_each_step { "" } else { " 0 (fixed)" }
        ),
    };
    let mut batcher = match cfg.optimizer {
        Optimizer::Sgd { batch_size, .. } => Some(Batcher::new(data.len(), batch_size, cfg.seed)),
        _ => None,
    };
    let mut iteration = 0usize;
    for (phase_idx, phase) in cfg.phases.iter().enumerate() {
        if phase.reset_optimizer {
            state = State::fresh(&cfg.optimizer, &init.shape);
        }
        let spec = &phase.loss;
        for _ in 0..phase.iterations {
            let mask: Option<DropoutMask<T>> = match (&spec.dropout, spec.needs_mask()) {
                (Some(dc), true) => {
                    let stream = if cfg.resample_mask_each_step { iteration as u64 } else { 0 };
                    Some(sample_mask_seeded(dc, &params.shape, cfg.seed, stream)?)
                }
                _ => None,
            };
            let batch_data;
            let step_data = match batcher.as_mut().and_then(|b| b.next()) {
                Some(idx) => {
                    batch_data = data.subset(&idx)?;
                    &batch_data
                }
                None => data,
            };
            let (value, g) = match value_and_grad(&params, step_data, spec, mask.as_ref()) {
                Ok(vg) => vg,
                Err(LabError::NonFinite(_)) => {
                    return Err(LabError::Divergence {
                        iteration,
                        phase: phase_idx,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let loss = value.to_f64_lossy();
            if !loss.is_finite() {
                return Err(LabError::Divergence {
                    iteration,
                    phase: phase_idx,
                    loss,
                });
            }
            if iteration % cfg.record_every == 0 {
                trajectory.records.push(record(spec, &params, data, mask.as_ref(), iteration, phase_idx, loss)?);
            }
            if cfg.snapshot_every > 0 && iteration % cfg.snapshot_every == 0 {
                trajectory.snapshots.push((iteration, params.clone()));
            }
            state.apply(&cfg.optimizer, &mut params, &g);
            if !params.is_finite() {
                return Err(LabError::Divergence {
                    iteration,
                    phase: phase_idx,
                    loss,
                });
            }
            iteration += 1;
            let info = StepInfo {
                iteration,
                phase: phase_idx,
                loss,
            };
            if observer(&info, &params).is_break() {
                return Ok((params, trajectory));
            }
        }
    }
    Ok((params, trajectory))
}

fn record<T: Scalar>(
    spec: &LossSpec,
    params: &ParamSet<T>,
    data: &Dataset<T>,
    mask: Option<&DropoutMask<T>>,
    iteration: usize,
    phase: usize,
    loss: f64,
) -> Result<IterRecord> {
    let c = eval_components(spec, params, data, mask)?;
    Ok(IterRecord {
        iteration,
        phase,
        loss,
        mse: c.mse,
        r1: c.r1,
        penalty: c.penalty,
    })
}

/// How `E_η ‖∇R_S^drop‖²` is averaged inside the modified flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskAverage {
    /// All `2^m` masks with their probabilities.
    Exhaustive,
    /// A fixed set of sampled masks with equal weight.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowCheckConfig {
    /// Keep probability at the last hidden layer.
    pub p: f64,
    pub lr: f64,
    pub horizon: f64,
    /// Number of independent dropout-GD runs averaged.
    pub runs: usize,
    /// Euler steps per learning-rate step for the flows.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub r2_average: MaskAverage,
    pub seed: u64,
}

fn default_substeps() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub p: f64,
    pub lr: f64,
    pub horizon: f64,
    pub runs: usize,
    pub gd_steps: usize,
    /// `‖mean θ_GD(T) − θ_flow(T)‖` for the flow on `R_S + R_1 + R_2`.
    pub dist_modified: f64,
    /// Same distance for the flow on `R_S + R_1`.
    pub dist_r1: f64,
    /// Same distance for the flow on `R_S` alone.
    pub dist_mse: f64,
    /// Standard error of the mean iterate (Euclidean norm of per-coordinate errors).
    pub mean_std_error: f64,
}

/// Integrates `θ̇ = −∇loss(θ)` with explicit Euler for `steps` steps of size `dt`.
fn euler_flow(
    init: &ParamSet<f64>,
    steps: usize,
    dt: f64,
    mut grad_fn: impl FnMut(&ParamSet<f64>) -> Result<ParamSet<f64>>,
) -> Result<ParamSet<f64>> {
    let mut theta = init.clone();
    for k in 0..steps {
        let g = grad_fn(&theta)?;
        theta.axpy(-dt, &g);
        if !theta.is_finite() {
            return Err(LabError::Divergence {
                iteration: k,
                phase: 0,
                loss: f64::NAN,
            });
        }
    }
    Ok(theta)
}

/// Compares the mean of `runs` dropout-GD trajectories at time `horizon`
/// with three deterministic flows: on `R_S`, on `R_S + R_1`, and on
/// `R_S + R_1 + (ε/4) E_η‖∇R_S^drop‖²`.
pub fn modified_flow_check(init: &ParamSet<f64>, data: &Dataset<f64>, cfg: &FlowCheckConfig) -> Result<FlowReport> {
    let shape = &init.shape;
    let dropout = DropoutConfig::last_hidden(cfg.p, shape)?;
    if !(cfg.lr > 0.0 && cfg.horizon > 0.0) {
        return Err(LabError::config("flow", "lr and horizon must be positive"));
    }
    if cfg.runs < 2 || cfg.substeps == 0 {
        return Err(LabError::config("flow.runs", "need at least two runs and one substep"));
    }
    let gd_steps = (cfg.horizon / cfg.lr).round() as usize;
    let drop_spec = LossSpec::dropout_mse(dropout.clone());

    let finals: Vec<Vec<f64>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let run_seed = cfg.seed ^ (run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut theta = init.clone();
            for t in 0..gd_steps {
                let mask = sample_mask_seeded(&dropout, shape, run_seed, t as u64)?;
                let g = grad(&theta, data, &drop_spec, Some(&mask))?;
                theta.axpy(-cfg.lr, &g);
            }
            if !theta.is_finite() {
                return Err(LabError::NonFinite(format!("dropout GD run {run}")));
            }
            Ok(theta.to_flat())
        })
        .collect::<Result<_>>()?;
    let dim = init.num_params();
    let k = cfg.runs as f64;
    let mut mean = vec![0.0; dim];
    for f in &finals {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / k;
        }
    }
    let var_sum: f64 = (0..dim)
        .map(|i| finals.iter().map(|f| (f[i] - mean[i]).powi(2)).sum::<f64>() / (k - 1.0))
        .sum();
    let mean_std_error = (var_sum / k).sqrt();
    let mean = ParamSet::from_flat(shape, &mean)?;

    let dt = cfg.lr / cfg.substeps as f64;
    let flow_steps = gd_steps * cfg.substeps;
    let mse_spec = LossSpec::mse();
    let r1_spec = LossSpec::mse_plus_r1(dropout.clone());

    let weighted_masks: Vec<(f64, DropoutMask<f64>)> = match cfg.r2_average {
        MaskAverage::Exhaustive => enumerate_masks(cfg.p, shape.depth() - 1, shape.width(shape.depth() - 1))?,
        MaskAverage::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(LabError::config("flow.r2_average.samples", "must be positive"));
            }
            (0..samples)
                .map(|s| Ok((1.0 / samples as f64, sample_mask_seeded(&dropout, shape, seed, s as u64)?)))
                .collect::<Result<_>>()?
        }
    };
    // ∇[(ε/4) E‖g_η‖²] = (ε/2) E[H_η g_η]
    let r2_grad = |theta: &ParamSet<f64>| -> Result<ParamSet<f64>> {
        let mut acc = ParamSet::zeros(shape);
        for (w, m) in &weighted_masks {
            let g = grad(theta, data, &drop_spec, Some(m))?;
            if g.norm_sq() == 0.0 {
                continue;
            }
            let hg = hvp_analytic(theta, data, &drop_spec, &g, Some(m))?;
            acc.axpy(w * cfg.lr / 2.0, &hg);
        }
        Ok(acc)
    };

    let (flow_mse, (flow_r1, flow_mod)) = rayon::join(
        || euler_flow(init, flow_steps, dt, |t| grad(t, data, &mse_spec, None)),
        || {
            rayon::join(
                || euler_flow(init, flow_steps, dt, |t| grad(t, data, &r1_spec, None)),
                || {
                    euler_flow(init, flow_steps, dt, |t| {
                        let mut g = grad(t, data, &r1_spec, None)?;
                        g.axpy(1.0, &r2_grad(t)?);
                        Ok(g)
                    })
                },
            )
        },
    );
    let dist = |flow: &ParamSet<f64>| mean.added(-1.0, flow).norm();
    Ok(FlowReport {
        p: cfg.p,
        lr: cfg.lr,
        horizon: cfg.horizon,
        runs: cfg.runs,
        gd_steps,
        dist_modified: dist(&flow_mod?),
        dist_r1: dist(&flow_r1?),
        dist_mse: dist(&flow_mse?),
        mean_std_error,
    })
}
