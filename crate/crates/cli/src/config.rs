//! Declarative experiment configuration, parsed from TOML with strict
//! unknown-key rejection.

use std::path::{Path, PathBuf};

use droplab::data::{load_mnist_idx, synth_relu_target, synth_tanh_target, Sampling};
use droplab::losses::LossSpec;
use droplab::nn::{InitKind, InitScheme, NetworkShape};
use droplab::optimize::{MaskAverage, Optimizer};
use droplab::{Dataset64, LabError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used for the artifact directory.
    pub name: String,
    /// Global seed; every other stream is derived from it.
    pub seed: u64,
    /// Artifact root; falls back to `DROPLAB_OUT`, then `runs`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    CondensationFit(CondensationFit),
    LossSwitch(LossSwitch),
    R1Equivalence(R1Equivalence),
    R2Duality(R2Duality),
    TeacherStudentSweep(TeacherStudentSweep),
    FlatnessProfile(FlatnessProfile),
    InterpolationStudy(InterpolationStudy),
    TheoryVerify(TheoryVerify),
    ModifiedFlowCheck(ModifiedFlowCheck),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::CondensationFit(_) => "condensation_fit",
            Experiment::LossSwitch(_) => "loss_switch",
            Experiment::R1Equivalence(_) => "r1_equivalence",
            Experiment::R2Duality(_) => "r2_duality",
            Experiment::TeacherStudentSweep(_) => "teacher_student_sweep",
            Experiment::FlatnessProfile(_) => "flatness_profile",
            Experiment::InterpolationStudy(_) => "interpolation_study",
            Experiment::TheoryVerify(_) => "theory_verify",
            Experiment::ModifiedFlowCheck(_) => "modified_flow_check",
        }
    }

    /// Kinds whose verdict sets the exit status.
    pub fn is_verifier(&self) -> bool {
        matches!(self, Experiment::TheoryVerify(_) | Experiment::ModifiedFlowCheck(_))
    }
}

/// Where the training (and optional test) data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TanhTarget {
        n: usize,
        x_range: (f64, f64),
        #[serde(default = "grid")]
        sampling: Sampling,
    },
    ReluTarget {
        n: usize,
        x_range: (f64, f64),
        #[serde(default = "grid")]
        sampling: Sampling,
    },
    /// IDX files `train-*-idx*-ubyte` / `t10k-*` in `dir`; the `DROPLAB_MNIST`
    /// variable overrides `dir`.
    Mnist {
        dir: PathBuf,
        train: usize,
        test: usize,
    },
}

fn grid() -> Sampling {
    Sampling::Grid
}

pub const MNIST_ENV: &str = "DROPLAB_MNIST";

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::TanhTarget { n, x_range, .. } | DatasetSpec::ReluTarget { n, x_range, .. } => {
                if *n < 2 {
                    return Err(LabError::config("data.n", format!("need at least 2 points, got {n}")));
                }
                if !(x_range.0 < x_range.1) {
                    return Err(LabError::config("data.x_range", "lower bound must be below upper bound"));
                }
            }
            DatasetSpec::Mnist { train, test, .. } => {
                if *train == 0 || *test == 0 {
                    return Err(LabError::config("data.train", "train and test counts must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn is_1d(&self) -> bool {
        !matches!(self, DatasetSpec::Mnist { .. })
    }

    /// Training set and, when the source has one, a held-out test set.
    pub fn load(&self, base: &Path) -> Result<(Dataset64, Option<Dataset64>)> {
        match self {
            DatasetSpec::TanhTarget { n, x_range, sampling } => Ok((synth_tanh_target(*n, *x_range, *sampling)?, None)),
            DatasetSpec::ReluTarget { n, x_range, sampling } => Ok((synth_relu_target(*n, *x_range, *sampling)?, None)),
            DatasetSpec::Mnist { dir, train, test } => {
                let dir = match std::env::var_os(MNIST_ENV) {
                    Some(d) => PathBuf::from(d),
                    None if dir.is_relative() => base.join(dir),
                    None => dir.clone(),
                };
                let tr = load_mnist_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                    *train,
                )?;
                let te = load_mnist_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                    *test,
                )?;
                Ok((tr, Some(te)))
            }
        }
    }
}

/// Network shape and initialization family; the init seed comes from the
/// run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub shape: NetworkShape,
    pub init: InitKind,
}

impl ModelSpec {
    pub fn scheme(&self, seed: u64) -> InitScheme {
        InitScheme {
            kind: self.init.clone(),
            seed,
        }
    }

    pub fn validate(&self, data: &DatasetSpec) -> Result<()> {
        self.shape.validate()?;
        self.scheme(0).variance(&self.shape)?;
        if data.is_1d() && (self.shape.input_dim() != 1 || self.shape.output_dim() != 1) {
            return Err(LabError::config("model.shape", "1-D datasets need input and output width 1"));
        }
        if let DatasetSpec::Mnist { .. } = data {
            if self.shape.input_dim() != 784 || self.shape.output_dim() != 10 {
                return Err(LabError::config("model.shape", "MNIST needs input width 784 and output width 10"));
            }
        }
        Ok(())
    }
}

fn check_p(field: &str, p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(LabError::config(field, format!("keep probability must lie in (0, 1], got {p}")))
    }
}

fn check_positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(LabError::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn check_nonzero(field: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(LabError::config(field, "must be at least 1"))
    }
}

/// Floating-point type used for training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

fn default_threshold() -> f64 {
    0.95
}

fn default_record_every() -> usize {
    100
}

/// Evenly spaced evaluation points on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.lo];
        }
        (0..self.points)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.points - 1) as f64)
            .collect()
    }

    fn validate(&self, field: &str) -> Result<()> {
        if self.points == 0 || !(self.lo <= self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(LabError::config(field, "grid needs points >= 1 and lo <= hi"));
        }
        Ok(())
    }
}

/// Trains one model per keep probability (1 means no dropout) and records
/// effective ratio, features, output curve and derivative variation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondensationFit {
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub optimizer: Optimizer,
    pub iterations: usize,
    pub keep_probs: Vec<f64>,
    /// Dropout after every hidden layer instead of only the last one.
    #[serde(default)]
    pub all_hidden: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Output curve and derivative variation are sampled on this grid.
    pub curve: Grid,
}

/// Trains on `R_S`, then switches to `R_S + R_1` (and/or `R_S^drop`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSwitch {
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub optimizer: Optimizer,
    pub pre_iterations: usize,
    pub post_iterations: usize,
    pub p: f64,
    /// Continue with `R_S + R_1`, with `R_S^drop`, or both as two branches.
    pub branches: Vec<SwitchBranch>,
    #[serde(default)]
    pub reset_optimizer: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchBranch {
    MsePlusR1,
    Dropout,
}

/// For every keep probability, trains with `R_S^drop` and with `R_S + R_1`;
/// plus one `R_S` baseline. Reports test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct R1Equivalence {
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub lr: f64,
    pub iterations: usize,
    pub keep_probs: Vec<f64>,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub precision: Precision,
}

/// Dropout GD at each large learning rate `ε` versus small-rate GD on
/// `R_S^drop + (λ/4)‖∇R_S^drop‖²` with `λ = ε`; compares the ratio statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct R2Duality {
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub p: f64,
    pub learning_rates: Vec<f64>,
    pub small_lr: f64,
    /// Training time `iterations × lr` shared by all runs.
    pub horizon: f64,
    /// Cap on the number of small-rate steps (time is then shorter).
    #[serde(default)]
    pub max_small_steps: Option<usize>,
    pub ratio_samples: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub precision: Precision,
}

/// Teacher-student grid over sample size and keep probability, averaged
/// over trials; runs are fanned across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherStudentSweep {
    pub input_dim: usize,
    pub teacher_width: usize,
    pub teacher_init: InitKind,
    pub student: ModelSpec,
    pub optimizer: Optimizer,
    pub iterations: usize,
    pub sample_sizes: Vec<usize>,
    pub keep_probs: Vec<f64>,
    pub trials: usize,
    pub test_size: usize,
}

/// Loss along a filter-normalized random direction through minima found
/// with each keep probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatnessProfile {
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub optimizer: Optimizer,
    pub iterations: usize,
    pub keep_probs: Vec<f64>,
    pub alphas: Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedLoss {
    Mse,
    Dropout,
    MsePlusR1,
    L1,
    L2,
    L3,
    L4,
}

impl NamedLoss {
    pub fn spec(self, p: f64, lr: f64, shape: &NetworkShape) -> Result<LossSpec> {
        use droplab::dropout::DropoutConfig;
        let cfg = DropoutConfig::last_hidden(p, shape)?;
        Ok(match self {
            NamedLoss::Mse => LossSpec::mse(),
            NamedLoss::Dropout => LossSpec::dropout_mse(cfg),
            NamedLoss::MsePlusR1 => LossSpec::mse_plus_r1(cfg),
            NamedLoss::L1 => LossSpec::l1(cfg),
            NamedLoss::L2 => LossSpec::l2(cfg, lr),
            NamedLoss::L3 => LossSpec::l3(cfg, lr),
            NamedLoss::L4 => LossSpec::l4(cfg),
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            NamedLoss::Mse => "mse",
            NamedLoss::Dropout => "dropout",
            NamedLoss::MsePlusR1 => "mse_plus_r1",
            NamedLoss::L1 => "l1",
            NamedLoss::L2 => "l2",
            NamedLoss::L3 => "l3",
            NamedLoss::L4 => "l4",
        }
    }
}

/// Trains two models from the same initialization with two losses and
/// records `R_S` along the straight line between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolationStudy {
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub lr: f64,
    pub iterations: usize,
    pub p: f64,
    pub losses: (NamedLoss, NamedLoss),
    pub alphas: Grid,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub precision: Precision,
}

/// Numerical checks of the expectation lemma and the two theorems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryVerify {
    #[serde(default)]
    pub lemma: Option<LemmaCheck>,
    #[serde(default)]
    pub perturbation: Option<PerturbationCheck>,
    #[serde(default)]
    pub flatness: Option<FlatnessCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaCheck {
    pub widths: Vec<usize>,
    pub keep_probs: Vec<f64>,
    pub instances: usize,
    #[serde(default = "default_lemma_n")]
    pub samples: usize,
    #[serde(default)]
    pub monte_carlo: Option<usize>,
}

fn default_lemma_n() -> usize {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationCheck {
    pub fixtures_per_case: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatnessCheck {
    pub instances: usize,
}

/// Mean dropout-GD iterate against the three flows, at each learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModifiedFlowCheck {
    pub data: DatasetSpec,
    pub model: ModelSpec,
    pub p: f64,
    /// Checked in order; each should be half the previous one.
    pub learning_rates: Vec<f64>,
    pub horizon: f64,
    pub runs: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub r2_average: MaskAverage,
}

fn default_substeps() -> usize {
    100
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| LabError::config("config", e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(LabError::config("name", "must be a non-empty file-name-safe label"));
        }
        match &self.experiment {
            Experiment::CondensationFit(c) => {
                c.data.validate()?;
                c.model.validate(&c.data)?;
                check_nonzero("experiment.keep_probs", c.keep_probs.len())?;
                for &p in &c.keep_probs {
                    check_p("experiment.keep_probs", p)?;
                }
                check_nonzero("experiment.record_every", c.record_every)?;
                check_threshold(c.threshold)?;
                c.curve.validate("experiment.curve")?;
            }
            Experiment::LossSwitch(c) => {
                c.data.validate()?;
                c.model.validate(&c.data)?;
                check_p("experiment.p", c.p)?;
                check_nonzero("experiment.branches", c.branches.len())?;
                check_nonzero("experiment.record_every", c.record_every)?;
                check_threshold(c.threshold)?;
            }
            Experiment::R1Equivalence(c) => {
                c.data.validate()?;
                c.model.validate(&c.data)?;
                check_positive("experiment.lr", c.lr)?;
                check_nonzero("experiment.keep_probs", c.keep_probs.len())?;
                for &p in &c.keep_probs {
                    check_p("experiment.keep_probs", p)?;
                }
                check_nonzero("experiment.record_every", c.record_every)?;
            }
            Experiment::R2Duality(c) => {
                c.data.validate()?;
                c.model.validate(&c.data)?;
                check_p("experiment.p", c.p)?;
                check_nonzero("experiment.learning_rates", c.learning_rates.len())?;
                for &lr in &c.learning_rates {
                    check_positive("experiment.learning_rates", lr)?;
                }
                check_positive("experiment.small_lr", c.small_lr)?;
                check_positive("experiment.horizon", c.horizon)?;
                check_nonzero("experiment.ratio_samples", c.ratio_samples)?;
                check_nonzero("experiment.record_every", c.record_every)?;
            }
            Experiment::TeacherStudentSweep(c) => {
                check_nonzero("experiment.input_dim", c.input_dim)?;
                check_nonzero("experiment.teacher_width", c.teacher_width)?;
                c.student.shape.validate()?;
                if c.student.shape.input_dim() != c.input_dim || c.student.shape.output_dim() != 1 {
                    return Err(LabError::config("experiment.student.shape", "student must map input_dim to 1"));
                }
                check_nonzero("experiment.sample_sizes", c.sample_sizes.len())?;
                check_nonzero("experiment.trials", c.trials)?;
                check_nonzero("experiment.test_size", c.test_size)?;
                for &p in &c.keep_probs {
                    check_p("experiment.keep_probs", p)?;
                }
            }
            Experiment::FlatnessProfile(c) => {
                c.data.validate()?;
                c.model.validate(&c.data)?;
                check_nonzero("experiment.keep_probs", c.keep_probs.len())?;
                for &p in &c.keep_probs {
                    check_p("experiment.keep_probs", p)?;
                }
                c.alphas.validate("experiment.alphas")?;
            }
            Experiment::InterpolationStudy(c) => {
                c.data.validate()?;
                c.model.validate(&c.data)?;
                check_positive("experiment.lr", c.lr)?;
                check_p("experiment.p", c.p)?;
                c.alphas.validate("experiment.alphas")?;
                check_nonzero("experiment.record_every", c.record_every)?;
            }
            Experiment::TheoryVerify(c) => {
                if let Some(l) = &c.lemma {
                    for &p in &l.keep_probs {
                        check_p("experiment.lemma.keep_probs", p)?;
                    }
                    for &w in &l.widths {
                        if w == 0 || (l.monte_carlo.is_none() && w > droplab::theory::EXHAUSTIVE_MAX_WIDTH) {
                            return Err(LabError::config(
                                "experiment.lemma.widths",
                                format!("width {w} outside 1..={}", droplab::theory::EXHAUSTIVE_MAX_WIDTH),
                            ));
                        }
                    }
                    check_nonzero("experiment.lemma.samples", l.samples)?;
                }
                if let Some(pc) = &c.perturbation {
                    check_p("experiment.perturbation.p", pc.p)?;
                }
                if c.lemma.is_none() && c.perturbation.is_none() && c.flatness.is_none() {
                    return Err(LabError::config("experiment", "enable at least one of lemma, perturbation, flatness"));
                }
            }
            Experiment::ModifiedFlowCheck(c) => {
                c.data.validate()?;
                c.model.validate(&c.data)?;
                check_p("experiment.p", c.p)?;
                if c.learning_rates.len() < 2 {
                    return Err(LabError::config("experiment.learning_rates", "need at least two learning rates"));
                }
                for &lr in &c.learning_rates {
                    check_positive("experiment.learning_rates", lr)?;
                }
                check_positive("experiment.horizon", c.horizon)?;
                if c.runs < 2 {
                    return Err(LabError::config("experiment.runs", "need at least two runs"));
                }
                check_nonzero("experiment.substeps", c.substeps)?;
            }
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(LabError::config("experiment.threshold", format!("must lie in (0, 1], got {t}")))
    }
}
