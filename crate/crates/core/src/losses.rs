//! Scalar objectives: `R_S`, `R_S^drop`, the dropout penalty `R_1`, the
//! gradient-norm penalty `R̃_2` and the composites `L_1 … L_4`.
//!
//! All squared losses use the `1/(2n)` convention.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autodiff;
use crate::data::Dataset;
use crate::dropout::{check_keep_probability, DropoutConfig, DropoutMask};
use crate::error::{LabError, Result};
use crate::nn::{batch_forward, hidden_batch, predict, NetworkShape, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    /// `R_S`.
    Mse,
    /// `R_S^drop`, the squared loss of the masked network.
    DropoutMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Prefactor of `R_1`: `Paper` uses `(1-p)/p` from the dropout config,
/// `Explicit` uses `lambda` in its place.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum R1Weight {
    Paper,
    Explicit { lambda: f64 },
}

/// Coefficient `c` of the penalty `(c/4)‖∇ inner‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PenaltyCoefficient {
    /// The loss spec's `lr_for_r2`.
    LearningRate,
    Explicit { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Addon {
    R1 {
        weight: R1Weight,
        sign: Sign,
    },
    GradNormPenalty {
        coefficient: PenaltyCoefficient,
        sign: Sign,
        inner: BaseLoss,
    },
}

/// Declarative objective: a base loss plus signed add-ons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub base: BaseLoss,
    #[serde(default)]
    pub addons: Vec<Addon>,
    #[serde(default)]
    pub dropout: Option<DropoutConfig>,
    /// Learning rate `ε` used by `PenaltyCoefficient::LearningRate`.
    #[serde(default)]
    pub lr_for_r2: Option<f64>,
    /// Overall multiplier of the assembled loss.
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl LossSpec {
    pub fn mse() -> Self {
        LossSpec {
            base: BaseLoss::Mse,
            addons: Vec::new(),
            dropout: None,
            lr_for_r2: None,
            scale: 1.0,
        }
    }

    pub fn dropout_mse(cfg: DropoutConfig) -> Self {
        LossSpec {
            base: BaseLoss::DropoutMse,
            addons: Vec::new(),
            dropout: Some(cfg),
            lr_for_r2: None,
            scale: 1.0,
        }
    }

    /// `R_S + R_1`.
    pub fn mse_plus_r1(cfg: DropoutConfig) -> Self {
        LossSpec {
            base: BaseLoss::Mse,
            addons: vec![Addon::R1 {
                weight: R1Weight::Paper,
                sign: Sign::Plus,
            }],
            dropout: Some(cfg),
            lr_for_r2: None,
            scale: 1.0,
        }
    }

    /// `L_1 = R_S + R_1`.
    pub fn l1(cfg: DropoutConfig) -> Self {
        Self::mse_plus_r1(cfg)
    }

    /// `L_2 = R_S + (ε/4)‖∇R_S^drop‖²`.
    pub fn l2(cfg: DropoutConfig, lr: f64) -> Self {
        LossSpec {
            base: BaseLoss::Mse,
            addons: vec![Addon::GradNormPenalty {
                coefficient: PenaltyCoefficient::LearningRate,
                sign: Sign::Plus,
                inner: BaseLoss::DropoutMse,
            }],
            dropout: Some(cfg),
            lr_for_r2: Some(lr),
            scale: 1.0,
        }
    }

    /// `L_3 = R_S^drop - (ε/4)‖∇R_S^drop‖²`.
    pub fn l3(cfg: DropoutConfig, lr: f64) -> Self {
        LossSpec {
            base: BaseLoss::DropoutMse,
            addons: vec![Addon::GradNormPenalty {
                coefficient: PenaltyCoefficient::LearningRate,
                sign: Sign::Minus,
                inner: BaseLoss::DropoutMse,
            }],
            dropout: Some(cfg),
            lr_for_r2: Some(lr),
            scale: 1.0,
        }
    }

    /// `L_4 = R_S^drop - R_1`.
    pub fn l4(cfg: DropoutConfig) -> Self {
        LossSpec {
            base: BaseLoss::DropoutMse,
            addons: vec![Addon::R1 {
                weight: R1Weight::Paper,
                sign: Sign::Minus,
            }],
            dropout: Some(cfg),
            lr_for_r2: None,
            scale: 1.0,
        }
    }

    /// `R_S^drop + (λ/4)‖∇R_S^drop‖²`.
    pub fn dropout_mse_with_penalty(cfg: DropoutConfig, lambda: f64) -> Self {
        LossSpec {
            base: BaseLoss::DropoutMse,
            addons: vec![Addon::GradNormPenalty {
                coefficient: PenaltyCoefficient::Explicit { lambda },
                sign: Sign::Plus,
                inner: BaseLoss::DropoutMse,
            }],
            dropout: Some(cfg),
            lr_for_r2: None,
            scale: 1.0,
        }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale *= scale;
        self
    }

    pub fn with_addon(mut self, addon: Addon) -> Self {
        self.addons.push(addon);
        self
    }

    /// True when evaluating the loss needs a realized mask.
    pub fn needs_mask(&self) -> bool {
        self.base == BaseLoss::DropoutMse
            || self.addons.iter().any(|a| {
                matches!(
                    a,
                    Addon::GradNormPenalty {
                        inner: BaseLoss::DropoutMse,
                        ..
                    }
                )
            })
    }

    pub fn has_penalty(&self) -> bool {
        self.addons
            .iter()
            .any(|a| matches!(a, Addon::GradNormPenalty { .. }))
    }

    pub fn validate(&self, shape: &NetworkShape) -> Result<()> {
        if !self.scale.is_finite() {
            return Err(LabError::config("loss.scale", "scale must be finite"));
        }
        if let Some(cfg) = &self.dropout {
            cfg.validate(shape)?;
        }
        if self.needs_mask() && self.dropout.is_none() {
            return Err(LabError::config(
                "loss.dropout",
                "a dropout term requires a dropout configuration",
            ));
        }
        for addon in &self.addons {
            match addon {
                Addon::R1 { weight, .. } => {
                    if let Some(cfg) = &self.dropout {
                        if !cfg.is_last_hidden_only(shape) {
                            return Err(LabError::config(
                                "loss.addons",
                                "R1 is defined for a single dropout site after the last hidden layer",
                            ));
                        }
                    }
                    match weight {
                        R1Weight::Paper if self.dropout.is_none() => {
                            return Err(LabError::config(
                                "loss.dropout",
                                "R1 with paper weight needs the keep probability",
                            ))
                        }
                        R1Weight::Explicit { lambda } if !lambda.is_finite() => {
                            return Err(LabError::config("loss.addons", "R1 lambda is not finite"))
                        }
                        _ => {}
                    }
                }
                Addon::GradNormPenalty { coefficient, .. } => {
                    let c = match coefficient {
                        PenaltyCoefficient::LearningRate => self.lr_for_r2.ok_or_else(|| {
                            LabError::config(
                                "loss.lr_for_r2",
                                "learning-rate penalty coefficient needs lr_for_r2",
                            )
                        })?,
                        PenaltyCoefficient::Explicit { lambda } => *lambda,
                    };
                    if !(c.is_finite() && c >= 0.0) {
                        return Err(LabError::config(
                            "loss.addons",
                            format!("penalty coefficient must be finite and >= 0, got {c}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Signed total prefactor `Σ ± κ` of the `R_1` add-ons (`κ = (1-p)/p`
    /// in paper mode).
    pub fn r1_kappa(&self) -> f64 {
        self.addons
            .iter()
            .filter_map(|a| match a {
                Addon::R1 { weight, sign } => {
                    let kappa = match weight {
                        R1Weight::Paper => self.dropout.as_ref().map_or(0.0, |c| c.kept_eta()),
                        R1Weight::Explicit { lambda } => *lambda,
                    };
                    Some(sign.value() * kappa)
                }
                _ => None,
            })
            .sum()
    }

    /// `(signed coefficient c, inner loss)` for every penalty term
    /// `± (c/4)‖∇ inner‖²`.
    pub fn penalties(&self) -> Vec<(f64, BaseLoss)> {
        self.addons
            .iter()
            .filter_map(|a| match a {
                Addon::GradNormPenalty {
                    coefficient,
                    sign,
                    inner,
                } => {
                    let c = match coefficient {
                        PenaltyCoefficient::LearningRate => self.lr_for_r2.unwrap_or(0.0),
                        PenaltyCoefficient::Explicit { lambda } => *lambda,
                    };
                    Some((sign.value() * c, *inner))
                }
                _ => None,
            })
            .collect()
    }

    pub(crate) fn check_mask<T>(&self, mask: Option<&DropoutMask<T>>) -> Result<()> {
        match (self.needs_mask(), mask.is_some()) {
            (true, false) => Err(LabError::Mask("loss has a dropout term but no mask was given".into())),
            (false, true) => Err(LabError::Mask("mask given for a loss without a dropout term".into())),
            _ => Ok(()),
        }
    }
}

/// Per-term breakdown of a loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    /// `R_S` (no dropout).
    pub mse: f64,
    /// `R_1` at the spec's keep probability; 0 without dropout.
    pub r1: f64,
    /// Sum of the signed gradient-norm penalty terms.
    pub penalty: f64,
}

fn check_data<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>) -> Result<()> {
    if data.is_empty() {
        return Err(LabError::config("dataset", "dataset is empty"));
    }
    if data.input_dim() != params.shape.input_dim() {
        return Err(LabError::dim("dataset inputs", params.shape.input_dim(), data.input_dim()));
    }
    if data.target_dim() != params.shape.output_dim() {
        return Err(LabError::dim("dataset targets", params.shape.output_dim(), data.target_dim()));
    }
    Ok(())
}

fn half_mean_sq<T: Scalar>(outputs: &ndarray::Array2<T>, data: &Dataset<T>) -> T {
    let n = T::from_usize(data.len()).expect("n fits");
    let sum = outputs
        .iter()
        .zip(data.targets.iter())
        .fold(T::zero(), |acc, (&f, &y)| acc + (f - y) * (f - y));
    sum / (n + n)
}

/// `R_S(θ) = (1/2n) Σ ‖f_θ(x_i) - y_i‖²`.
pub fn mse<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>) -> Result<T> {
    check_data(params, data)?;
    let out = predict(params, data.inputs.view(), None)?;
    Ok(half_mean_sq(&out, data))
}

/// `R_S^drop(θ, η)`: the squared loss of the masked network.
pub fn dropout_mse<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>, mask: &DropoutMask<T>) -> Result<T> {
    check_data(params, data)?;
    let out = predict(params, data.inputs.view(), Some(mask))?;
    Ok(half_mean_sq(&out, data))
}

/// `R_1(θ) = ((1-p)/(2np)) Σ_i Σ_j ‖W^[L]_j f^[L-1]_j(x_i)‖²` where `W^[L]_j`
/// is the j-th column of the output weight.
pub fn r1<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>, p: f64) -> Result<T> {
    check_keep_probability(p)?;
    r1_weighted(params, data, T::from_f64_lossy((1.0 - p) / p))
}

/// `R_1` with the prefactor `(1-p)/p` replaced by `kappa`.
pub fn r1_weighted<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>, kappa: T) -> Result<T> {
    check_data(params, data)?;
    let last = params.depth();
    let hidden = hidden_batch(params, data.inputs.view(), last - 1)?;
    let col_norms = params.weight(last).mapv(|w| w * w).sum_axis(Axis(0));
    let act_sq = hidden.mapv(|h| h * h).sum_axis(Axis(0));
    let n = T::from_usize(data.len()).expect("n fits");
    let total = col_norms
        .iter()
        .zip(act_sq.iter())
        .fold(T::zero(), |acc, (&c, &s)| acc + c * s);
    Ok(kappa * total / (n + n))
}

/// `(coefficient/4) ‖∇_θ inner(θ, η)‖²`.
pub fn grad_norm_penalty<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    inner: &LossSpec,
    coefficient: T,
    mask: Option<&DropoutMask<T>>,
) -> Result<T> {
    let g = autodiff::grad(params, data, inner, mask)?;
    Ok(coefficient * g.norm_sq() / T::from_f64_lossy(4.0))
}

/// Spec for an inner loss of a penalty term, keeping the outer dropout
/// configuration.
pub(crate) fn inner_spec(base: BaseLoss, outer: &LossSpec) -> LossSpec {
    LossSpec {
        base,
        addons: Vec::new(),
        dropout: outer.dropout.clone(),
        lr_for_r2: None,
        scale: 1.0,
    }
}

/// Mask restricted to what `spec` uses.
pub(crate) fn mask_for<'a, T>(base: BaseLoss, mask: Option<&'a DropoutMask<T>>) -> Option<&'a DropoutMask<T>> {
    match base {
        BaseLoss::Mse => None,
        BaseLoss::DropoutMse => mask,
    }
}

/// Evaluates the assembled objective `base ± R_1 ± penalties`.
pub fn eval_loss<T: Scalar>(
    spec: &LossSpec,
    params: &ParamSet<T>,
    data: &Dataset<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<T> {
    spec.validate(&params.shape)?;
    spec.check_mask(mask)?;
    check_data(params, data)?;
    let mut total = match spec.base {
        BaseLoss::Mse => mse(params, data)?,
        BaseLoss::DropoutMse => dropout_mse(params, data, mask.expect("checked"))?,
    };
    let kappa = spec.r1_kappa();
    if kappa != 0.0 {
        total += r1_weighted(params, data, T::from_f64_lossy(kappa))?;
    }
    for (c, inner) in spec.penalties() {
        let inner_loss = inner_spec(inner, spec);
        total += grad_norm_penalty(
            params,
            data,
            &inner_loss,
            T::from_f64_lossy(c),
            mask_for(inner, mask),
        )?;
    }
    Ok(total * T::from_f64_lossy(spec.scale))
}

/// Loss value together with its `R_S`, `R_1` and penalty parts.
pub fn eval_components<T: Scalar>(
    spec: &LossSpec,
    params: &ParamSet<T>,
    data: &Dataset<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<LossComponents> {
    let total = eval_loss(spec, params, data, mask)?.to_f64_lossy();
    let mse_value = mse(params, data)?.to_f64_lossy();
    let r1_value = match &spec.dropout {
        Some(cfg) if cfg.is_last_hidden_only(&params.shape) => r1(params, data, cfg.p)?.to_f64_lossy(),
        _ => 0.0,
    };
    let mut penalty = 0.0;
    for (c, inner) in spec.penalties() {
        let inner_loss = inner_spec(inner, spec);
        penalty += grad_norm_penalty(
            params,
            data,
            &inner_loss,
            T::from_f64_lossy(c),
            mask_for(inner, mask),
        )?
        .to_f64_lossy();
    }
    Ok(LossComponents {
        total,
        mse: mse_value,
        r1: r1_value,
        penalty,
    })
}

/// Per-sample residuals `f_θ(x_i) - y_i`.
pub fn residuals<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>) -> Result<ndarray::Array2<T>> {
    check_data(params, data)?;
    let pass = batch_forward(params, data.inputs.view(), None)?;
    Ok(pass.output - &data.targets)
}
