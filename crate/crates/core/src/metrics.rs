//! Condensation features, effective ratio, loss profiles along random
//! directions, interpolation curves, the Hessian-trace flatness identity and
//! the loss-to-gradient-norm ratio statistic.

use std::io::Write;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::grad;
use crate::data::{argmax_rows, Dataset};
use crate::dropout::{sample_mask_seeded, DropoutConfig, DropoutMask, McEstimate};
use crate::error::{LabError, Result};
use crate::losses::{dropout_mse, eval_loss, mse, LossSpec};
use crate::nn::{batch_forward, predict, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronFeature {
    pub neuron: usize,
    /// Unit input-weight vector `ŵ_j` (bias appended at the first layer).
    pub orientation: Vec<f64>,
    /// `atan2` angle in `[-π, π)` when the augmented input is two-dimensional.
    pub angle: Option<f64>,
    /// `|a_j| ‖w_j‖`, divided by the layer maximum when normalized.
    pub amplitude: f64,
    pub a_norm: f64,
    pub w_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub layer: usize,
    pub features: Vec<NeuronFeature>,
    /// Neurons with `‖w_j‖ < 1e-12`, left out of `features`.
    pub excluded: usize,
}

fn check_hidden<T: Scalar>(params: &ParamSet<T>, l: usize) -> Result<()> {
    if l == 0 || l >= params.depth() {
        return Err(LabError::config(
            "layer",
            format!("hidden layer index must be in 1..={}, got {l}", params.depth() - 1),
        ));
    }
    Ok(())
}

/// Input-weight vectors of layer `l`, one row per neuron; the bias is appended
/// at the first layer.
pub fn input_vectors<T: Scalar>(params: &ParamSet<T>, l: usize) -> Result<Array2<f64>> {
    check_hidden(params, l)?;
    let layer = &params.layers[l - 1];
    let w = layer.weight.mapv(|v| v.to_f64_lossy());
    match (&layer.bias, l) {
        (Some(b), 1) => {
            let b = b.mapv(|v| v.to_f64_lossy()).insert_axis(Axis(1));
            Ok(ndarray::concatenate(Axis(1), &[w.view(), b.view()]).expect("row counts match"))
        }
        _ => Ok(w),
    }
}

pub fn neuron_features<T: Scalar>(params: &ParamSet<T>, l: usize, normalize: bool) -> Result<FeatureSet> {
    let vectors = input_vectors(params, l)?;
    let out_w = params.weight(l + 1);
    let mut features = Vec::new();
    let mut excluded = 0;
    for (j, row) in vectors.rows().into_iter().enumerate() {
        let w_norm = row.dot(&row).sqrt();
        if w_norm < 1e-12 {
            excluded += 1;
            continue;
        }
        let a_norm = out_w.column(j).iter().map(|a| a.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        let orientation: Vec<f64> = row.iter().map(|v| v / w_norm).collect();
        let angle = (orientation.len() == 2).then(|| {
            let t = orientation[1].atan2(orientation[0]);
            if t >= std::f64::consts::PI {
                t - 2.0 * std::f64::consts::PI
            } else {
                t
            }
        });
        features.push(NeuronFeature {
            neuron: j,
            orientation,
            angle,
            amplitude: a_norm * w_norm,
            a_norm,
            w_norm,
        });
    }
    if normalize {
        let max = features.iter().map(|f| f.amplitude).fold(0.0, f64::max);
        if max > 0.0 {
            for f in &mut features {
                f.amplitude /= max;
            }
        }
    }
    Ok(FeatureSet { layer: l, features, excluded })
}

impl FeatureSet {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "neuron,angle,amplitude,a_norm,w_norm")?;
        for f in &self.features {
            let angle = f.angle.map_or(String::new(), |a| format!("{a:e}"));
            writeln!(out, "{},{},{:e},{:e},{:e}", f.neuron, angle, f.amplitude, f.a_norm, f.w_norm)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveRatio {
    pub m_eff: usize,
    pub width: usize,
    pub ratio: f64,
}

/// Greedy cover of unit vectors: each step picks the vector whose cosine
/// neighbourhood (`> threshold`) holds the most uncovered vectors, lowest
/// index on ties. Returns the chosen centers.
pub fn greedy_cover(units: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    let m = units.len();
    let close: Vec<Vec<bool>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>() > threshold)
                .collect()
        })
        .collect();
    let mut covered = vec![false; m];
    let mut centers = Vec::new();
    while covered.iter().any(|c| !c) {
        let (best, _) = (0..m)
            .map(|i| (i, (0..m).filter(|&j| !covered[j] && close[i][j]).count()))
            .fold((0, 0), |acc, x| if x.1 > acc.1 { x } else { acc });
        for j in 0..m {
            if close[best][j] {
                covered[j] = true;
            }
        }
        centers.push(best);
    }
    centers
}

/// Effective ratio of hidden layer `l`: greedy cover size over the layer width.
pub fn effective_ratio<T: Scalar>(params: &ParamSet<T>, l: usize, threshold: f64) -> Result<EffectiveRatio> {
    let vectors = input_vectors(params, l)?;
    let width = vectors.nrows();
    let units: Vec<Vec<f64>> = vectors
        .rows()
        .into_iter()
        .filter_map(|r| {
            let n = r.dot(&r).sqrt();
            (n >= 1e-12).then(|| r.iter().map(|v| v / n).collect())
        })
        .collect();
    if units.is_empty() {
        return Err(LabError::Precondition(format!("layer {l} has no neuron with nonzero input weight")));
    }
    let m_eff = greedy_cover(&units, threshold).len();
    Ok(EffectiveRatio {
        m_eff,
        width,
        ratio: m_eff as f64 / width as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatnessDirection<T> {
    pub direction: ParamSet<T>,
    /// Filters (layer indices, `depth + 1` for the skip map) whose weight in
    /// `θ` is zero; their direction block is zero.
    pub zeroed: Vec<usize>,
}

/// Gaussian direction with each weight matrix rescaled to the Frobenius norm
/// of the matching matrix in `params`; bias entries are zero.
pub fn random_direction<T: Scalar>(params: &ParamSet<T>, seed: u64) -> FlatnessDirection<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir = ParamSet::zeros(&params.shape);
    let mut zeroed = Vec::new();
    let mut fill = |target: &mut Array2<T>, source: &Array2<T>, id: usize, rng: &mut ChaCha8Rng| {
        target.mapv_inplace(|_| T::from_f64_lossy(StandardNormal.sample(rng)));
        let want = source.iter().map(|&v| v * v).sum::<T>().sqrt();
        let have = target.iter().map(|&v| v * v).sum::<T>().sqrt();
        if want == T::zero() || have == T::zero() {
            target.fill(T::zero());
            zeroed.push(id);
        } else {
            target.mapv_inplace(|v| v / have * want);
        }
    };
    for (l, (d, p)) in dir.layers.iter_mut().zip(&params.layers).enumerate() {
        fill(&mut d.weight, &p.weight, l + 1, &mut rng);
    }
    if let (Some(d), Some(p)) = (dir.skip.as_mut(), params.skip.as_ref()) {
        fill(&mut d.weight, &p.weight, params.depth() + 1, &mut rng);
    }
    FlatnessDirection { direction: dir, zeroed }
}

/// `(α, loss(θ + α d))` over `alphas`, evaluated without dropout masks.
pub fn loss_profile<T: Scalar>(
    params: &ParamSet<T>,
    direction: &ParamSet<T>,
    alphas: &[f64],
    data: &Dataset<T>,
    loss: &LossSpec,
) -> Result<Vec<(f64, f64)>> {
    params.ensure_congruent(direction, "profile direction")?;
    if loss.needs_mask() {
        return Err(LabError::Mask("loss profiles are evaluated without dropout".into()));
    }
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(LabError::config("alphas", "all alphas must be finite"));
    }
    alphas
        .par_iter()
        .map(|&a| {
            let theta = params.added(T::from_f64_lossy(a), direction);
            Ok((a, eval_loss(loss, &theta, data, None)?.to_f64_lossy()))
        })
        .collect()
}

/// `(α, R_S((1-α) θ_a + α θ_b))` over `alphas`.
pub fn interpolate<T: Scalar>(
    a: &ParamSet<T>,
    b: &ParamSet<T>,
    alphas: &[f64],
    data: &Dataset<T>,
) -> Result<Vec<(f64, f64)>> {
    a.ensure_congruent(b, "interpolation endpoints")?;
    alphas
        .par_iter()
        .map(|&alpha| {
            let theta = if alpha == 0.0 {
                a.clone()
            } else if alpha == 1.0 {
                b.clone()
            } else {
                a.scaled(T::from_f64_lossy(1.0 - alpha)).added(T::from_f64_lossy(alpha), b)
            };
            Ok((alpha, mse(&theta, data)?.to_f64_lossy()))
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(curve: &[(f64, f64)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "alpha,loss")?;
    for (a, l) in curve {
        writeln!(out, "{a:e},{l:e}")?;
    }
    Ok(())
}

/// `(1/n) Σ_i Σ_k ‖∇_θ f_k(x_i)‖²`, the Hessian trace of `R_S` at zero loss.
pub fn hessian_trace_flatness<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>) -> Result<f64> {
    let pass = batch_forward(params, data.inputs.view(), None)?;
    let depth = params.depth();
    let act = params.shape.activation;
    let n = data.len();
    let row_sq = |m: &Array2<T>| m.map_axis(Axis(1), |r| r.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>());
    let bias_term = |l: usize| if params.layers[l - 1].bias.is_some() { 1.0 } else { 0.0 };
    // Squared norms of the inputs feeding each layer, plus 1 for the bias.
    let feed_sq: Vec<ndarray::Array1<f64>> = (1..=depth).map(|l| row_sq(&pass.fed[l - 1]) + bias_term(l)).collect();
    let mut total = 0.0;
    for k in 0..params.shape.output_dim() {
        let mut d_post = Array2::from_shape_fn((n, 1), |_| T::one())
            .dot(&params.weight(depth).row(k).insert_axis(Axis(0)));
        total += feed_sq[depth - 1].sum();
        if params.skip.is_some() {
            total += (row_sq(&pass.post[0]) + 1.0).sum();
        }
        for l in (1..depth).rev() {
            let mut dz = d_post;
            ndarray::Zip::from(&mut dz)
                .and(&pass.pre[l - 1])
                .for_each(|d, &z| *d *= act.derivative(z));
            total += (row_sq(&dz) * &feed_sq[l - 1]).sum();
            if l > 1 {
                d_post = dz.dot(&params.layers[l - 1].weight);
            } else {
                d_post = dz;
            }
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRatio {
    /// Mean `R_S^drop` over the mask set divided by mean `‖∇R_S^drop‖²`;
    /// infinite when the denominator vanishes.
    pub ratio: f64,
    pub loss: McEstimate,
    pub grad_norm_sq: McEstimate,
    pub diagnostic: Option<String>,
}

/// Ratio statistic over an explicit mask set.
pub fn drop_ratio_from_masks<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    cfg: &DropoutConfig,
    masks: &[DropoutMask<T>],
) -> Result<DropRatio> {
    let spec = LossSpec::dropout_mse(cfg.clone());
    let pairs: Vec<(f64, f64)> = masks
        .par_iter()
        .map(|m| {
            let l = dropout_mse(params, data, m)?.to_f64_lossy().abs();
            let g = grad(params, data, &spec, Some(m))?.norm_sq().to_f64_lossy();
            Ok((l, g))
        })
        .collect::<Result<_>>()?;
    let (losses, grads): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let loss = McEstimate::from_values(&losses)?;
    let grad_norm_sq = McEstimate::from_values(&grads)?;
    let (ratio, diagnostic) = if grad_norm_sq.mean > 0.0 {
        (loss.mean / grad_norm_sq.mean, None)
    } else {
        (f64::INFINITY, Some("mean squared gradient norm is zero".to_string()))
    };
    Ok(DropRatio { ratio, loss, grad_norm_sq, diagnostic })
}

/// `E_η |R_S^drop| / E_η ‖∇R_S^drop‖²` over `n_samples` masks at the last
/// hidden layer (mask `i` uses stream `i` of `seed`).
pub fn drop_ratio_statistic<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    p: f64,
    n_samples: usize,
    seed: u64,
) -> Result<DropRatio> {
    if n_samples < 2 {
        return Err(LabError::config("n_samples", "at least two masks are needed"));
    }
    let cfg = DropoutConfig::last_hidden(p, &params.shape)?;
    let masks: Vec<DropoutMask<T>> = (0..n_samples as u64)
        .map(|s| sample_mask_seeded(&cfg, &params.shape, seed, s))
        .collect::<Result<_>>()?;
    drop_ratio_from_masks(params, data, &cfg, &masks)
}

/// Fraction of rows whose predicted argmax matches the target argmax.
pub fn accuracy<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>) -> Result<f64> {
    let out = predict(params, data.inputs.view(), None)?;
    let pred = argmax_rows(&out);
    let truth = argmax_rows(&data.targets);
    let hits = pred.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Total variation of the derivative of a scalar 1-D network on a uniform
/// grid of `points` over `[lo, hi]`, from finite-difference slopes.
pub fn derivative_total_variation<T: Scalar>(params: &ParamSet<T>, lo: f64, hi: f64, points: usize) -> Result<f64> {
    if params.shape.input_dim() != 1 || params.shape.output_dim() != 1 {
        return Err(LabError::config("shape", "derivative variation needs a scalar 1-D network"));
    }
    if points < 3 || !(hi > lo) {
        return Err(LabError::config("grid", "need at least 3 points on a non-empty interval"));
    }
    let h = (hi - lo) / (points - 1) as f64;
    let xs = Array2::from_shape_fn((points, 1), |(i, _)| T::from_f64_lossy(lo + h * i as f64));
    let ys: Vec<f64> = predict(params, xs.view(), None)?.iter().map(|v| v.to_f64_lossy()).collect();
    let slopes: Vec<f64> = ys.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    Ok(slopes.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
}
