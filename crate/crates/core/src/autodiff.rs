//! Reverse-mode gradients and Hessian-vector products for the MLP loss
//! family, plus finite-difference oracles.
//!
//! Masks are treated as constants: the gradient of `R_S^drop` is taken at the
//! realized `(θ, η)`.

use ndarray::{Array1, Array2, Axis, Zip};

use crate::data::Dataset;
use crate::dropout::DropoutMask;
use crate::error::{LabError, Result};
use crate::losses::{eval_loss, inner_spec, mask_for, BaseLoss, LossSpec};
use crate::nn::{batch_forward, col_sums, GradientSet, ParamSet};
use crate::scalar::Scalar;

/// How `hvp` computed its result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HvpMethod {
    /// Forward-over-reverse (R-operator) pass.
    Analytic,
    /// Central differences of `grad`.
    FiniteDifference,
}

/// The twice-differentiable part handled by the analytic engine:
/// `base + (κ/2n) Σ_i Σ_j ‖W^[L]_j‖² h_ij²`.
struct Smooth<T> {
    dropout_base: bool,
    kappa: T,
}

struct Backward<T> {
    value: T,
    grad: GradientSet<T>,
}

fn check_data<T: Scalar>(params: &ParamSet<T>, data: &Dataset<T>) -> Result<()> {
    if data.is_empty() {
        return Err(LabError::config("dataset", "dataset is empty"));
    }
    if data.target_dim() != params.shape.output_dim() {
        return Err(LabError::dim("dataset targets", params.shape.output_dim(), data.target_dim()));
    }
    Ok(())
}

fn scale_rows<T: Scalar>(m: &mut Array2<T>, scale: Option<&Array1<T>>) {
    if let Some(s) = scale {
        *m *= s;
    }
}

/// Value and gradient of a smooth objective. With `dir = Some(v)` the
/// R-operator pass additionally returns `H v`.
fn smooth_pass<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    obj: &Smooth<T>,
    mask: Option<&DropoutMask<T>>,
    dir: Option<&ParamSet<T>>,
) -> Result<(Backward<T>, Option<GradientSet<T>>)> {
    check_data(params, data)?;
    let mask = if obj.dropout_base { mask } else { None };
    let x = data.inputs.view();
    let pass = batch_forward(params, x, mask)?;
    let depth = params.depth();
    let act = params.shape.activation;
    let n = T::from_usize(data.len()).expect("n fits");
    let two = T::one() + T::one();
    let kn = obj.kappa / n;
    let scale_at = |l: usize| mask.and_then(|m| m.scale_at(l));

    let resid = &pass.output - &data.targets;
    let mut value = resid.iter().fold(T::zero(), |a, &e| a + e * e) / (n + n);

    let w_last = params.weight(depth);
    let h = &pass.post[depth - 1];
    let with_r1 = obj.kappa != T::zero();
    let col_norm = w_last.mapv(|w| w * w).sum_axis(Axis(0));
    let act_sq = h.mapv(|v| v * v).sum_axis(Axis(0));
    if with_r1 {
        let s = col_norm.iter().zip(act_sq.iter()).fold(T::zero(), |a, (&c, &s)| a + c * s);
        value += kn * s / two;
    }

    // Forward R-pass.
    let mut r_pre: Vec<Array2<T>> = Vec::new();
    let mut r_post: Vec<Array2<T>> = Vec::new();
    let mut r_fed: Vec<Array2<T>> = Vec::new();
    let mut r_out = None;
    if let Some(v) = dir {
        params.ensure_congruent(v, "hvp direction")?;
        r_post.push(Array2::zeros(x.raw_dim()));
        r_fed.push(Array2::zeros(x.raw_dim()));
        for l in 1..=depth {
            let vl = &v.layers[l - 1];
            let mut rz = pass.fed[l - 1].dot(&vl.weight.t());
            if l > 1 {
                rz += &r_fed[l - 1].dot(&params.layers[l - 1].weight.t());
            }
            if let Some(vb) = &vl.bias {
                rz += vb;
            }
            if l < depth {
                let mut ra = rz.clone();
                Zip::from(&mut ra).and(&pass.pre[l - 1]).for_each(|r, &z| *r *= act.derivative(z));
                let mut rf = ra.clone();
                scale_rows(&mut rf, scale_at(l));
                r_post.push(ra);
                r_fed.push(rf);
                r_pre.push(rz);
            } else {
                let mut rf = rz.clone();
                if let Some(vs) = &v.skip {
                    rf += &x.dot(&vs.weight.t());
                    rf += &vs.bias;
                }
                r_pre.push(rz);
                r_out = Some(rf);
            }
        }
    }

    let mut grad = ParamSet::zeros(&params.shape);
    let mut hv = dir.map(|_| ParamSet::zeros(&params.shape));

    // Output layer.
    let d_out = resid.mapv(|e| e / n);
    {
        let g = &mut grad.layers[depth - 1];
        g.weight = d_out.t().dot(&pass.fed[depth - 1]);
        if with_r1 {
            Zip::from(&mut g.weight)
                .and(w_last)
                .and_broadcast(&act_sq)
                .for_each(|gw, &w, &s| *gw += kn * w * s);
        }
        if let Some(b) = g.bias.as_mut() {
            *b = col_sums(&d_out);
        }
    }
    if let Some(skip) = grad.skip.as_mut() {
        skip.weight = d_out.t().dot(&x);
        skip.bias = col_sums(&d_out);
    }

    let mut d_post = d_out.dot(w_last);
    scale_rows(&mut d_post, scale_at(depth - 1));
    if with_r1 {
        Zip::from(&mut d_post)
            .and(h)
            .and_broadcast(&col_norm)
            .for_each(|d, &hv, &c| *d += kn * c * hv);
    }

    let mut r_d_post = None;
    if let (Some(v), Some(hv)) = (dir, hv.as_mut()) {
        let r_out = r_out.as_ref().expect("R-pass ran");
        let r_d_out = r_out.mapv(|e| e / n);
        let v_last = v.weight(depth);
        let r_h = &r_post[depth - 1];
        let g = &mut hv.layers[depth - 1];
        g.weight = r_d_out.t().dot(&pass.fed[depth - 1]) + d_out.t().dot(&r_fed[depth - 1]);
        if with_r1 {
            // R{s_j} = 2 Σ_i h_ij R{h_ij}
            let r_act_sq = (h * r_h).sum_axis(Axis(0)).mapv(|s| two * s);
            Zip::from(&mut g.weight)
                .and(v_last)
                .and(w_last)
                .and_broadcast(&act_sq)
                .and_broadcast(&r_act_sq)
                .for_each(|gw, &vw, &w, &s, &rs| *gw += kn * (vw * s + w * rs));
        }
        if let Some(b) = g.bias.as_mut() {
            *b = col_sums(&r_d_out);
        }
        if let Some(skip) = hv.skip.as_mut() {
            skip.weight = r_d_out.t().dot(&x);
            skip.bias = col_sums(&r_d_out);
        }
        let mut rdp = r_d_out.dot(w_last) + d_out.dot(v_last);
        scale_rows(&mut rdp, scale_at(depth - 1));
        if with_r1 {
            // R{c_j} = 2 Σ_k W_kj V_kj
            let r_col_norm = (w_last * v_last).sum_axis(Axis(0)).mapv(|s| two * s);
            Zip::from(&mut rdp)
                .and(h)
                .and(r_h)
                .and_broadcast(&col_norm)
                .and_broadcast(&r_col_norm)
                .for_each(|d, &hh, &rh, &c, &rc| *d += kn * (c * rh + rc * hh));
        }
        r_d_post = Some(rdp);
    }

    // Hidden layers.
    for l in (1..depth).rev() {
        let z = &pass.pre[l - 1];
        let mut dz = d_post.clone();
        Zip::from(&mut dz).and(z).for_each(|d, &zz| *d *= act.derivative(zz));
        let g = &mut grad.layers[l - 1];
        g.weight = dz.t().dot(&pass.fed[l - 1]);
        if let Some(b) = g.bias.as_mut() {
            *b = col_sums(&dz);
        }
        if let (Some(v), Some(hv), Some(rdp)) = (dir, hv.as_mut(), r_d_post.as_ref()) {
            let mut rdz = rdp.clone();
            Zip::from(&mut rdz)
                .and(z)
                .and(&d_post)
                .and(&r_pre[l - 1])
                .for_each(|r, &zz, &d, &rz| {
                    *r = *r * act.derivative(zz) + d * act.second_derivative(zz) * rz;
                });
            let gh = &mut hv.layers[l - 1];
            gh.weight = rdz.t().dot(&pass.fed[l - 1]);
            if l > 1 {
                gh.weight += &dz.t().dot(&r_fed[l - 1]);
            }
            if let Some(b) = gh.bias.as_mut() {
                *b = col_sums(&rdz);
            }
            if l > 1 {
                let mut next = rdz.dot(&params.layers[l - 1].weight) + dz.dot(&v.layers[l - 1].weight);
                scale_rows(&mut next, scale_at(l - 1));
                r_d_post = Some(next);
            }
        }
        if l > 1 {
            let mut next = dz.dot(&params.layers[l - 1].weight);
            scale_rows(&mut next, scale_at(l - 1));
            d_post = next;
        }
    }

    Ok((Backward { value, grad }, hv))
}

fn smooth_of<T: Scalar>(spec: &LossSpec) -> Smooth<T> {
    Smooth {
        dropout_base: spec.base == BaseLoss::DropoutMse,
        kappa: T::from_f64_lossy(spec.r1_kappa()),
    }
}

fn smooth_inner<T: Scalar>(inner: BaseLoss) -> Smooth<T> {
    Smooth {
        dropout_base: inner == BaseLoss::DropoutMse,
        kappa: T::zero(),
    }
}

fn prepare<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    loss: &LossSpec,
    mask: Option<&DropoutMask<T>>,
) -> Result<()> {
    loss.validate(&params.shape)?;
    loss.check_mask(mask)?;
    check_data(params, data)
}

/// Loss value and its gradient in a single pass.
pub fn value_and_grad<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    loss: &LossSpec,
    mask: Option<&DropoutMask<T>>,
) -> Result<(T, GradientSet<T>)> {
    prepare(params, data, loss, mask)?;
    let (mut out, _) = smooth_pass(params, data, &smooth_of(loss), mask, None)?;
    for (c, inner) in loss.penalties() {
        if c == 0.0 {
            continue;
        }
        let obj = smooth_inner::<T>(inner);
        let m = mask_for(inner, mask);
        let (g_inner, _) = smooth_pass(params, data, &obj, m, None)?;
        let g = g_inner.grad;
        let (_, hg) = smooth_pass(params, data, &obj, m, Some(&g))?;
        let c = T::from_f64_lossy(c);
        out.value += c * g.norm_sq() / T::from_f64_lossy(4.0);
        out.grad.axpy(c / (T::one() + T::one()), &hg.expect("direction given"));
    }
    if loss.scale != 1.0 {
        let c = T::from_f64_lossy(loss.scale);
        out.value *= c;
        out.grad.scale(c);
    }
    if !out.grad.is_finite() {
        return Err(LabError::NonFinite("gradient".into()));
    }
    Ok((out.value, out.grad))
}

/// Exact gradient of `loss` at `(θ, η)`.
pub fn grad<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    loss: &LossSpec,
    mask: Option<&DropoutMask<T>>,
) -> Result<GradientSet<T>> {
    Ok(value_and_grad(params, data, loss, mask)?.1)
}

fn check_direction<T: Scalar>(params: &ParamSet<T>, v: &ParamSet<T>) -> Result<()> {
    params.ensure_congruent(v, "hvp direction")?;
    if v.norm_sq() == T::zero() {
        return Err(LabError::Precondition("hvp direction must be non-zero".into()));
    }
    Ok(())
}

/// `H v` by the R-operator. Only available for losses without a
/// gradient-norm penalty.
pub fn hvp_analytic<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    loss: &LossSpec,
    v: &GradientSet<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<GradientSet<T>> {
    prepare(params, data, loss, mask)?;
    check_direction(params, v)?;
    if loss.has_penalty() {
        return Err(LabError::Precondition(
            "analytic hvp does not cover gradient-norm penalties".into(),
        ));
    }
    let (_, hv) = smooth_pass(params, data, &smooth_of(loss), mask, Some(v))?;
    Ok(hv.expect("direction given").scaled(T::from_f64_lossy(loss.scale)))
}

/// `H v` from central differences of an arbitrary gradient map, with step
/// `h = √eps (1 + ‖θ‖) / ‖v‖`.
pub fn hvp_fd_with<T, G>(params: &ParamSet<T>, v: &GradientSet<T>, grad_fn: G) -> Result<GradientSet<T>>
where
    T: Scalar,
    G: Fn(&ParamSet<T>) -> Result<GradientSet<T>>,
{
    check_direction(params, v)?;
    let h = T::epsilon().sqrt() * (T::one() + params.norm()) / v.norm();
    let plus = grad_fn(&params.added(h, v))?;
    let minus = grad_fn(&params.added(-h, v))?;
    let denom = h + h;
    Ok(plus.zip_map(&minus, |a, b| (a - b) / denom))
}

/// `H v` from central differences of `grad`.
pub fn hvp_fd<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    loss: &LossSpec,
    v: &GradientSet<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<GradientSet<T>> {
    prepare(params, data, loss, mask)?;
    hvp_fd_with(params, v, |p| grad(p, data, loss, mask))
}

/// `H v` for the Hessian of `loss`; analytic when the loss has no
/// gradient-norm penalty, central differences of `grad` otherwise.
pub fn hvp<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    loss: &LossSpec,
    v: &GradientSet<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<GradientSet<T>> {
    Ok(hvp_with_method(params, data, loss, v, mask)?.0)
}

pub fn hvp_with_method<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    loss: &LossSpec,
    v: &GradientSet<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<(GradientSet<T>, HvpMethod)> {
    if loss.has_penalty() {
        Ok((hvp_fd(params, data, loss, v, mask)?, HvpMethod::FiniteDifference))
    } else {
        Ok((hvp_analytic(params, data, loss, v, mask)?, HvpMethod::Analytic))
    }
}

/// `∇_θ ‖∇_θ loss‖² = 2 H g`.
pub fn grad_of_sq_grad_norm<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    loss: &LossSpec,
    mask: Option<&DropoutMask<T>>,
) -> Result<GradientSet<T>> {
    let g = grad(params, data, loss, mask)?;
    if g.norm_sq() == T::zero() {
        return Ok(g);
    }
    let hg = hvp(params, data, loss, &g, mask)?;
    Ok(hg.scaled(T::one() + T::one()))
}

/// Gradient of the penalty `(c/4)‖∇ inner‖²` alone.
pub fn penalty_grad<T: Scalar>(
    params: &ParamSet<T>,
    data: &Dataset<T>,
    outer: &LossSpec,
    inner: BaseLoss,
    coefficient: T,
    mask: Option<&DropoutMask<T>>,
) -> Result<GradientSet<T>> {
    let spec = inner_spec(inner, outer);
    let g = grad_of_sq_grad_norm(params, data, &spec, mask_for(inner, mask))?;
    Ok(g.scaled(coefficient / T::from_f64_lossy(4.0)))
}

/// Central-difference oracles.
pub mod fd {
    use super::*;

    /// Coordinatewise central differences of a scalar function.
    pub fn gradient<T, F>(params: &ParamSet<T>, h: T, f: F) -> Result<GradientSet<T>>
    where
        T: Scalar,
        F: Fn(&ParamSet<T>) -> Result<T>,
    {
        let base = params.to_flat();
        let mut out = vec![T::zero(); base.len()];
        let mut probe = base.clone();
        for k in 0..base.len() {
            probe[k] = base[k] + h;
            let up = f(&ParamSet::from_flat(&params.shape, &probe)?)?;
            probe[k] = base[k] - h;
            let down = f(&ParamSet::from_flat(&params.shape, &probe)?)?;
            probe[k] = base[k];
            out[k] = (up - down) / (h + h);
        }
        ParamSet::from_flat(&params.shape, &out)
    }

    /// `(f(θ + h v) - f(θ - h v)) / 2h`.
    pub fn directional<T, F>(params: &ParamSet<T>, v: &ParamSet<T>, h: T, f: F) -> Result<T>
    where
        T: Scalar,
        F: Fn(&ParamSet<T>) -> Result<T>,
    {
        params.ensure_congruent(v, "fd direction")?;
        Ok((f(&params.added(h, v))? - f(&params.added(-h, v))?) / (h + h))
    }

    /// Central differences of the loss itself.
    pub fn loss_gradient<T: Scalar>(
        params: &ParamSet<T>,
        data: &Dataset<T>,
        loss: &LossSpec,
        mask: Option<&DropoutMask<T>>,
        h: T,
    ) -> Result<GradientSet<T>> {
        gradient(params, h, |p| eval_loss(loss, p, data, mask))
    }

    /// Largest coordinatewise relative error with the denominator floored at
    /// `floor · max|b|` so that near-zero coordinates do not dominate.
    pub fn max_rel_error<T: Scalar>(a: &ParamSet<T>, b: &ParamSet<T>, floor: f64) -> f64 {
        let scale = b.max_abs().to_f64_lossy().max(a.max_abs().to_f64_lossy());
        a.to_flat()
            .iter()
            .zip(b.to_flat())
            .map(|(&x, y)| {
                let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
                let denom = x.abs().max(y.abs()).max(floor * scale).max(f64::MIN_POSITIVE);
                (x - y).abs() / denom
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropout::{sample_mask_seeded, DropoutConfig};
    use crate::nn::{init_params, predict, Activation, InitScheme, NetworkShape};

    fn setup(widths: &[usize], act: Activation) -> (ParamSet<f64>, Dataset<f64>) {
        use rand::{Rng, SeedableRng};
        let shape = NetworkShape::new(widths.to_vec(), act).unwrap();
        let p = init_params(&shape, &InitScheme::gaussian(0.5, 3)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 6;
        let x = Array2::from_shape_simple_fn((n, widths[0]), || rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_simple_fn((n, *widths.last().unwrap()), || rng.random_range(-1.0..1.0));
        (p, Dataset::new(x, y, "t").unwrap())
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let (p, mut d) = setup(&[2, 5, 1], Activation::Tanh);
        d.targets = predict(&p, d.inputs.view(), None).unwrap();
        let g = grad(&p, &d, &LossSpec::mse(), None).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn quadratic_toy_hvp_is_identity() {
        let (p, _) = setup(&[2, 3, 1], Activation::Tanh);
        let v = p.scaled(0.3).added(1.0, &ParamSet::from_flat(&p.shape, &vec![0.1; p.num_params()]).unwrap());
        let hv = hvp_fd_with(&p, &v, |q| Ok(q.clone())).unwrap();
        assert!(fd::max_rel_error(&hv, &v, 1e-8) < 1e-6);
    }

    #[test]
    fn zero_direction_is_rejected() {
        let (p, d) = setup(&[2, 3, 1], Activation::Tanh);
        let v = ParamSet::zeros(&p.shape);
        assert!(hvp(&p, &d, &LossSpec::mse(), &v, None).is_err());
    }

    #[test]
    fn penalty_gradient_is_additive() {
        let (p, d) = setup(&[2, 6, 1], Activation::Tanh);
        let cfg = DropoutConfig::last_hidden(0.7, &p.shape).unwrap();
        let m = sample_mask_seeded(&cfg, &p.shape, 2, 0).unwrap();
        let l3 = LossSpec::l3(cfg.clone(), 0.2);
        let total = grad(&p, &d, &l3, Some(&m)).unwrap();
        let base = grad(&p, &d, &LossSpec::dropout_mse(cfg.clone()), Some(&m)).unwrap();
        let pen = penalty_grad(&p, &d, &l3, BaseLoss::DropoutMse, 0.2, Some(&m)).unwrap();
        let diff = total.added(-1.0, &base).added(1.0, &pen);
        assert!(diff.max_abs() < 1e-12);
    }
}
