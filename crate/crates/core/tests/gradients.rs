use droplab::autodiff::{self, fd, grad, grad_of_sq_grad_norm, hvp, hvp_analytic, hvp_fd, HvpMethod};
use droplab::data::Dataset;
use droplab::dropout::{sample_mask_seeded, DropoutConfig, DropoutMask};
use droplab::losses::{eval_loss, Addon, LossSpec, R1Weight, Sign};
use droplab::nn::{batch_pre_activations, init_params, Activation, InitScheme, NetworkShape, ParamSet};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    name: &'static str,
    shape: NetworkShape,
    spec: LossSpec,
}

fn cases() -> Vec<Case> {
    let mut out = Vec::new();
    for act in [Activation::Tanh, Activation::Relu] {
        let base = NetworkShape::new(vec![3, 8, 6, 2], act).unwrap();
        let two = NetworkShape::new(vec![2, 12, 1], act).unwrap();
        let skip = NetworkShape::new(vec![2, 7, 1], act).unwrap().with_skip();
        let bare = NetworkShape::new(vec![2, 9, 1], act).unwrap().without_bias();
        let last = |s: &NetworkShape, p| DropoutConfig::last_hidden(p, s).unwrap();
        out.push(Case { name: "mse", shape: base.clone(), spec: LossSpec::mse() });
        out.push(Case { name: "dropout_mse", shape: base.clone(), spec: LossSpec::dropout_mse(last(&base, 0.7)) });
        out.push(Case {
            name: "dropout_mse_all_sites",
            shape: base.clone(),
            spec: LossSpec::dropout_mse(DropoutConfig::all_hidden(0.6, &base).unwrap()),
        });
        out.push(Case { name: "l1", shape: base.clone(), spec: LossSpec::l1(last(&base, 0.7)) });
        out.push(Case { name: "l2", shape: two.clone(), spec: LossSpec::l2(last(&two, 0.8), 0.3) });
        out.push(Case { name: "l3", shape: two.clone(), spec: LossSpec::l3(last(&two, 0.8), 0.3) });
        out.push(Case { name: "l4", shape: base.clone(), spec: LossSpec::l4(last(&base, 0.5)) });
        out.push(Case { name: "l1_skip", shape: skip.clone(), spec: LossSpec::l1(last(&skip, 0.6)) });
        out.push(Case { name: "l3_bare", shape: bare.clone(), spec: LossSpec::l3(last(&bare, 0.9), 0.5) });
        out.push(Case {
            name: "explicit_r1_and_penalty",
            shape: skip.clone(),
            spec: LossSpec::dropout_mse_with_penalty(last(&skip, 0.7), 0.2).with_addon(Addon::R1 {
                weight: R1Weight::Explicit { lambda: 0.4 },
                sign: Sign::Plus,
            }),
        });
    }
    out
}

struct Instance {
    params: ParamSet<f64>,
    data: Dataset<f64>,
    mask: Option<DropoutMask<f64>>,
}

/// Random instance away from ReLU kinks: regenerated until every
/// pre-activation at a data point satisfies |z| >= 1e-4.
fn instance(case: &Case, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let init = InitScheme::gaussian(0.6, rng.random());
        let mut params: ParamSet<f64> = init_params(&case.shape, &init).unwrap();
        if let Some(skip) = params.skip.as_mut() {
            skip.weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            skip.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let n = rng.random_range(3..=8);
        let d = case.shape.input_dim();
        let k = case.shape.output_dim();
        let x = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.5..1.5));
        let y = Array2::from_shape_simple_fn((n, k), || rng.random_range(-1.0..1.0));
        let data = Dataset::new(x, y, "random").unwrap();
        let mask = case.spec.dropout.as_ref().filter(|_| case.spec.needs_mask()).map(|cfg| {
            let mut m = sample_mask_seeded(cfg, &case.shape, rng.random(), 0).unwrap();
            // A mask that keeps nothing makes many gradient blocks vanish; redraw.
            while m.sites.iter().any(|s| s.eta.iter().all(|&e| e == -1.0)) {
                m = sample_mask_seeded(cfg, &case.shape, rng.random(), 0).unwrap();
            }
            m
        });
        let pre = batch_pre_activations(&params, data.inputs.view(), mask.as_ref()).unwrap();
        let hidden = &pre[..pre.len() - 1];
        if case.shape.activation == Activation::Relu
            && hidden.iter().any(|z| z.iter().any(|v| v.abs() < 1e-4))
        {
            continue;
        }
        return Instance { params, data, mask };
    }
}

fn random_direction(params: &ParamSet<f64>, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let flat: Vec<f64> = (0..params.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    ParamSet::from_flat(&params.shape, &flat).unwrap()
}

#[test]
fn gradient_matches_central_differences_for_every_loss() {
    for case in cases() {
        for trial in 0..4 {
            let inst = instance(&case, 100 + trial);
            let g = grad(&inst.params, &inst.data, &case.spec, inst.mask.as_ref()).unwrap();
            let num = fd::loss_gradient(&inst.params, &inst.data, &case.spec, inst.mask.as_ref(), 1e-5).unwrap();
            let err = fd::max_rel_error(&g, &num, 1e-4);
            assert!(err < 1e-6, "{} trial {trial}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn directional_derivative_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in cases() {
        let inst = instance(&case, 7);
        let g = grad(&inst.params, &inst.data, &case.spec, inst.mask.as_ref()).unwrap();
        let v = random_direction(&inst.params, &mut rng);
        let num = fd::directional(&inst.params, &v, 1e-5, |p| {
            eval_loss(&case.spec, p, &inst.data, inst.mask.as_ref())
        })
        .unwrap();
        let exact = g.dot(&v);
        let rel = (num - exact).abs() / exact.abs().max(1e-8);
        assert!(rel < 1e-6, "{}: {num} vs {exact}", case.name);
    }
}

#[test]
fn composite_gradient_is_sum_of_parts() {
    let shape = NetworkShape::new(vec![2, 10, 1], Activation::Tanh).unwrap();
    let cfg = DropoutConfig::last_hidden(0.6, &shape).unwrap();
    let case = Case { name: "l1", shape: shape.clone(), spec: LossSpec::l1(cfg.clone()) };
    let inst = instance(&case, 11);
    let total = grad(&inst.params, &inst.data, &case.spec, None).unwrap();
    let mse = grad(&inst.params, &inst.data, &LossSpec::mse(), None).unwrap();
    let kappa = (1.0 - 0.6) / 0.6;
    let explicit = |lambda| LossSpec::mse().with_addon(Addon::R1 {
        weight: R1Weight::Explicit { lambda },
        sign: Sign::Plus,
    });
    let once = grad(&inst.params, &inst.data, &explicit(kappa), None).unwrap();
    let twice = grad(&inst.params, &inst.data, &explicit(2.0 * kappa), None).unwrap();
    let r1_part = twice.added(-1.0, &once);
    let r1_num = fd::gradient(&inst.params, 1e-5, |p| droplab::losses::r1(p, &inst.data, 0.6)).unwrap();
    assert!(fd::max_rel_error(&r1_part, &r1_num, 1e-4) < 1e-6);
    let sum = mse.added(1.0, &r1_part);
    assert!(total.added(-1.0, &sum).max_abs() < 1e-12);
}

#[test]
fn analytic_and_fd_hvp_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in cases().into_iter().filter(|c| !c.spec.has_penalty()) {
        for trial in 0..3 {
            let inst = instance(&case, 200 + trial);
            let v = random_direction(&inst.params, &mut rng);
            let a = hvp_analytic(&inst.params, &inst.data, &case.spec, &v, inst.mask.as_ref()).unwrap();
            let f = hvp_fd(&inst.params, &inst.data, &case.spec, &v, inst.mask.as_ref()).unwrap();
            let rel = a.added(-1.0, &f).norm() / a.norm().max(1e-12);
            assert!(rel < 1e-4, "{}: relative error {rel:e}", case.name);
        }
    }
}

#[test]
fn hvp_method_selection() {
    let shape = NetworkShape::new(vec![2, 5, 1], Activation::Tanh).unwrap();
    let cfg = DropoutConfig::last_hidden(0.8, &shape).unwrap();
    let plain = Case { name: "l1", shape: shape.clone(), spec: LossSpec::l1(cfg.clone()) };
    let pen = Case { name: "l2", shape: shape.clone(), spec: LossSpec::l2(cfg, 0.1) };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (case, method) in [(plain, HvpMethod::Analytic), (pen, HvpMethod::FiniteDifference)] {
        let inst = instance(&case, 3);
        let v = random_direction(&inst.params, &mut rng);
        let (_, m) =
            autodiff::hvp_with_method(&inst.params, &inst.data, &case.spec, &v, inst.mask.as_ref()).unwrap();
        assert_eq!(m, method, "{}", case.name);
    }
}

#[test]
fn hvp_is_symmetric_for_every_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in cases() {
        let inst = instance(&case, 17);
        let hess = |v: &ParamSet<f64>| hvp(&inst.params, &inst.data, &case.spec, v, inst.mask.as_ref()).unwrap();
        let tol = if case.spec.has_penalty() { 1e-5 } else { 1e-6 };
        for _ in 0..100 {
            let v1 = random_direction(&inst.params, &mut rng);
            let v2 = random_direction(&inst.params, &mut rng);
            let a = v1.dot(&hess(&v2));
            let b = v2.dot(&hess(&v1));
            let scale = v1.norm() * v2.norm() * hess(&v1).norm() / v1.norm();
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale);
            assert!(rel < tol, "{}: {a} vs {b}", case.name);
        }
    }
}

#[test]
fn grad_of_sq_grad_norm_matches_fd() {
    let shape = NetworkShape::new(vec![2, 8, 1], Activation::Tanh).unwrap();
    let cfg = DropoutConfig::last_hidden(0.7, &shape).unwrap();
    for spec in [LossSpec::mse(), LossSpec::dropout_mse(cfg.clone()), LossSpec::l1(cfg)] {
        let case = Case { name: "sq", shape: shape.clone(), spec };
        let inst = instance(&case, 23);
        let exact = grad_of_sq_grad_norm(&inst.params, &inst.data, &case.spec, inst.mask.as_ref()).unwrap();
        let num = fd::gradient(&inst.params, 1e-5, |p| {
            Ok(grad(p, &inst.data, &case.spec, inst.mask.as_ref())?.norm_sq())
        })
        .unwrap();
        assert!(fd::max_rel_error(&exact, &num, 1e-4) < 1e-4);
    }
}

#[test]
fn grad_of_sq_grad_norm_homogeneity_and_stationarity() {
    let shape = NetworkShape::new(vec![2, 6, 1], Activation::Tanh).unwrap();
    let case = Case { name: "mse", shape, spec: LossSpec::mse() };
    let inst = instance(&case, 29);
    let base = grad_of_sq_grad_norm(&inst.params, &inst.data, &LossSpec::mse(), None).unwrap();
    let c = 3.0;
    let scaled_grad = |p: &ParamSet<f64>| Ok(grad(p, &inst.data, &LossSpec::mse(), None)?.scaled(c));
    let g = scaled_grad(&inst.params).unwrap();
    let scaled = autodiff::hvp_fd_with(&inst.params, &g, scaled_grad).unwrap().scaled(2.0);
    assert!(fd::max_rel_error(&scaled, &base.scaled(c * c), 1e-4) < 1e-4);

    let mut fit = inst.data.clone();
    fit.targets = droplab::nn::predict(&inst.params, fit.inputs.view(), None).unwrap();
    let zero = grad_of_sq_grad_norm(&inst.params, &fit, &LossSpec::mse(), None).unwrap();
    assert_eq!(zero.max_abs(), 0.0);
}
