//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! `DROPLAB_ACCEPTANCE=1,4,12` restricts the run to the listed criteria.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use droplab::autodiff::{grad, grad_of_sq_grad_norm};
use droplab::data::Dataset;
use droplab::dropout::{sample_mask_seeded, DropoutConfig, DropoutMask};
use droplab::losses::{eval_loss, Addon, BaseLoss, LossSpec, PenaltyCoefficient, Sign};
use droplab::nn::{batch_pre_activations, init_params, Activation, InitScheme, NetworkShape, ParamSet};
use droplab_cli::config::{DatasetSpec, ExperimentConfig, MNIST_ENV};
use droplab_cli::{run, Experiment, RunArtifact, RunOptions};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

struct Ctx {
    out: tempfile::TempDir,
    configs: PathBuf,
    /// Wall time of the classification run, shared with the interpolation budget.
    mnist_elapsed: std::cell::Cell<Duration>,
}

impl Ctx {
    fn config(&self, name: &str) -> ExperimentConfig {
        let text = std::fs::read_to_string(self.configs.join(name)).expect("config file");
        ExperimentConfig::from_toml(&text).expect("valid config")
    }

    fn run(&self, cfg: &ExperimentConfig) -> droplab::Result<RunArtifact> {
        run(
            cfg,
            &RunOptions {
                out: Some(self.out.path().to_path_buf()),
                base_dir: self.configs.clone(),
                ..RunOptions::default()
            },
        )
    }

    /// Directory holding the MNIST IDX files, if present.
    fn mnist_dir(&self, cfg: &ExperimentConfig) -> Option<PathBuf> {
        let data = match &cfg.experiment {
            Experiment::R1Equivalence(c) => &c.data,
            Experiment::R2Duality(c) => &c.data,
            Experiment::InterpolationStudy(c) => &c.data,
            _ => return None,
        };
        let DatasetSpec::Mnist { dir, .. } = data else { return None };
        let dir = std::env::var_os(MNIST_ENV).map(PathBuf::from).unwrap_or_else(|| self.configs.join(dir));
        dir.join("train-images-idx3-ubyte").exists().then_some(dir)
    }
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn timing(elapsed: Duration, limit_s: u64) -> String {
    format!("{:.1} s of {limit_s} s", elapsed.as_secs_f64())
}

fn theory_only(ctx: &Ctx, keep: &str) -> ExperimentConfig {
    let mut cfg = ctx.config("theory.toml");
    let Experiment::TheoryVerify(t) = &mut cfg.experiment else { panic!("theory config") };
    if keep != "lemma" {
        t.lemma = None;
    }
    if keep != "perturbation" {
        t.perturbation = None;
    }
    if keep != "flatness" {
        t.flatness = None;
    }
    cfg
}

fn lemma_exact(ctx: &Ctx) -> droplab::Result<Outcome> {
    let cfg = theory_only(ctx, "lemma");
    let start = Instant::now();
    let art = ctx.run(&cfg)?;
    let elapsed = start.elapsed();
    let reports = art.summary["lemma"].as_array().cloned().unwrap_or_default();
    let exhaustive = reports.iter().all(|r| r["mode"]["mode"] == "exhaustive");
    let worst = reports.iter().map(|r| f(&r["abs_error"])).fold(0.0, f64::max);
    let widths: Vec<u64> = reports.iter().filter_map(|r| r["width"].as_u64()).collect();
    let covered = [4, 8, 12].iter().all(|w| widths.iter().filter(|&&x| x == *w).count() == 30);
    let pass = reports.len() == 90 && exhaustive && covered && worst <= 1e-10 && within(elapsed, 10);
    Ok(Outcome::new(
        pass,
        format!("{} instances, max |E R_drop - (R_S + R_1)| = {worst:.2e} (tol 1e-10), {}", reports.len(), timing(elapsed, 10)),
    ))
}

/// Central differences of `loss` over the flattened parameters.
fn central_differences(params: &ParamSet<f64>, h: f64, loss: impl Fn(&ParamSet<f64>) -> f64) -> Vec<f64> {
    let base = params.to_flat();
    (0..base.len())
        .map(|k| {
            let mut v = base.clone();
            v[k] = base[k] + h;
            let up = loss(&ParamSet::from_flat(&params.shape, &v).unwrap());
            v[k] = base[k] - h;
            let down = loss(&ParamSet::from_flat(&params.shape, &v).unwrap());
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate error relative to `max(|a_k|, |b_k|, 1e-4 max|a|)`.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, x| m.max(x.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-4 * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

struct Instance {
    params: ParamSet<f64>,
    data: Dataset<f64>,
    mask: Option<DropoutMask<f64>>,
}

/// Random instance with every hidden pre-activation at least 1e-3 from a
/// ReLU kink; resampled until it is.
fn instance(shape: &NetworkShape, spec: &LossSpec, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let params: ParamSet<f64> = init_params(shape, &InitScheme::gaussian(0.5, rng.random())).unwrap();
        let n = rng.random_range(4..=8);
        let x = Array2::from_shape_simple_fn((n, shape.input_dim()), || rng.random_range(-1.5..1.5));
        let y = Array2::from_shape_simple_fn((n, shape.output_dim()), || rng.random_range(-1.0..1.0));
        let data = Dataset::new(x, y, "random").unwrap();
        let mask = spec.dropout.as_ref().filter(|_| spec.needs_mask()).map(|cfg| loop {
            let m = sample_mask_seeded(cfg, shape, rng.random(), 0).unwrap();
            if m.sites.iter().all(|s| s.eta.iter().any(|&e| e != -1.0)) {
                break m;
            }
        });
        let pre = batch_pre_activations(&params, data.inputs.view(), mask.as_ref()).unwrap();
        let near_kink = pre[..pre.len() - 1].iter().any(|z| z.iter().any(|v| v.abs() < 1e-3));
        if shape.activation == Activation::Relu && near_kink {
            continue;
        }
        return Instance { params, data, mask };
    }
}

fn every_loss(shape: &NetworkShape) -> Vec<(&'static str, LossSpec)> {
    let cfg = DropoutConfig::last_hidden(0.7, shape).unwrap();
    let penalty = |sign| {
        LossSpec::dropout_mse(cfg.clone()).with_addon(Addon::GradNormPenalty {
            coefficient: PenaltyCoefficient::Explicit { lambda: 0.3 },
            sign,
            inner: BaseLoss::DropoutMse,
        })
    };
    vec![
        ("mse", LossSpec::mse()),
        ("dropout_mse", LossSpec::dropout_mse(cfg.clone())),
        ("mse_plus_r1", LossSpec::mse_plus_r1(cfg.clone())),
        ("dropout_plus_r2", penalty(Sign::Plus)),
        ("dropout_minus_r2", penalty(Sign::Minus)),
        ("l1", LossSpec::l1(cfg.clone())),
        ("l2", LossSpec::l2(cfg.clone(), 0.2)),
        ("l3", LossSpec::l3(cfg.clone(), 0.2)),
        ("l4", LossSpec::l4(cfg)),
    ]
}

fn gradient_correctness(_: &Ctx) -> droplab::Result<Outcome> {
    let start = Instant::now();
    let mut worst = (0.0, "");
    let mut checked = 0;
    for act in [Activation::Tanh, Activation::Relu] {
        for shape in [
            NetworkShape::new(vec![3, 16, 2], act)?,
            NetworkShape::new(vec![2, 12, 8, 1], act)?,
        ] {
            for (name, spec) in every_loss(&shape) {
                for trial in 0..3 {
                    let inst = instance(&shape, &spec, 1000 + trial);
                    let g = grad(&inst.params, &inst.data, &spec, inst.mask.as_ref())?.to_flat();
                    let num = central_differences(&inst.params, 1e-5, |p| {
                        eval_loss(&spec, p, &inst.data, inst.mask.as_ref()).unwrap()
                    });
                    let err = relative_error(&g, &num);
                    checked += 1;
                    if err > worst.0 {
                        worst = (err, name);
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        worst.0 < 1e-6 && within(elapsed, 30),
        format!(
            "{checked} checks over 9 losses, max relative error {:.2e} ({}) (tol 1e-6), {}",
            worst.0,
            worst.1,
            timing(elapsed, 30)
        ),
    ))
}

fn r2_machinery(_: &Ctx) -> droplab::Result<Outcome> {
    let mut worst = 0.0f64;
    for i in 0..10u64 {
        let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let shape = NetworkShape::new(vec![2, 8, 1], act)?;
        let spec = LossSpec::dropout_mse(DropoutConfig::last_hidden(0.8, &shape)?);
        let inst = instance(&shape, &spec, 500 + i);
        let exact = grad_of_sq_grad_norm(&inst.params, &inst.data, &spec, inst.mask.as_ref())?.to_flat();
        let num = central_differences(&inst.params, 1e-5, |p| {
            grad(p, &inst.data, &spec, inst.mask.as_ref()).unwrap().norm_sq()
        });
        worst = worst.max(relative_error(&exact, &num));
    }
    Ok(Outcome::new(
        worst < 1e-4,
        format!("10 width-8 instances, max relative error {worst:.2e} (tol 1e-4)"),
    ))
}

fn perturbation(ctx: &Ctx) -> droplab::Result<Outcome> {
    let cfg = theory_only(ctx, "perturbation");
    let start = Instant::now();
    let art = ctx.run(&cfg)?;
    let elapsed = start.elapsed();
    let reports = art.summary["perturbation"].as_array().cloned().unwrap_or_default();
    let ok = |r: &Value| {
        r["pass"] == true && f(&r["R_S_after"]) <= 1e-16 && f(&r["R1_after"]) < f(&r["R1_before"])
    };
    let passed = reports.iter().filter(|r| ok(r)).count();
    let mut kinds: Vec<String> = reports.iter().map(|r| r["case"].to_string()).collect();
    kinds.dedup();
    let pass = reports.len() == 80 && passed == 80 && kinds.len() == 8 && within(elapsed, 10);
    Ok(Outcome::new(
        pass,
        format!("{passed}/{} fixtures over {} case kinds, {}", reports.len(), kinds.len(), timing(elapsed, 10)),
    ))
}

fn flatness_descent(ctx: &Ctx) -> droplab::Result<Outcome> {
    let cfg = theory_only(ctx, "flatness");
    let start = Instant::now();
    let art = ctx.run(&cfg)?;
    let elapsed = start.elapsed();
    let reports = art.summary["flatness"].as_array().cloned().unwrap_or_default();
    let passed = reports.iter().filter(|r| r["pass"] == true).count();
    let spread = reports.iter().map(|r| f(&r["rate_spread"])).fold(0.0, f64::max);
    let pass = reports.len() == 20 && passed == 20 && within(elapsed, 10);
    Ok(Outcome::new(
        pass,
        format!("{passed}/{} instances, worst rate spread {spread:.3} (tol 0.2), {}", reports.len(), timing(elapsed, 10)),
    ))
}

fn condensation(ctx: &Ctx) -> droplab::Result<Outcome> {
    let base = ctx.config("condensation.toml");
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut all = true;
    for seed in 1..=5 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let art = ctx.run(&cfg)?;
        let (r1, r9) = (art.metric("p1/effective_ratio"), art.metric("p0.9/effective_ratio"));
        let (t1, t9) = (art.metric("p1/derivative_tv"), art.metric("p0.9/derivative_tv"));
        let (r1, r9, t1, t9) = (r1.unwrap_or(f64::NAN), r9.unwrap_or(f64::NAN), t1.unwrap_or(f64::NAN), t9.unwrap_or(f64::NAN));
        let ratio_ok = r9 < 0.5 * r1;
        let tv_ok = t9 < t1;
        all &= ratio_ok && tv_ok;
        lines.push(format!("seed {seed}: ratio {r9:.3} vs {r1:.3}, TV {t9:.2} vs {t1:.2}"));
    }
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        all && within(elapsed, 300),
        format!("{} (need ratio < 0.5x and lower TV), {}", lines.join("; "), timing(elapsed, 300)),
    ))
}

fn loss_switch(ctx: &Ctx) -> droplab::Result<Outcome> {
    let cfg = ctx.config("loss_switch.toml");
    let start = Instant::now();
    let art = ctx.run(&cfg)?;
    let elapsed = start.elapsed();
    let s = &art.summary;
    let branch = s["branches"]
        .as_array()
        .and_then(|b| b.iter().find(|x| x["branch"] == "mse_plus_r1"))
        .cloned()
        .unwrap_or(Value::Null);
    let (rs_pre, r1_pre, ratio_pre) = (f(&s["rs_pre"]), f(&s["r1_pre"]), f(&s["ratio_pre"]));
    let monotone = f(&branch["r1_monotone_fraction"]);
    let r1_down = f(&branch["r1_final"]) < r1_pre && monotone == 1.0;
    let rs_ok = f(&branch["rs_max_post"]) < 10.0 * rs_pre;
    let ratio_down = f(&branch["effective_ratio"]) < ratio_pre;
    Ok(Outcome::new(
        r1_down && rs_ok && ratio_down && within(elapsed, 300),
        format!(
            "R_1 {:.3e} -> {:.3e} (non-increasing at {:.0}% of records), max post R_S {:.2e} vs pre {:.2e} (limit 10x), ratio {:.3} -> {:.3}, {}",
            r1_pre,
            f(&branch["r1_final"]),
            100.0 * monotone,
            f(&branch["rs_max_post"]),
            rs_pre,
            ratio_pre,
            f(&branch["effective_ratio"]),
            timing(elapsed, 300)
        ),
    ))
}

fn r1_equivalence(ctx: &Ctx) -> droplab::Result<Outcome> {
    let cfg = ctx.config("r1_equivalence.toml");
    if ctx.mnist_dir(&cfg).is_none() {
        return Ok(Outcome::new(false, format!("MNIST files not found (set {MNIST_ENV})")));
    }
    let start = Instant::now();
    let art = ctx.run(&cfg)?;
    let elapsed = start.elapsed();
    ctx.mnist_elapsed.set(elapsed);
    let s = &art.summary;
    let base = f(&s["baseline"]["test_accuracy"]);
    let mut pass = (0.74..=0.84).contains(&base);
    let mut parts = vec![format!("baseline {:.1}%", 100.0 * base)];
    for pair in s["pairs"].as_array().cloned().unwrap_or_default() {
        let (d, e) = (f(&pair["dropout"]["test_accuracy"]), f(&pair["mse_plus_r1"]["test_accuracy"]));
        pass &= (d - e).abs() <= 0.03 && d >= base + 0.05 && e >= base + 0.05 && d.min(e) >= 0.83;
        parts.push(format!("p={}: dropout {:.1}%, R_S+R_1 {:.1}%", f(&pair["p"]), 100.0 * d, 100.0 * e));
    }
    Ok(Outcome::new(
        pass && within(elapsed, 1800),
        format!("{} (gap <= 3pp, both >= baseline + 5pp), {}", parts.join(", "), timing(elapsed, 1800)),
    ))
}

fn r2_duality(ctx: &Ctx) -> droplab::Result<Outcome> {
    let cfg = ctx.config("r2_duality.toml");
    if ctx.mnist_dir(&cfg).is_none() {
        return Ok(Outcome::new(false, format!("MNIST files not found (set {MNIST_ENV})")));
    }
    let start = Instant::now();
    let art = ctx.run(&cfg)?;
    let elapsed = start.elapsed();
    let points = art.summary["points"].as_array().cloned().unwrap_or_default();
    let mut pass = !points.is_empty();
    let mut parts = Vec::new();
    for p in &points {
        let factor = f(&p["factor"]);
        pass &= factor < 2.0;
        parts.push(format!(
            "eps={}: dropout {:.3} vs penalty {:.3} (x{factor:.2})",
            f(&p["lr"]),
            f(&p["dropout_ratio"]["ratio"]),
            f(&p["penalty_ratio"]["ratio"])
        ));
    }
    Ok(Outcome::new(
        pass && within(elapsed, 1800),
        format!("{} (limit 2x), {}", parts.join(", "), timing(elapsed, 1800)),
    ))
}

fn flatness_profile(ctx: &Ctx) -> droplab::Result<Outcome> {
    let base = ctx.config("flatness_profile.toml");
    let start = Instant::now();
    let mut fractions = Vec::new();
    for seed in 1..=5 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let art = ctx.run(&cfg)?;
        let curves = art.summary["curves"].as_array().cloned().unwrap_or_default();
        let curve = |p: f64| {
            curves
                .iter()
                .find(|c| f(&c["p"]) == p)
                .and_then(|c| c["curve"].as_array().cloned())
                .unwrap_or_default()
        };
        let (drop, plain) = (curve(0.9), curve(1.0));
        let below = drop.iter().zip(&plain).filter(|(a, b)| f(&a[1]) <= f(&b[1])).count();
        fractions.push(below as f64 / drop.len().max(1) as f64);
    }
    let elapsed = start.elapsed();
    let worst = fractions.iter().copied().fold(1.0, f64::min);
    let shown: Vec<String> = fractions.iter().map(|x| format!("{:.0}%", 100.0 * x)).collect();
    Ok(Outcome::new(
        worst >= 0.9 && within(elapsed, 300),
        format!("dropout curve below at [{}] of grid points (need >= 90%), {}", shown.join(", "), timing(elapsed, 300)),
    ))
}

fn interpolation(ctx: &Ctx) -> droplab::Result<Outcome> {
    let cfg = ctx.config("interpolation.toml");
    if ctx.mnist_dir(&cfg).is_none() {
        return Ok(Outcome::new(false, format!("MNIST files not found (set {MNIST_ENV})")));
    }
    let start = Instant::now();
    let art = ctx.run(&cfg)?;
    let elapsed = start.elapsed() + ctx.mnist_elapsed.get();
    let s = &art.summary;
    let ratio = f(&s["interior_ratio"]);
    Ok(Outcome::new(
        ratio <= 10.0 && within(elapsed, 1800),
        format!(
            "endpoint R_S {:.3e} / {:.3e}, interior max {:.3e} ({ratio:.2}x, limit 10x), {} with the classification run",
            f(&s["endpoint_rs"][0]),
            f(&s["endpoint_rs"][1]),
            f(&s["interior_max"]),
            timing(elapsed, 1800)
        ),
    ))
}

fn modified_flow(ctx: &Ctx) -> droplab::Result<Outcome> {
    let cfg = ctx.config("modified_flow.toml");
    let start = Instant::now();
    let art = ctx.run(&cfg)?;
    let elapsed = start.elapsed();
    let s = &art.summary;
    let parts: Vec<String> = s["reports"]
        .as_array()
        .cloned()
        .unwrap_or_default()
        .iter()
        .map(|r| {
            format!(
                "eps={}: modified {:.3e}, r1 {:.3e}, mse {:.3e}",
                f(&r["lr"]),
                f(&r["dist_modified"]),
                f(&r["dist_r1"]),
                f(&r["dist_mse"])
            )
        })
        .collect();
    Ok(Outcome::new(
        s["closer_to_r1"] == true && s["gap_shrinks"] == true && within(elapsed, 120),
        format!("{}, {}", parts.join("; "), timing(elapsed, 120)),
    ))
}

type Check = fn(&Ctx) -> droplab::Result<Outcome>;

#[test]
fn acceptance() {
    let criteria: [(u32, &str, Check); 12] = [
        (1, "expectation identity, exhaustive masks", lemma_exact),
        (2, "gradient correctness", gradient_correctness),
        (3, "gradient of squared gradient norm", r2_machinery),
        (4, "condensation perturbations", perturbation),
        (5, "flatness descent", flatness_descent),
        (6, "condensation with dropout", condensation),
        (7, "loss switch escape", loss_switch),
        (8, "R_1 equivalence on MNIST-1000", r1_equivalence),
        (9, "R_2 duality ratio", r2_duality),
        (10, "flatness profiles", flatness_profile),
        (11, "L1/L3 interpolation", interpolation),
        (12, "modified flow order", modified_flow),
    ];
    let only: Option<Vec<u32>> = std::env::var("DROPLAB_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let ctx = Ctx {
        out: tempfile::tempdir().unwrap(),
        configs: Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs"),
        mnist_elapsed: Default::default(),
    };
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = check(&ctx).unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {}", outcome.detail);
        if !outcome.pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
