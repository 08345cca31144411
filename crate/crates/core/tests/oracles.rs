//! Independent oracles for the forward pass, Monte Carlo estimators and
//! metrics: straight-line re-implementations, exhaustive searches and dense
//! eigensolves at small sizes.

use droplab::data::Dataset;
use droplab::dropout::{mc_expect, sample_mask_seeded, DropoutConfig, DropoutMask};
use droplab::losses::{dropout_mse, eval_loss, mse, r1, LossSpec};
use droplab::metrics::{
    drop_ratio_from_masks, drop_ratio_statistic, greedy_cover, hessian_trace_flatness, random_direction,
};
use droplab::nn::{init_params, predict, Activation, InitScheme, NetworkShape, ParamSet};
use droplab::theory::{convexity_changes, Neuron1D, ReluNet1D};
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_data(d: usize, k: usize, n: usize, rng: &mut ChaCha8Rng) -> Dataset<f64> {
    let x = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    let y = Array2::from_shape_simple_fn((n, k), || rng.random_range(-1.0..1.0));
    Dataset::new(x, y, "random").unwrap()
}

/// Network output written out with explicit loops.
fn straight_line(params: &ParamSet<f64>, x: &[f64]) -> Vec<f64> {
    let act = params.shape.activation;
    let depth = params.depth();
    let mut h = x.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = vec![0.0; layer.weight.nrows()];
        for (i, zi) in z.iter_mut().enumerate() {
            for (j, hj) in h.iter().enumerate() {
                *zi += layer.weight[[i, j]] * hj;
            }
            if let Some(b) = &layer.bias {
                *zi += b[i];
            }
        }
        h = if l + 1 < depth { z.iter().map(|&v| act.apply(v)).collect() } else { z };
    }
    if let Some(skip) = &params.skip {
        for (i, hi) in h.iter_mut().enumerate() {
            *hi += skip.bias[i] + (0..x.len()).map(|j| skip.weight[[i, j]] * x[j]).sum::<f64>();
        }
    }
    h
}

#[test]
fn forward_matches_straight_line_evaluator() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for act in [Activation::Tanh, Activation::Relu] {
        for widths in [vec![3, 7, 2], vec![2, 5, 4, 3], vec![1, 9, 1]] {
            let shape = NetworkShape::new(widths, act).unwrap();
            for shape in [shape.clone(), shape.clone().with_skip(), shape.without_bias()] {
                let mut params: ParamSet<f64> = init_params(&shape, &InitScheme::gaussian(0.7, rng.random())).unwrap();
                if let Some(skip) = params.skip.as_mut() {
                    skip.weight.mapv_inplace(|_| rng.random_range(-1.0..1.0));
                    skip.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
                }
                let data = random_data(shape.input_dim(), shape.output_dim(), 6, &mut rng);
                let out = predict(&params, data.inputs.view(), None).unwrap();
                for (i, row) in data.inputs.rows().into_iter().enumerate() {
                    let want = straight_line(&params, row.as_slice().unwrap());
                    for (k, w) in want.iter().enumerate() {
                        assert!((out[[i, k]] - w).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

fn lemma_setup(width: usize, seed: u64) -> (ParamSet<f64>, Dataset<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = NetworkShape::new(vec![3, width, 2], Activation::Tanh).unwrap();
    let params = init_params(&shape, &InitScheme::gaussian(1.0 / width as f64, rng.random())).unwrap();
    (params, random_data(3, 2, 5, &mut rng))
}

#[test]
fn dropout_loss_mean_matches_mse_plus_r1() {
    let (params, data) = lemma_setup(6, 3);
    let p = 0.7;
    let cfg = DropoutConfig::last_hidden(p, &params.shape).unwrap();
    let est = mc_expect(|m: &DropoutMask<f64>| dropout_mse(&params, &data, m), &cfg, &params.shape, 20_000, 9).unwrap();
    let target = mse(&params, &data).unwrap() + r1(&params, &data, p).unwrap();
    assert!(est.within(target, 3.0), "{} vs {target} (se {})", est.mean, est.std_error);
}

#[test]
fn dropout_identity_at_width_1000() {
    let (params, data) = lemma_setup(1000, 4);
    let p = 0.8;
    let cfg = DropoutConfig::last_hidden(p, &params.shape).unwrap();
    let est = mc_expect(|m: &DropoutMask<f64>| dropout_mse(&params, &data, m), &cfg, &params.shape, 10_000, 2).unwrap();
    let target = mse(&params, &data).unwrap() + r1(&params, &data, p).unwrap();
    assert!(est.within(target, 3.0), "{} vs {target} (se {})", est.mean, est.std_error);
}

#[test]
fn l4_mean_reduces_to_mse() {
    let (params, data) = lemma_setup(5, 8);
    let p = 0.6;
    let cfg = DropoutConfig::last_hidden(p, &params.shape).unwrap();
    let spec = LossSpec::l4(cfg.clone());
    let est = mc_expect(|m: &DropoutMask<f64>| eval_loss(&spec, &params, &data, Some(m)), &cfg, &params.shape, 20_000, 5)
        .unwrap();
    let target = mse(&params, &data).unwrap();
    assert!(est.within(target, 3.0), "{} vs {target} (se {})", est.mean, est.std_error);
}

/// Smallest number of the given vectors whose cosine neighbourhoods cover all.
fn exact_cover(units: &[Vec<f64>], threshold: f64) -> usize {
    let m = units.len();
    let close = |i: usize, j: usize| units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>() > threshold;
    let reach: Vec<u32> = (0..m).map(|i| (0..m).filter(|&j| close(i, j)).fold(0, |acc, j| acc | 1 << j)).collect();
    let all = (1u32 << m) - 1;
    (1u32..=all)
        .filter(|set| (0..m).filter(|i| set >> i & 1 == 1).fold(0, |acc, i| acc | reach[i]) == all)
        .map(|set| set.count_ones() as usize)
        .min()
        .unwrap()
}

#[test]
fn greedy_cover_against_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut equal = 0;
    for _ in 0..100 {
        let units: Vec<Vec<f64>> = (0..12)
            .map(|_| {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let greedy = greedy_cover(&units, 0.8).len();
        let exact = exact_cover(&units, 0.8);
        assert!(greedy >= exact);
        equal += usize::from(greedy == exact);
    }
    assert!(equal >= 90, "greedy optimal on {equal}/100");
}

#[test]
fn independent_directions_are_nearly_orthogonal() {
    let shape = NetworkShape::new(vec![100, 120, 1], Activation::Relu).unwrap();
    let params: ParamSet<f64> = init_params(&shape, &InitScheme::gaussian(0.1, 1)).unwrap();
    let a = random_direction(&params, 10).direction;
    let b = random_direction(&params, 11).direction;
    let cos = a.dot(&b) / (a.norm() * b.norm());
    assert!(params.num_params() >= 10_000);
    assert!(cos.abs() < 0.2, "cosine {cos}");
}

#[test]
fn trace_equals_gauss_newton_eigenvalue_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for act in [Activation::Tanh, Activation::Relu] {
        let shape = NetworkShape::new(vec![2, 4, 1], act).unwrap();
        let params: ParamSet<f64> = init_params(&shape, &InitScheme::gaussian(0.8, rng.random())).unwrap();
        let data = random_data(2, 1, 5, &mut rng);
        let theta = params.to_flat();
        let h = 1e-6;
        // Per-sample output Jacobian by central differences.
        let n = data.len();
        let mut jac = DMatrix::<f64>::zeros(n, theta.len());
        for k in 0..theta.len() {
            let mut v = theta.clone();
            v[k] += h;
            let up = predict(&ParamSet::from_flat(&shape, &v).unwrap(), data.inputs.view(), None).unwrap();
            v[k] -= 2.0 * h;
            let down = predict(&ParamSet::from_flat(&shape, &v).unwrap(), data.inputs.view(), None).unwrap();
            for i in 0..n {
                jac[(i, k)] = (up[[i, 0]] - down[[i, 0]]) / (2.0 * h);
            }
        }
        let gn = jac.transpose() * &jac / n as f64;
        let eig_sum: f64 = gn.symmetric_eigen().eigenvalues.iter().sum();
        let trace = hessian_trace_flatness(&params, &data).unwrap();
        assert!((trace - eig_sum).abs() < 1e-8 * trace.max(1.0), "{trace} vs {eig_sum}");
    }
}

#[test]
fn ratio_statistic_is_order_invariant_and_self_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let shape = NetworkShape::new(vec![3, 10, 1], Activation::Tanh).unwrap();
    let params: ParamSet<f64> = init_params(&shape, &InitScheme::gaussian(0.5, 4)).unwrap();
    let data = random_data(3, 1, 12, &mut rng);
    let cfg = DropoutConfig::last_hidden(0.7, &shape).unwrap();
    let mut masks: Vec<DropoutMask<f64>> =
        (0..200).map(|s| sample_mask_seeded(&cfg, &shape, 77, s).unwrap()).collect();
    let a = drop_ratio_from_masks(&params, &data, &cfg, &masks).unwrap();
    masks.shuffle(&mut rng);
    let b = drop_ratio_from_masks(&params, &data, &cfg, &masks).unwrap();
    assert!((a.ratio - b.ratio).abs() <= 1e-12 * a.ratio);

    let x = drop_ratio_statistic(&params, &data, 0.7, 3000, 1).unwrap();
    let y = drop_ratio_statistic(&params, &data, 0.7, 3000, 2).unwrap();
    // Delta-method standard error of a ratio of means.
    let se = |r: &droplab::metrics::DropRatio| {
        r.ratio * ((r.loss.std_error / r.loss.mean).powi(2) + (r.grad_norm_sq.std_error / r.grad_norm_sq.mean).powi(2)).sqrt()
    };
    let combined = (se(&x).powi(2) + se(&y).powi(2)).sqrt();
    assert!((x.ratio - y.ratio).abs() <= 3.0 * combined, "{} vs {} (se {combined})", x.ratio, y.ratio);
}

/// Sign changes of the second difference of `net` on a dense grid over the
/// data range.
fn dense_grid_changes(net: &ReluNet1D, lo: f64, hi: f64) -> usize {
    let points = 200_001;
    let step = (hi - lo) / (points - 1) as f64;
    let f: Vec<f64> = (0..points).map(|i| net.eval(lo + i as f64 * step)).collect();
    let mut signs = Vec::new();
    for i in 1..points - 1 {
        let d2 = f[i + 1] - 2.0 * f[i] + f[i - 1];
        if d2.abs() > 1e-9 * step {
            signs.push(d2 > 0.0);
        }
    }
    signs.windows(2).filter(|w| w[0] != w[1]).count()
}

#[test]
fn convexity_changes_against_dense_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..100 {
        let neurons: Vec<Neuron1D> = (0..6)
            .map(|_| Neuron1D {
                a: rng.random_range(-1.0..1.0),
                w: rng.random_range(-2.0..2.0),
                b: rng.random_range(-2.0..2.0),
            })
            .collect();
        let net = ReluNet1D {
            neurons,
            skip_a: 0.0,
            skip_b: 0.0,
        };
        let mut xs: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        xs.sort_by(f64::total_cmp);
        let want = dense_grid_changes(&net, xs[0], xs[7]);
        assert_eq!(convexity_changes(&net, &xs).unwrap(), want);
    }
}
