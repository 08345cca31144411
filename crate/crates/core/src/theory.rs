//! Numerical checks of the expectation lemma, the constructive perturbations
//! behind the condensation theorem for one-dimensional two-layer ReLU
//! networks, and the flatness-descent theorem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::grad;
use crate::data::Dataset;
use crate::dropout::{mc_expect, DropoutConfig, DropoutMask};
use crate::error::{LabError, Result};
use crate::losses::{dropout_mse, mse, r1, LossSpec};
use crate::metrics::hessian_trace_flatness;
use crate::nn::{Activation, NetworkShape, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neuron1D {
    pub a: f64,
    pub w: f64,
    pub b: f64,
}

impl Neuron1D {
    /// Kink location `-b/w`, if the neuron has one.
    pub fn intercept(&self) -> Option<f64> {
        (self.w != 0.0).then(|| -self.b / self.w)
    }

    pub fn pre(&self, x: f64) -> f64 {
        self.w * x + self.b
    }
}

/// `f(x) = Σ_j a_j relu(w_j x + b_j) + a x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluNet1D {
    pub neurons: Vec<Neuron1D>,
    pub skip_a: f64,
    pub skip_b: f64,
}

impl ReluNet1D {
    pub fn eval(&self, x: f64) -> f64 {
        self.neurons.iter().map(|n| n.a * n.pre(x).max(0.0)).sum::<f64>() + self.skip_a * x + self.skip_b
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape::new(vec![1, self.neurons.len(), 1], Activation::Relu)
            .expect("non-empty network")
            .with_skip()
    }

    /// As a `[1, m, 1]` parameter set with linear skip; the output bias is 0
    /// and the skip carries `(a, b)`.
    pub fn to_params(&self) -> ParamSet<f64> {
        let mut p = ParamSet::zeros(&self.shape());
        for (j, n) in self.neurons.iter().enumerate() {
            p.layers[0].weight[[j, 0]] = n.w;
            p.layers[0].bias.as_mut().expect("bias")[j] = n.b;
            p.layers[1].weight[[0, j]] = n.a;
        }
        let skip = p.skip.as_mut().expect("skip");
        skip.weight[[0, 0]] = self.skip_a;
        skip.bias[0] = self.skip_b;
        p
    }

    pub fn from_params(p: &ParamSet<f64>) -> Result<Self> {
        let s = &p.shape;
        if s.layer_widths.len() != 3 || s.input_dim() != 1 || s.output_dim() != 1 || s.activation != Activation::Relu {
            return Err(LabError::config("shape", "expected a [1, m, 1] ReLU network"));
        }
        let bias = |l: usize, j: usize| p.layers[l].bias.as_ref().map_or(0.0, |b| b[j]);
        let neurons = (0..s.width(1))
            .map(|j| Neuron1D {
                a: p.layers[1].weight[[0, j]],
                w: p.layers[0].weight[[j, 0]],
                b: bias(0, j),
            })
            .collect();
        let (skip_a, skip_b) = p.skip.as_ref().map_or((0.0, 0.0), |k| (k.weight[[0, 0]], k.bias[0]));
        Ok(ReluNet1D {
            neurons,
            skip_a,
            skip_b: skip_b + bias(1, 0),
        })
    }

    /// Dataset with targets `f(x)` at the given inputs.
    pub fn interpolated(&self, xs: &[f64]) -> Result<Dataset<f64>> {
        let ys: Vec<f64> = xs.iter().map(|&x| self.eval(x)).collect();
        Dataset::from_1d(xs, &ys, "exact interpolation of a 1-D ReLU network")
    }
}

fn check_sorted(xs: &[f64]) -> Result<()> {
    if xs.len() < 2 || xs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(LabError::Precondition("data inputs must be strictly increasing with n >= 2".into()));
    }
    Ok(())
}

/// Number of convexity changes of `net` on `(x_1, x_n)`: sign changes of
/// the slope jumps `a_j |w_j|` along the sorted kinks.
pub fn convexity_changes(net: &ReluNet1D, xs: &[f64]) -> Result<usize> {
    check_sorted(xs)?;
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    let mut kinks: Vec<(f64, f64)> = net
        .neurons
        .iter()
        .filter_map(|n| n.intercept().map(|t| (t, n.a * n.w.abs())))
        .filter(|&(t, _)| t > lo && t < hi)
        .collect();
    kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (t, jump) in kinks {
        match merged.last_mut() {
            Some(last) if last.0 == t => last.1 += jump,
            _ => merged.push((t, jump)),
        }
    }
    let signs: Vec<bool> = merged.iter().filter(|k| k.1 != 0.0).map(|k| k.1 > 0.0).collect();
    Ok(signs.windows(2).filter(|w| w[0] != w[1]).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    ConvexityCase1,
    ConvexityCase2,
    ConvexityCase3,
    ConvexityCase4,
    InterceptSameSignPos,
    InterceptOppCase1,
    InterceptOppCase2,
    InterceptOppCase3,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 8] = [
        PerturbationKind::ConvexityCase1,
        PerturbationKind::ConvexityCase2,
        PerturbationKind::ConvexityCase3,
        PerturbationKind::ConvexityCase4,
        PerturbationKind::InterceptSameSignPos,
        PerturbationKind::InterceptOppCase1,
        PerturbationKind::InterceptOppCase2,
        PerturbationKind::InterceptOppCase3,
    ];

    pub fn is_convexity(self) -> bool {
        matches!(
            self,
            PerturbationKind::ConvexityCase1
                | PerturbationKind::ConvexityCase2
                | PerturbationKind::ConvexityCase3
                | PerturbationKind::ConvexityCase4
        )
    }

    /// Required signs of `(w1, a1, w2, a2)`.
    fn signs(self) -> (bool, bool, bool, bool) {
        use PerturbationKind::*;
        match self {
            ConvexityCase1 => (true, false, true, true),
            ConvexityCase2 => (true, false, false, true),
            ConvexityCase3 => (false, false, true, true),
            ConvexityCase4 => (false, false, false, true),
            InterceptSameSignPos => (true, false, true, true),
            InterceptOppCase1 | InterceptOppCase2 | InterceptOppCase3 => (true, false, true, false),
        }
    }
}

/// A perturbation of neurons `k1`, `k2` anchored at data point `anchor`.
///
/// For convexity cases the kinks satisfy `x[anchor-1] < t1 <= x[anchor] <= t2
/// < x[anchor+1]`; for intercept cases both kinks lie in
/// `(x[anchor], x[anchor+1])` with `t1 < t2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCase {
    pub kind: PerturbationKind,
    pub k1: usize,
    pub k2: usize,
    pub anchor: usize,
    pub epsilon: f64,
}

impl PerturbationCase {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }
}

fn precondition(msg: String) -> LabError {
    LabError::Precondition(msg)
}

/// Checks the sign pattern and interval bookkeeping of `case` on `net`.
pub fn check_case(net: &ReluNet1D, xs: &[f64], case: &PerturbationCase) -> Result<()> {
    check_sorted(xs)?;
    let m = net.neurons.len();
    if case.k1 >= m || case.k2 >= m || case.k1 == case.k2 {
        return Err(precondition(format!("neuron indices ({}, {}) invalid for width {m}", case.k1, case.k2)));
    }
    if !(0.0..1.0).contains(&case.epsilon) {
        return Err(precondition(format!("0 <= epsilon < 1 violated: {}", case.epsilon)));
    }
    let (n1, n2) = (net.neurons[case.k1], net.neurons[case.k2]);
    let (sw1, sa1, sw2, sa2) = case.kind.signs();
    let check_sign = |v: f64, positive: bool, name: &str| -> Result<()> {
        if (positive && v > 0.0) || (!positive && v < 0.0) {
            Ok(())
        } else {
            Err(precondition(format!("{name} {} 0 violated ({name} = {v})", if positive { ">" } else { "<" })))
        }
    };
    check_sign(n1.w, sw1, "w1")?;
    check_sign(n1.a, sa1, "a1")?;
    check_sign(n2.w, sw2, "w2")?;
    check_sign(n2.a, sa2, "a2")?;
    let t1 = -n1.b / n1.w;
    let t2 = -n2.b / n2.w;
    if !(t1 < t2) {
        return Err(precondition(format!("t1 < t2 violated (t1 = {t1}, t2 = {t2})")));
    }
    let i = case.anchor;
    if case.kind.is_convexity() {
        if i == 0 || i + 1 >= xs.len() {
            return Err(precondition(format!("anchor {i} must have data on both sides")));
        }
        let (left, x, right) = (xs[i - 1], xs[i], xs[i + 1]);
        if !(left < t1 && t1 <= x && x <= t2 && t2 < right) {
            return Err(precondition(format!(
                "x[i-1] < t1 <= x[i] <= t2 < x[i+1] violated ({left} < {t1} <= {x} <= {t2} < {right})"
            )));
        }
    } else {
        if i + 1 >= xs.len() {
            return Err(precondition(format!("anchor {i} must have a right neighbour")));
        }
        let (x, right) = (xs[i], xs[i + 1]);
        if !(x < t1 && t2 < right) {
            return Err(precondition(format!("x[i] < t1 < t2 < x[i+1] violated ({x} < {t1} < {t2} < {right})")));
        }
        let (p1, p2) = (n1.a * n1.w, n2.a * n2.w);
        let tol = 1e-12 * p1.abs().max(p2.abs());
        let ok = match case.kind {
            PerturbationKind::InterceptOppCase1 => (p1 - p2).abs() <= tol,
            PerturbationKind::InterceptOppCase2 => p1 - p2 > tol,
            PerturbationKind::InterceptOppCase3 => p2 - p1 > tol,
            _ => true,
        };
        if !ok {
            return Err(precondition(format!(
                "a1 w1 vs a2 w2 relation of {:?} violated (a1 w1 = {p1}, a2 w2 = {p2})",
                case.kind
            )));
        }
    }
    Ok(())
}

/// Applies the constructive perturbation of `case` to `net`.
pub fn perturb(net: &ReluNet1D, xs: &[f64], case: &PerturbationCase) -> Result<ReluNet1D> {
    check_case(net, xs, case)?;
    let eps = case.epsilon;
    let x = xs[case.anchor];
    let mut out = net.clone();
    let (n1, n2) = (net.neurons[case.k1], net.neurons[case.k2]);
    let (mut m1, mut m2) = (n1, n2);
    use PerturbationKind::*;
    match case.kind {
        ConvexityCase1 | InterceptSameSignPos | InterceptOppCase3 => {
            m1.w = n1.w * (1.0 - eps);
            m1.b = n1.b + x * n1.w * eps;
            let r = n1.a / n2.a;
            m2.w = n2.w - r * (m1.w - n1.w);
            m2.b = n2.b - r * (m1.b - n1.b);
        }
        ConvexityCase2 | ConvexityCase3 => {
            m1.w = n1.w * (1.0 - eps);
            m1.b = n1.b + x * n1.w * eps;
            let r = n1.a / n2.a;
            m2.w = n2.w + r * (m1.w - n1.w);
            m2.b = n2.b + r * (m1.b - n1.b);
            out.skip_a += -n1.a * (m1.w - n1.w);
            out.skip_b += -n1.a * (m1.b - n1.b);
        }
        ConvexityCase4 => {
            m2.w = n2.w * (1.0 - eps);
            m2.b = n2.b + x * n2.w * eps;
            let r = n2.a / n1.a;
            m1.w = n1.w - r * (m2.w - n2.w);
            m1.b = n1.b - r * (m2.b - n2.b);
        }
        InterceptOppCase1 => {
            m1.b = n1.b - eps;
            m2.b = n2.b - n1.a / n2.a * (m1.b - n1.b);
        }
        InterceptOppCase2 => {
            let pivot = (n2.a * n2.b - n1.a * n1.b) / (n1.a * n1.w - n2.a * n2.w);
            m1.w = n1.w * (1.0 + eps);
            m1.b = n1.b - pivot * n1.w * eps;
            let r = n1.a / n2.a;
            m2.w = n2.w - r * (m1.w - n1.w);
            m2.b = n2.b - r * (m1.b - n1.b);
        }
    }
    out.neurons[case.k1] = m1;
    out.neurons[case.k2] = m2;
    Ok(out)
}

/// Data indices whose active set differs between the two networks.
pub fn activation_drift(before: &ReluNet1D, after: &ReluNet1D, xs: &[f64]) -> Vec<usize> {
    xs.iter()
        .enumerate()
        .filter(|(_, &x)| {
            before
                .neurons
                .iter()
                .zip(&after.neurons)
                .any(|(u, v)| (u.pre(x) > 0.0) != (v.pre(x) > 0.0))
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub rs_after: f64,
    pub delta_r1: f64,
    /// `ΔR1 / ε`.
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub case: PerturbationKind,
    pub epsilon: f64,
    #[serde(rename = "R_S_before")]
    pub rs_before: f64,
    #[serde(rename = "R_S_after")]
    pub rs_after: f64,
    #[serde(rename = "R1_before")]
    pub r1_before: f64,
    #[serde(rename = "R1_after")]
    pub r1_after: f64,
    pub pass: bool,
    pub vacuous: bool,
    pub sweep: Vec<SweepPoint>,
    /// `(max - min) / |mean|` of the sweep slopes.
    pub slope_spread: f64,
    pub diagnostics: Vec<String>,
}

/// The `ε` sweep used to check first-order decrease of `R_1`.
pub const EPSILON_SWEEP: [f64; 3] = [1e-4, 5e-5, 2.5e-5];

/// Relative spread of `ΔR1/ε` allowed across the sweep.
pub const SLOPE_SPREAD_TOL: f64 = 0.05;

/// Checks `R_S(θ') <= 1e-16`, `R_1(θ') < R_1(θ)` and linear decrease of
/// `R_1` in `ε` over [`EPSILON_SWEEP`], with the activation pattern of
/// every data point preserved.
pub fn verify_perturbation(
    net: &ReluNet1D,
    data: &Dataset<f64>,
    case: &PerturbationCase,
    p: f64,
) -> Result<PerturbationReport> {
    let xs: Vec<f64> = data.xs().to_vec();
    let theta = net.to_params();
    let rs_before = mse(&theta, data)?;
    if rs_before > 1e-20 {
        return Err(LabError::Precondition(format!("R_S(net) = {rs_before:e} exceeds 1e-20")));
    }
    let r1_before = r1(&theta, data, p)?;
    let mut diagnostics = Vec::new();
    let mut sweep = Vec::new();
    let mut primary = None;
    for eps in std::iter::once(case.epsilon).chain(EPSILON_SWEEP) {
        let perturbed = perturb(net, &xs, &case.with_epsilon(eps))?;
        let drift = activation_drift(net, &perturbed, &xs);
        if !drift.is_empty() {
            diagnostics.push(format!("activation pattern changed at data indices {drift:?} (epsilon = {eps})"));
        }
        let theta2 = perturbed.to_params();
        let rs_after = mse(&theta2, data)?;
        let r1_after = r1(&theta2, data, p)?;
        if primary.is_none() {
            primary = Some((rs_after, r1_after));
        } else {
            let delta = r1_after - r1_before;
            sweep.push(SweepPoint {
                epsilon: eps,
                rs_after,
                delta_r1: delta,
                slope: delta / eps,
            });
        }
    }
    let (rs_after, r1_after) = primary.expect("primary epsilon evaluated");
    let slopes: Vec<f64> = sweep.iter().map(|s| s.slope).collect();
    let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
    let spread = slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - slopes.iter().cloned().fold(f64::INFINITY, f64::min);
    let slope_spread = if mean != 0.0 { spread / mean.abs() } else { f64::INFINITY };
    let vacuous = p == 1.0;
    let mut pass = diagnostics.is_empty();
    if vacuous {
        diagnostics.push("p = 1: R1 vanishes identically".into());
        pass = false;
    } else {
        if rs_after > 1e-16 || sweep.iter().any(|s| s.rs_after > 1e-16) {
            diagnostics.push(format!("R_S after perturbation {rs_after:e} exceeds 1e-16"));
            pass = false;
        }
        if case.epsilon > 0.0 && r1_after >= r1_before {
            diagnostics.push("R1 did not decrease at the primary epsilon".into());
            pass = false;
        }
        if sweep.iter().any(|s| s.delta_r1 >= 0.0) {
            diagnostics.push("R1 did not decrease for every epsilon in the sweep".into());
            pass = false;
        }
        if !(mean < 0.0 && slope_spread < SLOPE_SPREAD_TOL) {
            diagnostics.push(format!("dR1/eps not converged to a negative constant: slopes {slopes:?}"));
            pass = false;
        }
    }
    Ok(PerturbationReport {
        case: case.kind,
        epsilon: case.epsilon,
        rs_before,
        rs_after,
        r1_before,
        r1_after,
        pass,
        vacuous,
        sweep,
        slope_spread,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationFixture {
    pub net: ReluNet1D,
    pub xs: Vec<f64>,
    pub case: PerturbationCase,
}

impl PerturbationFixture {
    pub fn data(&self) -> Result<Dataset<f64>> {
        self.net.interpolated(&self.xs)
    }
}

/// Random zero-loss fixture satisfying the preconditions of `kind`: eight
/// sorted inputs, the perturbed pair, and background neurons whose kinks sit
/// in other intervals or outside the data range.
pub fn generate_fixture(kind: PerturbationKind, seed: u64) -> PerturbationFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let xs: Vec<f64> = (0..n).map(|k| k as f64 + rng.random_range(-0.25..0.25)).collect();
    let anchor = rng.random_range(2..=4);
    let mag = |rng: &mut ChaCha8Rng| rng.random_range(0.5..2.0);
    let signed = |v: f64, positive: bool| if positive { v } else { -v };
    let (sw1, sa1, sw2, sa2) = kind.signs();
    let inside = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let margin = 0.15 * (hi - lo);
        rng.random_range(lo + margin..hi - margin)
    };
    let (t1, t2) = if kind.is_convexity() {
        (inside(&mut rng, xs[anchor - 1], xs[anchor]), inside(&mut rng, xs[anchor], xs[anchor + 1]))
    } else {
        let (lo, hi) = (xs[anchor], xs[anchor + 1]);
        let len = hi - lo;
        let u = rng.random_range(0.15..0.45);
        let v = rng.random_range(0.55..0.85);
        (lo + u * len, lo + v * len)
    };
    let w1 = signed(mag(&mut rng), sw1);
    let w2 = signed(mag(&mut rng), sw2);
    let a1 = signed(mag(&mut rng), sa1);
    let mut a2 = signed(mag(&mut rng), sa2);
    match kind {
        PerturbationKind::InterceptOppCase1 => a2 = a1 * w1 / w2,
        PerturbationKind::InterceptOppCase2 => {
            // a1 w1 > a2 w2 with both negative: |a2 w2| clearly larger.
            a2 = a1 * w1 / w2 * rng.random_range(1.3..2.5);
        }
        PerturbationKind::InterceptOppCase3 => {
            a2 = a1 * w1 / w2 * rng.random_range(0.3..0.75);
        }
        _ => {}
    }
    let pair = [Neuron1D { a: a1, w: w1, b: -w1 * t1 }, Neuron1D { a: a2, w: w2, b: -w2 * t2 }];

    let busy = if kind.is_convexity() { [anchor - 1, anchor] } else { [anchor, anchor] };
    let free: Vec<usize> = (0..n - 1).filter(|k| !busy.contains(k)).collect();
    let extra = rng.random_range(2..=4);
    let mut neurons: Vec<Neuron1D> = (0..extra)
        .map(|_| {
            let t = if rng.random_bool(0.25) {
                if rng.random_bool(0.5) {
                    xs[0] - rng.random_range(0.5..2.0)
                } else {
                    xs[n - 1] + rng.random_range(0.5..2.0)
                }
            } else {
                let k = free[rng.random_range(0..free.len())];
                inside(&mut rng, xs[k], xs[k + 1])
            };
            let w = signed(mag(&mut rng), rng.random_bool(0.5));
            Neuron1D {
                a: signed(mag(&mut rng), rng.random_bool(0.5)),
                w,
                b: -w * t,
            }
        })
        .collect();
    let k1 = rng.random_range(0..=neurons.len());
    neurons.insert(k1, pair[0]);
    let k2 = rng.random_range(0..=neurons.len());
    neurons.insert(k2, pair[1]);
    let k1 = if k2 <= k1 { k1 + 1 } else { k1 };
    let net = ReluNet1D {
        neurons,
        skip_a: rng.random_range(-1.0..1.0),
        skip_b: rng.random_range(-1.0..1.0),
    };
    PerturbationFixture {
        net,
        xs,
        case: PerturbationCase {
            kind,
            k1,
            k2,
            anchor,
            epsilon: 1e-4,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LemmaMode {
    Exhaustive,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub mode: LemmaMode,
    /// Width of the dropped layer.
    pub width: usize,
    pub p: f64,
    /// `R_S + R_1`.
    pub expected: f64,
    /// `E_η R_S^drop`, exact or estimated.
    pub observed: f64,
    pub abs_error: f64,
    pub std_error: Option<f64>,
    pub pass: bool,
}

/// Largest hidden width accepted by exhaustive enumeration.
pub const EXHAUSTIVE_MAX_WIDTH: usize = 20;

/// Tolerance of the exhaustive comparison.
pub const LEMMA_TOL: f64 = 1e-10;

/// Compares `E_η R_S^drop` with `R_S + R_1` for dropout after the last
/// hidden layer.
pub fn verify_lemma1(params: &ParamSet<f64>, data: &Dataset<f64>, p: f64, mode: LemmaMode) -> Result<LemmaReport> {
    let cfg = DropoutConfig::last_hidden(p, &params.shape)?;
    let layer = cfg.sites[0];
    let expected = mse(params, data)? + r1(params, data, p)?;
    let (observed, std_error) = match mode {
        LemmaMode::Exhaustive => {
            let m = params.shape.width(layer);
            if m > EXHAUSTIVE_MAX_WIDTH {
                return Err(LabError::config(
                    "width",
                    format!("exhaustive enumeration needs hidden width <= {EXHAUSTIVE_MAX_WIDTH}, got {m}"),
                ));
            }
            (exhaustive_expectation(params, data, p, layer, m)?, None)
        }
        LemmaMode::MonteCarlo { samples, seed } => {
            let est = mc_expect(|mask| dropout_mse(params, data, mask), &cfg, &params.shape, samples, seed)?;
            (est.mean, Some(est.std_error))
        }
    };
    let abs_error = (observed - expected).abs();
    let pass = match std_error {
        None => abs_error <= LEMMA_TOL,
        Some(se) => abs_error <= 3.0 * se,
    };
    Ok(LemmaReport {
        mode,
        width: params.shape.width(layer),
        p,
        expected,
        observed,
        abs_error,
        std_error,
        pass,
    })
}

/// `Σ_masks P(mask) R_S^drop(θ, mask)` over all `2^m` keep patterns, summed
/// in fixed chunks so the result is reproducible.
fn exhaustive_expectation(params: &ParamSet<f64>, data: &Dataset<f64>, p: f64, layer: usize, m: usize) -> Result<f64> {
    const CHUNK: u64 = 1024;
    let total = 1u64 << m;
    let chunks: Vec<f64> = (0..total.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = 0.0;
            for bits in c * CHUNK..((c + 1) * CHUNK).min(total) {
                let keep: Vec<bool> = (0..m).map(|j| bits >> j & 1 == 1).collect();
                let kept = keep.iter().filter(|&&k| k).count() as i32;
                let weight = p.powi(kept) * (1.0 - p).powi(m as i32 - kept);
                if weight == 0.0 {
                    continue;
                }
                let mask = DropoutMask::from_keep(p, &[(layer, keep)])?;
                acc += weight * dropout_mse(params, data, &mask)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessStep {
    pub step: f64,
    pub delta: f64,
    /// `delta / step`.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub seed: Option<u64>,
    pub trace_before: f64,
    pub grad_r1_norm: f64,
    pub steps: Vec<FlatnessStep>,
    /// `(max - min) / |mean|` of the rates.
    pub rate_spread: f64,
    pub vacuous: bool,
    pub pass: bool,
}

/// Step sizes of the explicit-Euler probe.
pub const FLATNESS_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Allowed relative spread of `Δ/h` across [`FLATNESS_STEPS`].
pub const FLATNESS_RATE_TOL: f64 = 0.2;

/// Keep probability used for the `R_1` term of the flatness check.
pub const FLATNESS_P: f64 = 0.8;

/// Zero-loss bias-free two-layer ReLU net `f(x) = Σ a_j relu(w_j·x)` and data
/// it interpolates, with every pre-activation at least `1e-3` away from zero.
pub fn flatness_fixture(seed: u64) -> (ParamSet<f64>, Dataset<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, m, n) = (2, 6, 5);
    let shape = NetworkShape::new(vec![d, m, 1], Activation::Relu)
        .expect("valid")
        .without_bias();
    loop {
        let mut p = ParamSet::<f64>::zeros(&shape);
        p.layers[0].weight.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        p.layers[1].weight.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        let x = ndarray::Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        let pre = x.dot(&p.layers[0].weight.t());
        if pre.iter().any(|z: &f64| z.abs() < 1e-3) || pre.iter().all(|&z| z <= 0.0) {
            continue;
        }
        let y = crate::nn::predict(&p, x.view(), None).expect("shapes match");
        let data = Dataset::new(x, y, "exact interpolation of a bias-free ReLU network").expect("finite");
        return (p, data);
    }
}

/// Euler steps along `−∇(R_S + R_1)` from a zero-loss point and the change in
/// `(1/n) Σ ‖∇_θ f(x_i)‖²`.
pub fn verify_flatness_descent_on(params: &ParamSet<f64>, data: &Dataset<f64>, p: f64) -> Result<FlatnessReport> {
    let loss = LossSpec::mse_plus_r1(DropoutConfig::last_hidden(p, &params.shape)?);
    let g = grad(params, data, &loss, None)?;
    let trace_before = hessian_trace_flatness(params, data)?;
    let grad_r1_norm = g.norm();
    let mut steps = Vec::new();
    for h in FLATNESS_STEPS {
        let moved = params.added(-h, &g);
        let delta = hessian_trace_flatness(&moved, data)? - trace_before;
        steps.push(FlatnessStep { step: h, delta, rate: delta / h });
    }
    let rates: Vec<f64> = steps.iter().map(|s| s.rate).collect();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let spread = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let rate_spread = if mean != 0.0 { spread / mean.abs() } else { f64::INFINITY };
    let vacuous = grad_r1_norm == 0.0;
    let pass = !vacuous && steps.iter().all(|s| s.delta < 0.0) && rate_spread < FLATNESS_RATE_TOL;
    Ok(FlatnessReport {
        seed: None,
        trace_before,
        grad_r1_norm,
        steps,
        rate_spread,
        vacuous,
        pass,
    })
}

pub fn verify_flatness_descent(seed: u64) -> Result<FlatnessReport> {
    let (params, data) = flatness_fixture(seed);
    let mut report = verify_flatness_descent_on(&params, &data, FLATNESS_P)?;
    report.seed = Some(seed);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neuron(a: f64, w: f64, t: f64) -> Neuron1D {
        Neuron1D { a, w, b: -w * t }
    }

    #[test]
    fn single_neuron_has_no_convexity_change() {
        let net = ReluNet1D { neurons: vec![neuron(1.0, 1.0, 0.5)], skip_a: 0.0, skip_b: 0.0 };
        assert_eq!(convexity_changes(&net, &[0.0, 1.0, 2.0]).unwrap(), 0);
    }

    #[test]
    fn convex_then_concave_counts_one() {
        let net = ReluNet1D {
            neurons: vec![neuron(1.0, 1.0, 0.5), neuron(-1.0, 1.0, 1.5)],
            skip_a: 0.0,
            skip_b: 0.0,
        };
        assert_eq!(convexity_changes(&net, &[0.0, 1.0, 2.0]).unwrap(), 1);
        // Outside kinks do not count.
        let mut wide = net.clone();
        wide.neurons.push(neuron(-3.0, -1.0, 7.0));
        assert_eq!(convexity_changes(&wide, &[0.0, 1.0, 2.0]).unwrap(), 1);
        assert!(convexity_changes(&net, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let f = generate_fixture(PerturbationKind::ConvexityCase2, 3);
        let back = ReluNet1D::from_params(&f.net.to_params()).unwrap();
        assert_eq!(back, f.net);
        let d = f.data().unwrap();
        assert!(mse(&f.net.to_params(), &d).unwrap() < 1e-30);
    }

    #[test]
    fn zero_epsilon_is_identity() {
        for kind in PerturbationKind::ALL {
            let f = generate_fixture(kind, 1);
            let same = perturb(&f.net, &f.xs, &f.case.with_epsilon(0.0)).unwrap();
            assert_eq!(same, f.net, "{kind:?}");
        }
    }

    #[test]
    fn case_one_moves_intercepts_apart() {
        let f = generate_fixture(PerturbationKind::ConvexityCase1, 5);
        let g = perturb(&f.net, &f.xs, &f.case).unwrap();
        let t = |n: &ReluNet1D, k: usize| n.neurons[k].intercept().unwrap();
        assert!(t(&g, f.case.k1) < t(&f.net, f.case.k1));
        assert!(t(&g, f.case.k2) > t(&f.net, f.case.k2));
    }

    #[test]
    fn hand_built_case_one_keeps_outputs() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let net = ReluNet1D {
            neurons: vec![neuron(-1.0, 1.0, 0.6), neuron(2.0, 1.5, 1.4)],
            skip_a: 0.3,
            skip_b: -0.2,
        };
        let case = PerturbationCase { kind: PerturbationKind::ConvexityCase1, k1: 0, k2: 1, anchor: 1, epsilon: 1e-3 };
        let g = perturb(&net, &xs, &case).unwrap();
        for &x in &xs {
            assert!((g.eval(x) - net.eval(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn violated_preconditions_name_the_inequality() {
        let f = generate_fixture(PerturbationKind::ConvexityCase1, 2);
        let mut bad = f.case;
        bad.kind = PerturbationKind::ConvexityCase2;
        let err = perturb(&f.net, &f.xs, &bad).unwrap_err().to_string();
        assert!(err.contains("w2 < 0"), "{err}");
        let mut swapped = f.case;
        std::mem::swap(&mut swapped.k1, &mut swapped.k2);
        assert!(perturb(&f.net, &f.xs, &swapped).is_err());
    }

    #[test]
    fn every_kind_passes_on_a_fixture() {
        for kind in PerturbationKind::ALL {
            let f = generate_fixture(kind, 17);
            let r = verify_perturbation(&f.net, &f.data().unwrap(), &f.case, 0.8).unwrap();
            assert!(r.pass, "{kind:?}: {r:?}");
        }
    }

    #[test]
    fn p_one_is_vacuous() {
        let f = generate_fixture(PerturbationKind::ConvexityCase1, 4);
        let r = verify_perturbation(&f.net, &f.data().unwrap(), &f.case, 1.0).unwrap();
        assert!(r.vacuous && !r.pass);
        assert_eq!(r.r1_before, 0.0);
        assert_eq!(r.r1_after, 0.0);
    }

    #[test]
    fn lemma_p_one_is_exact() {
        let (params, data) = flatness_fixture(2);
        let r = verify_lemma1(&params, &data, 1.0, LemmaMode::Exhaustive).unwrap();
        assert_eq!(r.observed, r.expected);
        assert!(r.pass);
    }

    #[test]
    fn flatness_vacuous_when_all_inactive() {
        let (mut params, data) = flatness_fixture(3);
        params.layers[0].weight.fill(0.0);
        let mut zero = data.clone();
        zero.targets.fill(0.0);
        let r = verify_flatness_descent_on(&params, &zero, 0.8).unwrap();
        assert!(r.vacuous);
        assert!(r.steps.iter().all(|s| s.delta == 0.0));
    }

    #[test]
    fn flatness_descends() {
        let r = verify_flatness_descent(11).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
