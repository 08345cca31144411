//! Dropout noise `η` and Monte Carlo expectations over it.
//!
//! Each coordinate of `η` is `(1 - p)/p` with probability `p` (keep) and `-1`
//! otherwise, so `E[η] = 0` and `E[η²] = (1 - p)/p`. Activations at a site are
//! multiplied by `1 + η ∈ {1/p, 0}`; a mask is one realization shared by all
//! samples of a batch.

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::{forward_masked, ForwardTrace, NetworkShape, ParamSet};
use crate::scalar::Scalar;

/// Keep probability and the layers after which a mask is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    /// Keep probability `p ∈ (0, 1]`.
    pub p: f64,
    /// Hidden layer indices `l` with `1 <= l <= L-1`.
    pub sites: Vec<usize>,
}

impl DropoutConfig {
    pub fn new(p: f64, sites: Vec<usize>) -> Result<Self> {
        check_keep_probability(p)?;
        Ok(DropoutConfig { p, sites })
    }

    /// A single site after the last hidden layer.
    pub fn last_hidden(p: f64, shape: &NetworkShape) -> Result<Self> {
        Self::new(p, vec![shape.depth() - 1])
    }

    /// Every hidden layer.
    pub fn all_hidden(p: f64, shape: &NetworkShape) -> Result<Self> {
        Self::new(p, (1..shape.depth()).collect())
    }

    pub fn validate(&self, shape: &NetworkShape) -> Result<()> {
        check_keep_probability(self.p)?;
        if self.sites.is_empty() {
            return Err(LabError::config("dropout.sites", "no dropout site given"));
        }
        for &l in &self.sites {
            if l == 0 || l >= shape.depth() {
                return Err(LabError::config(
                    "dropout.sites",
                    format!("site {l} outside 1..={}", shape.depth() - 1),
                ));
            }
        }
        let mut sorted = self.sites.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.sites.len() {
            return Err(LabError::config("dropout.sites", "duplicate site"));
        }
        Ok(())
    }

    /// True for the single-site layout after the last hidden layer.
    pub fn is_last_hidden_only(&self, shape: &NetworkShape) -> bool {
        self.sites == [shape.depth() - 1]
    }

    /// `(1 - p)/p`, the value of a kept coordinate of `η`.
    pub fn kept_eta(&self) -> f64 {
        (1.0 - self.p) / self.p
    }
}

pub(crate) fn check_keep_probability(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(LabError::config(
            "dropout.p",
            format!("keep probability must lie in (0, 1], got {p}"),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSite<T> {
    pub layer: usize,
    pub eta: Array1<T>,
    /// `1 + η`.
    pub scale: Array1<T>,
}

/// One realization of `η` for every site.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T> {
    pub p: f64,
    pub sites: Vec<MaskSite<T>>,
    /// `(seed, stream)` that produced the mask, when sampled.
    pub origin: Option<(u64, u64)>,
}

impl<T: Scalar> DropoutMask<T> {
    /// Builds a mask from keep flags per site (`true` keeps the neuron).
    pub fn from_keep(p: f64, sites: &[(usize, Vec<bool>)]) -> Result<Self> {
        check_keep_probability(p)?;
        let kept = T::from_f64_lossy((1.0 - p) / p);
        let dropped = -T::one();
        let sites = sites
            .iter()
            .map(|(layer, keep)| {
                let eta: Array1<T> = keep
                    .iter()
                    .map(|&k| if k { kept } else { dropped })
                    .collect();
                MaskSite {
                    layer: *layer,
                    scale: eta.mapv(|e| T::one() + e),
                    eta,
                }
            })
            .collect();
        Ok(DropoutMask {
            p,
            sites,
            origin: None,
        })
    }

    /// All-keep mask; with `p = 1` it is the zero-noise mask.
    pub fn keep_all(cfg: &DropoutConfig, shape: &NetworkShape) -> Result<Self> {
        cfg.validate(shape)?;
        let sites: Vec<(usize, Vec<bool>)> = cfg
            .sites
            .iter()
            .map(|&l| (l, vec![true; shape.width(l)]))
            .collect();
        Self::from_keep(cfg.p, &sites)
    }

    /// `1 + η` at layer `l`, if `l` is a site.
    pub fn scale_at(&self, l: usize) -> Option<&Array1<T>> {
        self.sites.iter().find(|s| s.layer == l).map(|s| &s.scale)
    }

    pub fn eta_at(&self, l: usize) -> Option<ArrayView1<'_, T>> {
        self.sites.iter().find(|s| s.layer == l).map(|s| s.eta.view())
    }

    pub fn check_shape(&self, shape: &NetworkShape) -> Result<()> {
        for site in &self.sites {
            if site.layer == 0 || site.layer >= shape.depth() {
                return Err(LabError::Mask(format!(
                    "site {} outside hidden layers 1..={}",
                    site.layer,
                    shape.depth() - 1
                )));
            }
            if site.eta.len() != shape.width(site.layer) {
                return Err(LabError::Mask(format!(
                    "site {} has {} entries, layer width is {}",
                    site.layer,
                    site.eta.len(),
                    shape.width(site.layer)
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.layer).collect()
    }
}

/// Draws a mask with i.i.d. coordinates from `rng`.
pub fn sample_mask<T: Scalar, R: Rng + ?Sized>(
    cfg: &DropoutConfig,
    shape: &NetworkShape,
    rng: &mut R,
) -> Result<DropoutMask<T>> {
    cfg.validate(shape)?;
    let sites: Vec<(usize, Vec<bool>)> = cfg
        .sites
        .iter()
        .map(|&l| {
            let keep = (0..shape.width(l))
                .map(|_| rng.random::<f64>() < cfg.p)
                .collect();
            (l, keep)
        })
        .collect();
    DropoutMask::from_keep(cfg.p, &sites)
}

/// Independent RNG stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mask drawn from stream `stream` of `seed`; reproducible and independent
/// of any other stream.
pub fn sample_mask_seeded<T: Scalar>(
    cfg: &DropoutConfig,
    shape: &NetworkShape,
    seed: u64,
    stream: u64,
) -> Result<DropoutMask<T>> {
    let mut rng = stream_rng(seed, stream);
    let mut mask = sample_mask(cfg, shape, &mut rng)?;
    mask.origin = Some((seed, stream));
    Ok(mask)
}

/// Forward pass with the mask applied at its sites.
pub fn dropout_forward<T: Scalar>(
    params: &ParamSet<T>,
    x: ArrayView1<T>,
    mask: &DropoutMask<T>,
) -> Result<ForwardTrace<T>> {
    forward_masked(params, x, Some(mask))
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(LabError::config("n_samples", "need at least 2 samples"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        Ok(McEstimate {
            mean,
            std_error: (var / n as f64).sqrt(),
            samples: n,
        })
    }

    /// `|mean - target| <= k · std_error`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }
}

/// Monte Carlo mean of `statistic` over `n_samples` masks; sample `i` uses
/// stream `i` of `seed`, so the result does not depend on evaluation order.
pub fn mc_expect<T, F>(
    statistic: F,
    cfg: &DropoutConfig,
    shape: &NetworkShape,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate>
where
    T: Scalar,
    F: Fn(&DropoutMask<T>) -> Result<f64> + Sync,
{
    if n_samples < 2 {
        return Err(LabError::config("n_samples", "need at least 2 samples"));
    }
    cfg.validate(shape)?;
    let values = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mask = sample_mask_seeded::<T>(cfg, shape, seed, i)?;
            statistic(&mask)
        })
        .collect::<Result<Vec<f64>>>()?;
    McEstimate::from_values(&values)
}

/// Every keep pattern of a single site of width `m` with its probability
/// `p^k (1-p)^(m-k)`. Intended for small `m`.
pub fn enumerate_masks<T: Scalar>(
    p: f64,
    layer: usize,
    width: usize,
) -> Result<Vec<(f64, DropoutMask<T>)>> {
    check_keep_probability(p)?;
    if width > 24 {
        return Err(LabError::config(
            "width",
            format!("exhaustive enumeration limited to width 24, got {width}"),
        ));
    }
    (0..1u64 << width)
        .map(|bits| {
            let keep: Vec<bool> = (0..width).map(|j| bits >> j & 1 == 1).collect();
            let k = keep.iter().filter(|&&b| b).count() as i32;
            let weight = p.powi(k) * (1.0 - p).powi(width as i32 - k);
            DropoutMask::from_keep(p, &[(layer, keep)]).map(|m| (weight, m))
        })
        .collect()
}
