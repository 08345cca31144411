//! Fully-connected networks: shape, parameters, initialization and forward
//! evaluation.
//!
//! Layer `l` (1-based, `l = 1..=L`) maps `f^[l-1]` to
//! `f^[l] = σ(W^[l] f^[l-1] + b^[l])`; the last layer is affine. An optional
//! linear skip `A x + c` is added to the output.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dropout::DropoutMask;
use crate::error::{LabError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    z
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// σ'(z). ReLU'(0) is 0.
    #[inline]
    pub fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
        }
    }

    #[inline]
    pub fn second_derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => T::zero(),
            Activation::Tanh => {
                let t = z.tanh();
                let two = T::one() + T::one();
                -two * t * (T::one() - t * t)
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            other => Err(LabError::Format(format!("unknown activation code {other}"))),
        }
    }
}

fn default_true() -> bool {
    true
}

/// Layer widths `m_0 = d, …, m_L = d'` plus activation and structural flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkShape {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    /// Adds a trainable `A x + c` term to the output.
    #[serde(default)]
    pub linear_skip: bool,
    /// When false, no layer carries a bias vector.
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl NetworkShape {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let shape = NetworkShape {
            layer_widths,
            activation,
            linear_skip: false,
            bias: true,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn with_skip(mut self) -> Self {
        self.linear_skip = true;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(LabError::config(
                "layer_widths",
                format!(
                    "need at least 3 widths (L >= 2), got {}",
                    self.layer_widths.len()
                ),
            ));
        }
        if let Some(pos) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(LabError::config(
                "layer_widths",
                format!("width at position {pos} is zero"),
            ));
        }
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated shape")
    }

    /// Width `m_l`.
    pub fn width(&self, l: usize) -> usize {
        self.layer_widths[l]
    }

    pub fn num_params(&self) -> usize {
        let mut total = 0;
        for l in 1..=self.depth() {
            total += self.layer_widths[l] * self.layer_widths[l - 1];
            if self.bias {
                total += self.layer_widths[l];
            }
        }
        if self.linear_skip {
            total += self.output_dim() * (self.input_dim() + 1);
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `m_l × m_{l-1}`.
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

/// The `A x + c` output term.
#[derive(Debug, Clone, PartialEq)]
pub struct Skip<T> {
    /// `d' × d`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// All trainable parameters of a network. Also used for gradients, Hessian
/// products and perturbation directions, which share its structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub shape: NetworkShape,
    /// `layers[l - 1]` holds `(W^[l], b^[l])`.
    pub layers: Vec<Layer<T>>,
    pub skip: Option<Skip<T>>,
}

pub type GradientSet<T> = ParamSet<T>;

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(shape: &NetworkShape) -> Self {
        let layers = (1..=shape.depth())
            .map(|l| Layer {
                weight: Array2::zeros((shape.width(l), shape.width(l - 1))),
                bias: shape.bias.then(|| Array1::zeros(shape.width(l))),
            })
            .collect();
        let skip = shape.linear_skip.then(|| Skip {
            weight: Array2::zeros((shape.output_dim(), shape.input_dim())),
            bias: Array1::zeros(shape.output_dim()),
        });
        ParamSet {
            shape: shape.clone(),
            layers,
            skip,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `W^[l]` for 1-based `l`.
    pub fn weight(&self, l: usize) -> &Array2<T> {
        &self.layers[l - 1].weight
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Parameter blocks in canonical order: per layer weight then bias, then
    /// skip weight and skip bias.
    pub fn blocks(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for layer in &self.layers {
            out.push(layer.weight.as_slice().expect("standard layout"));
            if let Some(b) = &layer.bias {
                out.push(b.as_slice().expect("standard layout"));
            }
        }
        if let Some(skip) = &self.skip {
            out.push(skip.weight.as_slice().expect("standard layout"));
            out.push(skip.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            if let Some(b) = &mut layer.bias {
                out.push(b.as_slice_mut().expect("standard layout"));
            }
        }
        if let Some(skip) = &mut self.skip {
            out.push(skip.weight.as_slice_mut().expect("standard layout"));
            out.push(skip.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for block in self.blocks() {
            out.extend_from_slice(block);
        }
        out
    }

    pub fn from_flat(shape: &NetworkShape, values: &[T]) -> Result<Self> {
        let mut params = ParamSet::zeros(shape);
        let expected = params.num_params();
        if values.len() != expected {
            return Err(LabError::dim("flat parameter vector", expected, values.len()));
        }
        let mut offset = 0;
        for block in params.blocks_mut() {
            let len = block.len();
            block.copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        Ok(params)
    }

    pub fn congruent(&self, other: &ParamSet<T>) -> bool {
        self.shape == other.shape
    }

    pub(crate) fn ensure_congruent(&self, other: &ParamSet<T>, context: &str) -> Result<()> {
        if self.congruent(other) {
            Ok(())
        } else {
            Err(LabError::dim(
                format!("{context}: parameter structure"),
                self.num_params(),
                other.num_params(),
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn dot(&self, other: &ParamSet<T>) -> T {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .map(|(a, b)| a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y))
            .fold(T::zero(), |acc, v| acc + v)
    }

    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &ParamSet<T>) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for block in self.blocks_mut() {
            for v in block.iter_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn scaled(&self, alpha: T) -> ParamSet<T> {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    /// `self + alpha * other` as a new set.
    pub fn added(&self, alpha: T, other: &ParamSet<T>) -> ParamSet<T> {
        let mut out = self.clone();
        out.axpy(alpha, other);
        out
    }

    pub fn zip_map(&self, other: &ParamSet<T>, f: impl Fn(T, T) -> T) -> ParamSet<T> {
        let mut out = self.clone();
        for (dst, src) in out.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = f(*d, s);
            }
        }
        out
    }

    pub fn max_abs(&self) -> T {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let flat: Vec<U> = self
            .to_flat()
            .into_iter()
            .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
            .collect();
        ParamSet::from_flat(&self.shape, &flat).expect("same shape")
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.layers.len() != self.shape.depth() {
            return Err(LabError::dim("layer count", self.shape.depth(), self.layers.len()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            let dims = (self.shape.width(l), self.shape.width(l - 1));
            if layer.weight.dim() != dims {
                return Err(LabError::dim(
                    format!("W^[{l}] entries"),
                    dims.0 * dims.1,
                    layer.weight.len(),
                ));
            }
            match (&layer.bias, self.shape.bias) {
                (Some(b), true) if b.len() == dims.0 => {}
                (None, false) => {}
                (b, _) => {
                    return Err(LabError::dim(
                        format!("b^[{l}] length"),
                        if self.shape.bias { dims.0 } else { 0 },
                        b.as_ref().map_or(0, |b| b.len()),
                    ))
                }
            }
        }
        match (&self.skip, self.shape.linear_skip) {
            (Some(s), true) => {
                let dims = (self.shape.output_dim(), self.shape.input_dim());
                if s.weight.dim() != dims || s.bias.len() != dims.0 {
                    return Err(LabError::dim("skip weight", dims.0 * dims.1, s.weight.len()));
                }
            }
            (None, false) => {}
            _ => {
                return Err(LabError::config(
                    "linear_skip",
                    "skip parameters do not match the shape flag",
                ))
            }
        }
        if !self.is_finite() {
            return Err(LabError::NonFinite("parameter set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitKind {
    /// Every entry i.i.d. `N(0, variance)`.
    GaussianVar { variance: f64 },
    /// Every entry i.i.d. `N(0, m^(-exponent))`, `m` the widest hidden layer.
    LinearRegime { exponent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: InitKind,
    pub seed: u64,
}

impl InitScheme {
    pub fn gaussian(variance: f64, seed: u64) -> Self {
        InitScheme {
            kind: InitKind::GaussianVar { variance },
            seed,
        }
    }

    pub fn linear_regime(exponent: f64, seed: u64) -> Self {
        InitScheme {
            kind: InitKind::LinearRegime { exponent },
            seed,
        }
    }

    pub fn variance(&self, shape: &NetworkShape) -> Result<f64> {
        let variance = match self.kind {
            InitKind::GaussianVar { variance } => variance,
            InitKind::LinearRegime { exponent } => {
                let hidden = &shape.layer_widths[1..shape.layer_widths.len() - 1];
                let m = hidden.iter().copied().max().unwrap_or(1) as f64;
                m.powf(-exponent)
            }
        };
        if !(variance.is_finite() && variance > 0.0) {
            return Err(LabError::config(
                "init.variance",
                format!("variance must be positive and finite, got {variance}"),
            ));
        }
        Ok(variance)
    }
}

/// Draws every weight and bias i.i.d. from the scheme's Gaussian; skip
/// parameters start at zero. Entries are drawn layer by layer, weight
/// (row-major) before bias.
pub fn init_params<T: Scalar>(shape: &NetworkShape, scheme: &InitScheme) -> Result<ParamSet<T>> {
    shape.validate()?;
    let variance = scheme.variance(shape)?;
    let normal = Normal::new(0.0, variance.sqrt())
        .map_err(|e| LabError::config("init.variance", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(scheme.seed);
    let mut params = ParamSet::zeros(shape);
    for layer in &mut params.layers {
        for w in layer.weight.iter_mut() {
            *w = T::from_f64_lossy(normal.sample(&mut rng));
        }
        if let Some(b) = &mut layer.bias {
            for v in b.iter_mut() {
                *v = T::from_f64_lossy(normal.sample(&mut rng));
            }
        }
    }
    Ok(params)
}

/// Post-activation vectors `f^[0] = x, …, f^[L-1]` followed by the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub activations: Vec<Array1<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn output(&self) -> &Array1<T> {
        self.activations.last().expect("non-empty trace")
    }

    /// `f^[l]` for `0 <= l <= L`.
    pub fn layer(&self, l: usize) -> &Array1<T> {
        &self.activations[l]
    }
}

pub fn forward<T: Scalar>(params: &ParamSet<T>, x: ArrayView1<T>) -> Result<ForwardTrace<T>> {
    forward_masked(params, x, None)
}

/// Single-input forward pass; a mask multiplies `f^[l]` by `(1 + η)` at each
/// of its sites before the next layer consumes it. The trace stores the
/// masked activations.
pub fn forward_masked<T: Scalar>(
    params: &ParamSet<T>,
    x: ArrayView1<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<ForwardTrace<T>> {
    if x.len() != params.shape.input_dim() {
        return Err(LabError::dim("forward input", params.shape.input_dim(), x.len()));
    }
    if let Some(m) = mask {
        m.check_shape(&params.shape)?;
    }
    let depth = params.depth();
    let act = params.shape.activation;
    let mut activations = Vec::with_capacity(depth + 1);
    activations.push(x.to_owned());
    for l in 1..=depth {
        let layer = &params.layers[l - 1];
        let mut z = layer.weight.dot(&activations[l - 1]);
        if let Some(b) = &layer.bias {
            z += b;
        }
        if l < depth {
            z.mapv_inplace(|v| act.apply(v));
            if let Some(scale) = mask.and_then(|m| m.scale_at(l)) {
                z *= scale;
            }
        } else if let Some(skip) = &params.skip {
            z += &skip.weight.dot(&x);
            z += &skip.bias;
        }
        activations.push(z);
    }
    Ok(ForwardTrace { activations })
}

/// `f^[l]_θ(x)` for `0 <= l <= L-1` (no dropout).
pub fn hidden_features<T: Scalar>(
    params: &ParamSet<T>,
    x: ArrayView1<T>,
    l: usize,
) -> Result<Array1<T>> {
    if l >= params.depth() {
        return Err(LabError::config(
            "layer",
            format!("layer index {l} out of range 0..={}", params.depth() - 1),
        ));
    }
    let trace = forward(params, x)?;
    Ok(trace.activations[l].clone())
}

/// Cached batch forward pass; rows are samples.
#[derive(Debug, Clone)]
pub(crate) struct BatchPass<T> {
    /// Pre-activations `Z_l`, index `l - 1`, for `l = 1..=L`.
    pub pre: Vec<Array2<T>>,
    /// Unmasked post-activations; index 0 is the input.
    pub post: Vec<Array2<T>>,
    /// Masked post-activations fed into the next layer (equal to `post` where
    /// no mask site exists).
    pub fed: Vec<Array2<T>>,
    pub output: Array2<T>,
}

pub(crate) fn batch_forward<T: Scalar>(
    params: &ParamSet<T>,
    inputs: ArrayView2<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<BatchPass<T>> {
    if inputs.ncols() != params.shape.input_dim() {
        return Err(LabError::dim(
            "batch input columns",
            params.shape.input_dim(),
            inputs.ncols(),
        ));
    }
    if let Some(m) = mask {
        m.check_shape(&params.shape)?;
    }
    let depth = params.depth();
    let act = params.shape.activation;
    let mut pre = Vec::with_capacity(depth);
    let mut post = Vec::with_capacity(depth);
    let mut fed = Vec::with_capacity(depth);
    post.push(inputs.to_owned());
    fed.push(inputs.to_owned());
    let mut output = None;
    for l in 1..=depth {
        let layer = &params.layers[l - 1];
        let mut z = fed[l - 1].dot(&layer.weight.t());
        if let Some(b) = &layer.bias {
            z += b;
        }
        if l < depth {
            let a = z.mapv(|v| act.apply(v));
            let a_fed = match mask.and_then(|m| m.scale_at(l)) {
                Some(scale) => &a * scale,
                None => a.clone(),
            };
            pre.push(z);
            post.push(a);
            fed.push(a_fed);
        } else {
            let mut out = z.clone();
            if let Some(skip) = &params.skip {
                out += &inputs.dot(&skip.weight.t());
                out += &skip.bias;
            }
            pre.push(z);
            output = Some(out);
        }
    }
    Ok(BatchPass {
        pre,
        post,
        fed,
        output: output.expect("depth >= 2"),
    })
}

/// Pre-activations `Z_l` of every layer for a batch, `l = 1..=L`.
pub fn batch_pre_activations<T: Scalar>(
    params: &ParamSet<T>,
    inputs: ArrayView2<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<Vec<Array2<T>>> {
    Ok(batch_forward(params, inputs, mask)?.pre)
}

/// Network outputs for every row of `inputs`.
pub fn predict<T: Scalar>(
    params: &ParamSet<T>,
    inputs: ArrayView2<T>,
    mask: Option<&DropoutMask<T>>,
) -> Result<Array2<T>> {
    Ok(batch_forward(params, inputs, mask)?.output)
}

/// Hidden activations `f^[l]` for every row of `inputs` (no dropout).
pub fn hidden_batch<T: Scalar>(
    params: &ParamSet<T>,
    inputs: ArrayView2<T>,
    l: usize,
) -> Result<Array2<T>> {
    if l >= params.depth() {
        return Err(LabError::config(
            "layer",
            format!("layer index {l} out of range 0..={}", params.depth() - 1),
        ));
    }
    let mut pass = batch_forward(params, inputs, None)?;
    Ok(pass.post.swap_remove(l))
}

// Parameter dump layout (all integers little-endian):
//   magic "DLPS" | version u32 = 1 | scalar tag u8 (4 = f32, 8 = f64)
//   | activation u8 (0 relu, 1 tanh) | flags u8 (bit0 skip, bit1 bias) | 0u8
//   | L+1 as u32 | widths as u32 ...
//   | per layer: W^[l] row-major, then b^[l] if bias
//   | skip weight row-major, skip bias (if skip)
// Values are IEEE-754 little-endian of the scalar width, so a dump
// round-trips bit-exactly.
const MAGIC: &[u8; 4] = b"DLPS";
const DUMP_VERSION: u32 = 1;

impl<T: Scalar> ParamSet<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.num_params() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.push(T::TAG);
        out.push(self.shape.activation.code());
        let flags = u8::from(self.shape.linear_skip) | (u8::from(self.shape.bias) << 1);
        out.push(flags);
        out.push(0);
        out.extend_from_slice(&(self.shape.layer_widths.len() as u32).to_le_bytes());
        for &w in &self.shape.layer_widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for block in self.blocks() {
            for &v in block {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| LabError::Format(format!("parameter dump: {msg}"));
        let read_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| fail("truncated header"))
        };
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(fail("bad magic"));
        }
        if read_u32(4)? != DUMP_VERSION {
            return Err(fail("unsupported version"));
        }
        if bytes[8] != T::TAG {
            return Err(fail(&format!(
                "scalar width {} does not match requested {}",
                bytes[8],
                T::TAG
            )));
        }
        let activation = Activation::from_code(bytes[9])?;
        let flags = bytes[10];
        let count = read_u32(12)? as usize;
        let mut widths = Vec::with_capacity(count);
        for i in 0..count {
            widths.push(read_u32(16 + 4 * i)? as usize);
        }
        let shape = NetworkShape {
            layer_widths: widths,
            activation,
            linear_skip: flags & 1 != 0,
            bias: flags & 2 != 0,
        };
        shape.validate()?;
        let header = 16 + 4 * count;
        let n = shape.num_params();
        let payload = &bytes[header..];
        if payload.len() != n * T::BYTES {
            return Err(fail(&format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                n * T::BYTES
            )));
        }
        let values: Vec<T> = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        ParamSet::from_flat(&shape, &values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| LabError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Sum over rows of a matrix.
pub(crate) fn col_sums<T: Scalar>(m: &Array2<T>) -> Array1<T> {
    m.sum_axis(Axis(0))
}
