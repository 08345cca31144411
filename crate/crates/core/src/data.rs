//! Datasets: synthetic 1-D targets, teacher-student generators and MNIST
//! (IDX) ingestion.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::{init_params, predict, Activation, InitScheme, NetworkShape, ParamSet};
use crate::scalar::Scalar;

/// Samples `S = {(x_i, y_i)}` stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    /// `n × d`.
    pub inputs: Array2<T>,
    /// `n × d'`.
    pub targets: Array2<T>,
    pub provenance: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Array2<T>, targets: Array2<T>, provenance: impl Into<String>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(LabError::config("dataset", "dataset is empty"));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(LabError::dim("dataset targets", inputs.nrows(), targets.nrows()));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("dataset".into()));
        }
        Ok(Dataset {
            inputs,
            targets,
            provenance: provenance.into(),
        })
    }

    /// Scalar-input, scalar-target dataset.
    pub fn from_1d(xs: &[T], ys: &[T], provenance: impl Into<String>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(LabError::dim("1-D dataset", xs.len(), ys.len()));
        }
        let n = xs.len();
        let inputs = Array2::from_shape_vec((n, 1), xs.to_vec()).expect("n x 1");
        let targets = Array2::from_shape_vec((n, 1), ys.to_vec()).expect("n x 1");
        Self::new(inputs, targets, provenance)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// Rows `indices` as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.inputs.select(Axis(0), indices),
            self.targets.select(Axis(0), indices),
            format!("{}[subset of {}]", self.provenance, indices.len()),
        )
    }

    /// The first column of the inputs, for 1-D datasets.
    pub fn xs(&self) -> ArrayView1<'_, T> {
        self.inputs.column(0)
    }

    /// True when the 1-D inputs are strictly increasing.
    pub fn is_sorted_1d(&self) -> bool {
        self.input_dim() == 1 && self.xs().windows(2).into_iter().all(|w| w[0] < w[1])
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            inputs: self.inputs.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())),
            targets: self.targets.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())),
            provenance: self.provenance.clone(),
        }
    }

    /// CSV with header `x0..x{d-1},y0..y{d'-1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.input_dim())
            .map(|i| format!("x{i}"))
            .chain((0..self.target_dim()).map(|i| format!("y{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (x, y) in self.inputs.rows().into_iter().zip(self.targets.rows()) {
            let row: Vec<String> = x.iter().chain(y.iter()).map(|v| format!("{v}")).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// How 1-D inputs are placed on the range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    /// Evenly spaced, endpoints included.
    Grid,
    /// Seeded uniform draws, sorted.
    Uniform { seed: u64 },
}

fn one_d_inputs(n: usize, range: (f64, f64), sampling: Sampling) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(LabError::config("n", format!("need at least 2 points, got {n}")));
    }
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(LabError::config("x_range", format!("empty range [{lo}, {hi}]")));
    }
    let xs = match sampling {
        Sampling::Grid => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
        Sampling::Uniform { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            xs.dedup();
            if xs.len() != n {
                return Err(LabError::config("x_range", "duplicate uniform draws"));
            }
            xs
        }
    };
    Ok(xs)
}

/// `y = ½ ReLU(-x - ⅓) + ½ ReLU(x - ⅓)`.
pub fn relu_target(x: f64) -> f64 {
    0.5 * (-x - 1.0 / 3.0).max(0.0) + 0.5 * (x - 1.0 / 3.0).max(0.0)
}

/// `y = tanh(x - 6) + tanh(x + 6)`.
pub fn tanh_target(x: f64) -> f64 {
    (x - 6.0).tanh() + (x + 6.0).tanh()
}

pub fn synth_relu_target<T: Scalar>(n: usize, x_range: (f64, f64), sampling: Sampling) -> Result<Dataset<T>> {
    synth_1d(n, x_range, sampling, relu_target, "relu_target")
}

pub fn synth_tanh_target<T: Scalar>(n: usize, x_range: (f64, f64), sampling: Sampling) -> Result<Dataset<T>> {
    synth_1d(n, x_range, sampling, tanh_target, "tanh_target")
}

fn synth_1d<T: Scalar>(
    n: usize,
    x_range: (f64, f64),
    sampling: Sampling,
    target: fn(f64) -> f64,
    name: &str,
) -> Result<Dataset<T>> {
    let xs = one_d_inputs(n, x_range, sampling)?;
    let ys: Vec<T> = xs.iter().map(|&x| T::from_f64_lossy(target(x))).collect();
    let xs: Vec<T> = xs.into_iter().map(T::from_f64_lossy).collect();
    Dataset::from_1d(
        &xs,
        &ys,
        format!("{name}(n={n}, range=[{}, {}], {sampling:?})", x_range.0, x_range.1),
    )
}

/// Standard-Gaussian inputs labelled by `teacher`.
pub fn teacher_dataset<T: Scalar>(teacher: &ParamSet<T>, n: usize, seed: u64) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(LabError::config("n", "dataset is empty"));
    }
    let d = teacher.shape.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array2::from_shape_simple_fn((n, d), || {
        T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))
    });
    let targets = predict(teacher, inputs.view(), None)?;
    Dataset::new(inputs, targets, format!("teacher(n={n}, seed={seed})"))
}

/// Two-layer tanh teacher `d - teacher_width - 1` drawn from `teacher_init`,
/// and `n` samples labelled by it.
pub fn teacher_student<T: Scalar>(
    d: usize,
    teacher_width: usize,
    n: usize,
    seed: u64,
    teacher_init: &InitScheme,
) -> Result<(Dataset<T>, ParamSet<T>)> {
    if teacher_width == 0 {
        return Err(LabError::config("teacher_width", "must be at least 1"));
    }
    let shape = NetworkShape::new(vec![d, teacher_width, 1], Activation::Tanh)?;
    let teacher = init_params(&shape, teacher_init)?;
    let data = teacher_dataset(&teacher, n, seed)?;
    Ok((data, teacher))
}

/// Teacher `x ↦ tanh(Σ x_i)`: one neuron with unit weights and zero biases.
pub fn sum_tanh_teacher<T: Scalar>(d: usize) -> Result<ParamSet<T>> {
    let shape = NetworkShape::new(vec![d, 1, 1], Activation::Tanh)?;
    let mut teacher = ParamSet::zeros(&shape);
    teacher.layers[0].weight.fill(T::one());
    teacher.layers[1].weight.fill(T::one());
    Ok(teacher)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LabError::Format(format!("{what}: truncated header")))
}

/// Parses an IDX3 image file, returning `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(LabError::Format(format!(
            "images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let payload = &bytes[16..];
    let needed = count * rows * cols;
    if payload.len() < needed {
        return Err(LabError::Format(format!(
            "images: truncated payload, {} of {needed} bytes",
            payload.len()
        )));
    }
    Ok((count, rows, cols, &payload[..needed]))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(LabError::Format(format!(
            "labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(LabError::Format(format!(
            "labels: truncated payload, {} of {count} bytes",
            payload.len()
        )));
    }
    Ok(&payload[..count])
}

/// Encodes images as an IDX3 file.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from the first `count` IDX records: pixels scaled to
/// `[0, 1]`, labels one-hot over 10 classes.
pub fn mnist_from_idx_bytes<T: Scalar>(images: &[u8], labels: &[u8], count: usize) -> Result<Dataset<T>> {
    if count == 0 {
        return Err(LabError::config("count", "dataset is empty"));
    }
    let (n_images, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if n_images != labels.len() {
        return Err(LabError::Format(format!(
            "{n_images} images but {} labels",
            labels.len()
        )));
    }
    if count > n_images {
        return Err(LabError::config(
            "count",
            format!("requested {count} records, file holds {n_images}"),
        ));
    }
    let dim = rows * cols;
    let scale = T::from_f64_lossy(1.0 / 255.0);
    let inputs = Array2::from_shape_fn((count, dim), |(i, j)| {
        T::from_f64_lossy(pixels[i * dim + j] as f64) * scale
    });
    let mut targets = Array2::zeros((count, 10));
    for (i, &label) in labels[..count].iter().enumerate() {
        if label > 9 {
            return Err(LabError::Format(format!("label {label} at record {i} exceeds 9")));
        }
        targets[[i, label as usize]] = T::one();
    }
    Dataset::new(inputs, targets, format!("mnist(first {count} records)"))
}

pub fn load_mnist_idx<T: Scalar>(images_path: &Path, labels_path: &Path, count: usize) -> Result<Dataset<T>> {
    let images = std::fs::read(images_path)
        .map_err(|e| LabError::io(images_path.display().to_string(), e))?;
    let labels = std::fs::read(labels_path)
        .map_err(|e| LabError::io(labels_path.display().to_string(), e))?;
    let mut data = mnist_from_idx_bytes(&images, &labels, count)?;
    data.provenance = format!(
        "mnist({}, first {count}, {} image bytes)",
        images_path.display(),
        images.len()
    );
    Ok(data)
}

/// Index of the largest entry of every row (first on ties).
pub fn argmax_rows<T: Scalar>(m: &Array2<T>) -> Array1<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_target_values() {
        let d: Dataset<f64> = synth_relu_target(21, (-1.0, 1.0), Sampling::Grid).unwrap();
        assert_eq!(relu_target(0.0), 0.0);
        assert!((relu_target(1.0) - 1.0 / 3.0).abs() < 1e-15);
        let n = d.len();
        for i in 0..n {
            assert!((d.targets[[i, 0]] - d.targets[[n - 1 - i, 0]]).abs() < 1e-15);
        }
        assert!(d.is_sorted_1d());
    }

    #[test]
    fn tanh_target_values() {
        assert_eq!(tanh_target(0.0), 0.0);
        assert!((tanh_target(20.0) - 2.0).abs() < 1e-9);
        let d: Dataset<f64> = synth_tanh_target(20, (-12.0, 12.0), Sampling::Grid).unwrap();
        let n = d.len();
        for i in 0..n {
            assert!((d.targets[[i, 0]] + d.targets[[n - 1 - i, 0]]).abs() < 1e-14);
        }
    }

    #[test]
    fn synthetic_errors_and_uniform_sampling() {
        assert!(synth_relu_target::<f64>(1, (-1.0, 1.0), Sampling::Grid).is_err());
        assert!(synth_relu_target::<f64>(5, (1.0, 1.0), Sampling::Grid).is_err());
        let a: Dataset<f64> = synth_tanh_target(30, (-12.0, 12.0), Sampling::Uniform { seed: 4 }).unwrap();
        let b: Dataset<f64> = synth_tanh_target(30, (-12.0, 12.0), Sampling::Uniform { seed: 4 }).unwrap();
        assert_eq!(a, b);
        assert!(a.is_sorted_1d());
    }

    #[test]
    fn sum_teacher_matches_formula() {
        let teacher = sum_tanh_teacher::<f64>(10).unwrap();
        let data = teacher_dataset(&teacher, 30, 2).unwrap();
        for (x, y) in data.inputs.rows().into_iter().zip(data.targets.rows()) {
            assert!((y[0] - x.sum().tanh()).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_teacher_gives_zero_targets() {
        let shape = NetworkShape::new(vec![4, 2, 1], Activation::Tanh).unwrap();
        let teacher = ParamSet::<f64>::zeros(&shape);
        let data = teacher_dataset(&teacher, 10, 1).unwrap();
        assert!(data.targets.iter().all(|&v| v == 0.0));
    }

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut pixels = vec![0u8; 2 * 4];
        pixels[0] = 255;
        pixels[3] = 51;
        pixels[5] = 102;
        (encode_idx_images(2, 2, &pixels), encode_idx_labels(&[7, 0]))
    }

    #[test]
    fn idx_fixture_parses_exactly() {
        let (images, labels) = fixture();
        assert_eq!(&images[..4], &[0, 0, 8, 3]);
        let data: Dataset<f64> = mnist_from_idx_bytes(&images, &labels, 2).unwrap();
        assert_eq!(data.inputs.row(0).to_vec(), vec![1.0, 0.0, 0.0, 0.2]);
        assert_eq!(data.inputs.row(1).to_vec(), vec![0.0, 0.4, 0.0, 0.0]);
        assert_eq!(data.targets[[0, 7]], 1.0);
        assert_eq!(data.targets[[1, 0]], 1.0);
        assert_eq!(data.targets.sum(), 2.0);
    }

    #[test]
    fn idx_errors() {
        let (images, labels) = fixture();
        assert!(mnist_from_idx_bytes::<f64>(&images, &labels, 0).is_err());
        assert!(mnist_from_idx_bytes::<f64>(&images, &labels, 3).is_err());
        assert!(mnist_from_idx_bytes::<f64>(&labels, &images, 1).is_err());
        assert!(mnist_from_idx_bytes::<f64>(&images[..images.len() - 1], &labels, 1).is_err());
        let mut bad = images.clone();
        bad[3] = 4;
        assert!(matches!(
            mnist_from_idx_bytes::<f64>(&bad, &labels, 1),
            Err(LabError::Format(_))
        ));
        let missing = load_mnist_idx::<f64>(Path::new("/nonexistent/a"), Path::new("/nonexistent/b"), 1);
        assert!(matches!(missing, Err(LabError::Io { .. })));
    }

    #[test]
    fn csv_export_header() {
        let d: Dataset<f64> = Dataset::from_1d(&[1.0, 2.0], &[3.0, 4.0], "t").unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x0,y0\n1,3\n2,4\n");
    }
}
