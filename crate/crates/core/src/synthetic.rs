//! Ground-truth test beds.
//!
//! * Quadratic task suites with exact Hessians: the loss is exactly
//!   `1/2 (θ - θ_t)^T H (θ - θ_t) + c_t`, so the excess-loss identities hold with
//!   no Taylor remainder.
//! * Small two-layer classifiers on Gaussian-blob tasks for end-to-end
//!   merging experiments.

use std::collections::BTreeMap;

use nalgebra::linalg::QR;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::checkpoint::{task_vector, DType, ParameterSet, TaskVector, Tensor};
use crate::curvature::{CurvatureEstimate, CurvatureSource};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::subspace::{LayerBasis, ProjectedHessians, TaggedBasis};

/// splitmix64 step; decorrelates seeds derived from one user seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Quadratic tasks
// ---------------------------------------------------------------------------

/// Exact curvature of one layer, indexed by the row-major vec of the layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerHessian {
    Diagonal(Vec<f64>),
    Dense(Matrix),
}

impl LayerHessian {
    /// `x^T H x`.
    pub fn quad(&self, x: &[f64]) -> f64 {
        match self {
            LayerHessian::Diagonal(h) => h.iter().zip(x).map(|(h, x)| h * x * x).sum(),
            LayerHessian::Dense(h) => {
                let v = Vector::from_column_slice(x);
                v.dot(&(h * &v))
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            LayerHessian::Diagonal(h) => h.iter().zip(x).map(|(h, x)| h * x).collect(),
            LayerHessian::Dense(h) => (h * Vector::from_column_slice(x)).as_slice().to_vec(),
        }
    }

    /// `S^T H S` on one basis layer.
    pub fn restrict(&self, layer: &LayerBasis) -> Matrix {
        match self {
            LayerHessian::Diagonal(h) => {
                let (rows, cols) = layer.layer_shape();
                layer.restrict_diagonal(&Matrix::from_row_slice(rows, cols, h))
            }
            LayerHessian::Dense(h) => layer.restrict_dense(h),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LayerHessian::Diagonal(h) => h.len(),
            LayerHessian::Dense(h) => h.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    pub optimum: ParameterSet,
    pub hessian: BTreeMap<String, LayerHessian>,
    pub floor: f64,
}

impl QuadraticTask {
    fn check(&self, theta: &ParameterSet) -> Result<()> {
        for (name, t) in theta.iter() {
            let h = self
                .hessian
                .get(name)
                .ok_or_else(|| Error::misaligned(format!("no Hessian for layer `{name}`")))?;
            if h.len() != t.numel() {
                return Err(Error::misaligned(format!("Hessian size for layer `{name}`")));
            }
        }
        theta.check_aligned(&self.optimum)
    }

    /// `1/2 (θ - θ_t)^T H (θ - θ_t) + c_t`.
    pub fn loss(&self, theta: &ParameterSet) -> Result<f64> {
        self.check(theta)?;
        let d = task_vector(theta, &self.optimum)?;
        Ok(0.5 * self.quad(&d) + self.floor)
    }

    pub fn grad(&self, theta: &ParameterSet) -> Result<TaskVector> {
        self.check(theta)?;
        let d = task_vector(theta, &self.optimum)?;
        let mut out = d.clone();
        for (name, t) in d.iter() {
            let g = self.hessian[name].apply(t.data());
            out.set(name.to_string(), t.with_data(g));
        }
        Ok(out)
    }

    /// `x^T H x` summed over layers (missing layers of `x` count as zero).
    pub fn quad(&self, x: &ParameterSet) -> f64 {
        x.iter()
            .filter_map(|(name, t)| self.hessian.get(name).map(|h| h.quad(t.data())))
            .sum()
    }

    /// `S^T H S` per basis layer.
    pub fn projected_hessians(&self, basis: &TaggedBasis) -> Result<ProjectedHessians> {
        basis
            .layers()
            .map(|(name, lb)| {
                let h = self
                    .hessian
                    .get(name)
                    .ok_or_else(|| Error::misaligned(format!("no Hessian for layer `{name}`")))?;
                Ok((name.to_string(), h.restrict(lb)))
            })
            .collect()
    }

    /// The diagonal as a curvature estimate; `None` if any layer is dense.
    pub fn curvature(&self) -> Option<CurvatureEstimate> {
        let mut values = ParameterSet::new();
        for (name, t) in self.optimum.iter() {
            match self.hessian.get(name)? {
                LayerHessian::Diagonal(h) => values.set(name, t.with_data(h.clone())),
                LayerHessian::Dense(_) => return None,
            }
        }
        CurvatureEstimate::new(values, 0, CurvatureSource::ExactQuadratic).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSuite {
    pub base: ParameterSet,
    pub tasks: Vec<QuadraticTask>,
}

impl QuadraticSuite {
    pub fn deltas(&self) -> Vec<TaskVector> {
        self.tasks
            .iter()
            .map(|t| task_vector(&t.optimum, &self.base).expect("suite is aligned"))
            .collect()
    }

    pub fn models(&self) -> Vec<ParameterSet> {
        self.tasks.iter().map(|t| t.optimum.clone()).collect()
    }

    /// `sum_t lambda_t [L_t(θ) - L_t(θ_t)]`, evaluated from the losses.
    pub fn excess_loss(&self, theta: &ParameterSet, weights: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (t, &w) in self.tasks.iter().zip(weights) {
            total += w * (t.loss(theta)? - t.loss(&t.optimum)?);
        }
        Ok(total)
    }
}

fn layer_name(i: usize) -> String {
    format!("layer{i}")
}

fn check_dims(layer_dims: &[(usize, usize)], tasks: usize) -> Result<()> {
    if tasks == 0 {
        return Err(Error::invalid("at least one task is required"));
    }
    if layer_dims.is_empty() || layer_dims.iter().any(|&(r, c)| r == 0 || c == 0) {
        return Err(Error::invalid("layer dimensions must be positive"));
    }
    Ok(())
}

fn random_base(layer_dims: &[(usize, usize)], rng: &mut ChaCha8Rng) -> ParameterSet {
    layer_dims
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let data = (0..r * c).map(|_| normal(rng)).collect();
            (layer_name(i), Tensor::from_f64(vec![r, c], data))
        })
        .collect()
}

/// Diagonal `exp(h z)` with `z` standard normal per coordinate.
fn random_diag_hessian(
    layer_dims: &[(usize, usize)],
    heterogeneity: f64,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, LayerHessian> {
    layer_dims
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let h = (0..r * c).map(|_| (heterogeneity * normal(rng)).exp()).collect();
            (layer_name(i), LayerHessian::Diagonal(h))
        })
        .collect()
}

/// Random quadratic tasks sharing a basin around a common `θ_0`.
///
/// Task optima lie in the unit ball around `θ_0`; task Hessians are
/// diagonal `exp(h z)`, so `h = 0` gives every task the identity.
pub fn gen_quadratic_suite(
    seed: u64,
    layer_dims: &[(usize, usize)],
    tasks: usize,
    heterogeneity: f64,
) -> Result<QuadraticSuite> {
    check_dims(layer_dims, tasks)?;
    if !(0.0..=1.0).contains(&heterogeneity) {
        return Err(Error::invalid(format!("heterogeneity {heterogeneity} outside [0, 1]")));
    }
    let base = random_base(layer_dims, &mut rng_for(seed, 0));
    let m = base.numel();
    let tasks = (0..tasks)
        .map(|t| {
            let mut rng = rng_for(seed, 1 + t as u64);
            let dir: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let radius = rng.random::<f64>().powf(1.0 / m as f64);
            let delta: Vec<f64> = dir.iter().map(|x| x * radius / norm).collect();
            let delta = TaskVector::from_set(base.unflatten_like(&delta).expect("layout"));
            QuadraticTask {
                optimum: base.add_delta(&delta).expect("aligned"),
                hessian: random_diag_hessian(layer_dims, heterogeneity, &mut rng),
                floor: rng.random::<f64>(),
            }
        })
        .collect();
    Ok(QuadraticSuite { base, tasks })
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = Matrix::from_fn(rows, cols, |_, _| normal(rng));
    QR::new(g).q()
}

/// Like [`gen_quadratic_suite`] but every task vector is a sum of `k`
/// rank-one terms on factors that are orthonormal across all tasks, so the
/// rank-`k` tagged basis contains each task vector exactly (zero residual).
pub fn gen_in_subspace_suite(
    seed: u64,
    layer_dims: &[(usize, usize)],
    tasks: usize,
    k: usize,
    heterogeneity: f64,
) -> Result<QuadraticSuite> {
    check_dims(layer_dims, tasks)?;
    if k == 0 || layer_dims.iter().any(|&(r, c)| k * tasks > r.min(c)) {
        return Err(Error::invalid("k * tasks must fit every layer"));
    }
    let base = random_base(layer_dims, &mut rng_for(seed, 0));
    let mut frng = rng_for(seed, 0xFAC7);
    let factors: Vec<(Matrix, Matrix)> = layer_dims
        .iter()
        .map(|&(r, c)| {
            (
                random_orthonormal(r, k * tasks, &mut frng),
                random_orthonormal(c, k * tasks, &mut frng),
            )
        })
        .collect();
    let tasks = (0..tasks)
        .map(|t| {
            let mut rng = rng_for(seed, 1 + t as u64);
            let mut delta = ParameterSet::new();
            for (i, (u, v)) in factors.iter().enumerate() {
                let mut sig: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
                sig.sort_by(|a, b| b.total_cmp(a));
                let mut m = Matrix::zeros(u.nrows(), v.nrows());
                for (j, s) in sig.iter().enumerate() {
                    let col = t * k + j;
                    m += u.column(col) * v.column(col).transpose() * *s;
                }
                delta.set(layer_name(i), Tensor::from_matrix(DType::F64, &m));
            }
            let delta = TaskVector::from_set(delta);
            QuadraticTask {
                optimum: base.add_delta(&delta).expect("aligned"),
                hessian: random_diag_hessian(layer_dims, heterogeneity, &mut rng),
                floor: rng.random::<f64>(),
            }
        })
        .collect();
    Ok(QuadraticSuite { base, tasks })
}

// ---------------------------------------------------------------------------
// Two-layer classifier tasks
// ---------------------------------------------------------------------------

pub const W1: &str = "w1";
pub const B1: &str = "b1";
pub const W2: &str = "w2";
pub const B2: &str = "b2";

/// `inputs -> hidden (ReLU) -> classes (softmax)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpShape {
    pub fn from_params(theta: &ParameterSet) -> Result<Self> {
        let shape = |name: &str| {
            theta
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::misaligned(format!("classifier parameter `{name}` missing")))
        };
        let (w1, b1, w2, b2) = (shape(W1)?, shape(B1)?, shape(W2)?, shape(B2)?);
        let ok = theta.len() == 4
            && w1.len() == 2
            && w2.len() == 2
            && b1 == [w1[0]]
            && w2[1] == w1[0]
            && b2 == [w2[0]];
        if !ok {
            return Err(Error::misaligned(format!(
                "not a two-layer classifier: w1 {w1:?}, b1 {b1:?}, w2 {w2:?}, b2 {b2:?}"
            )));
        }
        Ok(MlpShape {
            inputs: w1[1],
            hidden: w1[0],
            classes: w2[0],
        })
    }

    pub fn num_params(&self) -> usize {
        self.hidden * self.inputs + self.hidden + self.classes * self.hidden + self.classes
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParameterSet {
        let mut gauss = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| s * normal(rng)).collect()
        };
        let w1 = gauss(self.hidden * self.inputs, self.inputs);
        let w2 = gauss(self.classes * self.hidden, self.hidden);
        ParameterSet::from_iter([
            (W1.to_string(), Tensor::from_f64(vec![self.hidden, self.inputs], w1)),
            (B1.to_string(), Tensor::from_f64(vec![self.hidden], vec![0.0; self.hidden])),
            (W2.to_string(), Tensor::from_f64(vec![self.classes, self.hidden], w2)),
            (B2.to_string(), Tensor::from_f64(vec![self.classes], vec![0.0; self.classes])),
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `len x dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            features: &self.features[i * self.dim..(i + 1) * self.dim],
            label: self.labels[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Sample<'_>> {
        (0..self.len()).map(|i| self.sample(i))
    }

    /// Stores features as a `len x dim` tensor and labels as a float vector.
    pub fn to_parameter_set(&self, prefix: &str) -> ParameterSet {
        ParameterSet::from_iter([
            (
                format!("{prefix}.features"),
                Tensor::from_f64(vec![self.len(), self.dim], self.features.clone()),
            ),
            (
                format!("{prefix}.labels"),
                Tensor::from_f64(vec![self.len()], self.labels.iter().map(|&l| l as f64).collect()),
            ),
        ])
    }

    pub fn from_parameter_set(set: &ParameterSet, prefix: &str) -> Result<Self> {
        let f = set
            .get(&format!("{prefix}.features"))
            .ok_or_else(|| Error::misaligned(format!("`{prefix}.features` missing")))?;
        let l = set
            .get(&format!("{prefix}.labels"))
            .ok_or_else(|| Error::misaligned(format!("`{prefix}.labels` missing")))?;
        match (f.shape(), l.shape()) {
            ([n, d], [m]) if n == m => {
                let labels = l
                    .data()
                    .iter()
                    .map(|&x| {
                        if x >= 0.0 && x.fract() == 0.0 {
                            Ok(x as usize)
                        } else {
                            Err(Error::invalid(format!("bad label {x}")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Dataset {
                    features: f.data().to_vec(),
                    labels,
                    dim: *d,
                })
            }
            _ => Err(Error::misaligned(format!("dataset `{prefix}` has inconsistent shapes"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpTask {
    pub id: usize,
    pub shape: MlpShape,
    /// `classes x inputs` blob centers.
    pub class_means: Vec<Vec<f64>>,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpSuiteConfig {
    pub seed: u64,
    pub tasks: usize,
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Samples per task before the train/test split.
    pub samples: usize,
    pub test_fraction: f64,
    /// Standard deviation of the blob centers.
    pub class_spread: f64,
    /// Within-blob standard deviation.
    pub noise: f64,
}

impl Default for MlpSuiteConfig {
    fn default() -> Self {
        MlpSuiteConfig {
            seed: 0,
            tasks: 4,
            inputs: 16,
            hidden: 16,
            classes: 8,
            samples: 2000,
            test_fraction: 0.2,
            class_spread: 1.0,
            noise: 1.0,
        }
    }
}

fn blob_dataset(
    means: &[Vec<f64>],
    n: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let classes = means.len();
    let dim = means[0].len();
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let mut features = Vec::with_capacity(n * dim);
    for &l in &labels {
        for mu in &means[l] {
            features.push(mu + noise * normal(rng));
        }
    }
    Dataset {
        features,
        labels,
        dim,
    }
}

/// Shared initial parameters and `T` Gaussian-blob classification tasks.
pub fn gen_mlp_tasks(cfg: &MlpSuiteConfig) -> Result<(ParameterSet, Vec<MlpTask>)> {
    if cfg.samples == 0 || cfg.tasks == 0 || cfg.inputs == 0 || cfg.hidden == 0 || cfg.classes < 2 {
        return Err(Error::invalid(
            "samples, tasks, inputs and hidden must be positive and classes >= 2",
        ));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::invalid("test fraction must lie in (0, 1)"));
    }
    let shape = MlpShape {
        inputs: cfg.inputs,
        hidden: cfg.hidden,
        classes: cfg.classes,
    };
    let base = shape.init(&mut rng_for(cfg.seed, 0));
    let n_test = ((cfg.samples as f64 * cfg.test_fraction).round() as usize).clamp(1, cfg.samples);
    let n_train = cfg.samples - n_test;
    if n_train == 0 {
        return Err(Error::invalid("no training samples left after the split"));
    }
    let tasks = (0..cfg.tasks)
        .map(|t| {
            let mut rng = rng_for(cfg.seed.wrapping_add(t as u64), 1 + t as u64);
            let class_means: Vec<Vec<f64>> = (0..cfg.classes)
                .map(|_| (0..cfg.inputs).map(|_| cfg.class_spread * normal(&mut rng)).collect())
                .collect();
            let train = blob_dataset(&class_means, n_train, cfg.noise, &mut rng);
            let test = blob_dataset(&class_means, n_test, cfg.noise, &mut rng);
            MlpTask {
                id: t,
                shape,
                class_means,
                train,
                test,
            }
        })
        .collect();
    Ok((base, tasks))
}

/// Borrowed view of classifier weights.
struct Net<'a> {
    shape: MlpShape,
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

/// Flat gradient buffers matching [`Net`].
struct Grads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Grads {
    fn zeros(s: MlpShape) -> Self {
        Grads {
            w1: vec![0.0; s.hidden * s.inputs],
            b1: vec![0.0; s.hidden],
            w2: vec![0.0; s.classes * s.hidden],
            b2: vec![0.0; s.classes],
        }
    }

    fn norm_sq(&self) -> f64 {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum()
    }

    fn into_task_vector(self, s: MlpShape) -> TaskVector {
        TaskVector::from_set(ParameterSet::from_iter([
            (W1.to_string(), Tensor::from_f64(vec![s.hidden, s.inputs], self.w1)),
            (B1.to_string(), Tensor::from_f64(vec![s.hidden], self.b1)),
            (W2.to_string(), Tensor::from_f64(vec![s.classes, s.hidden], self.w2)),
            (B2.to_string(), Tensor::from_f64(vec![s.classes], self.b2)),
        ]))
    }
}

impl<'a> Net<'a> {
    fn new(theta: &'a ParameterSet) -> Result<Self> {
        let shape = MlpShape::from_params(theta)?;
        let d = |n: &str| theta.get(n).unwrap().data();
        Ok(Net {
            shape,
            w1: d(W1),
            b1: d(B1),
            w2: d(W2),
            b2: d(B2),
        })
    }

    fn check_sample(&self, s: &Sample<'_>) -> Result<()> {
        if s.features.len() != self.shape.inputs || s.label >= self.shape.classes {
            return Err(Error::misaligned(format!(
                "sample with {} features / label {} for a {}-input {}-class model",
                s.features.len(),
                s.label,
                self.shape.inputs,
                self.shape.classes
            )));
        }
        Ok(())
    }

    fn hidden_pre_into(&self, x: &[f64], z1: &mut [f64]) {
        let n = self.shape.inputs;
        for (j, z) in z1.iter_mut().enumerate() {
            let row = &self.w1[j * n..(j + 1) * n];
            *z = self.b1[j] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    fn logits_into(&self, a: &[f64], logits: &mut [f64]) {
        let h = self.shape.hidden;
        for (c, l) in logits.iter_mut().enumerate() {
            let row = &self.w2[c * h..(c + 1) * h];
            *l = self.b2[c] + row.iter().zip(a).map(|(w, a)| w * a).sum::<f64>();
        }
    }

    fn forward(&self, x: &[f64], buf: &mut Scratch) {
        self.hidden_pre_into(x, &mut buf.z1);
        for (a, z) in buf.a.iter_mut().zip(&buf.z1) {
            *a = z.max(0.0);
        }
        self.logits_into(&buf.a, &mut buf.logits);
    }

    fn predict(&self, x: &[f64], buf: &mut Scratch) -> usize {
        self.forward(x, buf);
        let mut best = 0;
        for (c, &v) in buf.logits.iter().enumerate() {
            if v > buf.logits[best] {
                best = c;
            }
        }
        best
    }

    /// Cross-entropy of one sample; adds its gradient into `grads` when given.
    fn loss_grad(&self, x: &[f64], label: usize, grads: Option<&mut Grads>, buf: &mut Scratch) -> f64 {
        let s = self.shape;
        self.forward(x, buf);
        let max = buf.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = buf.logits.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let loss = log_z - buf.logits[label];

        if let Some(g) = grads {
            // dz2 overwrites the logits.
            for l in buf.logits.iter_mut() {
                *l = (*l - log_z).exp();
            }
            buf.logits[label] -= 1.0;
            let dz2 = &buf.logits;
            buf.da.iter_mut().for_each(|d| *d = 0.0);
            for c in 0..s.classes {
                g.b2[c] += dz2[c];
                let row = &self.w2[c * s.hidden..(c + 1) * s.hidden];
                let grow = &mut g.w2[c * s.hidden..(c + 1) * s.hidden];
                for j in 0..s.hidden {
                    grow[j] += dz2[c] * buf.a[j];
                    buf.da[j] += row[j] * dz2[c];
                }
            }
            for j in 0..s.hidden {
                if buf.z1[j] > 0.0 {
                    let dz1 = buf.da[j];
                    g.b1[j] += dz1;
                    let grow = &mut g.w1[j * s.inputs..(j + 1) * s.inputs];
                    for (gw, xi) in grow.iter_mut().zip(x) {
                        *gw += dz1 * xi;
                    }
                }
            }
        }
        loss
    }
}

/// Per-sample activations, reused across samples.
struct Scratch {
    z1: Vec<f64>,
    a: Vec<f64>,
    logits: Vec<f64>,
    da: Vec<f64>,
}

impl Scratch {
    fn new(s: MlpShape) -> Self {
        Scratch {
            z1: vec![0.0; s.hidden],
            a: vec![0.0; s.hidden],
            logits: vec![0.0; s.classes],
            da: vec![0.0; s.hidden],
        }
    }
}

/// Cross-entropy loss and its analytic gradient for one sample.
pub fn mlp_loss_grad(theta: &ParameterSet, sample: Sample<'_>) -> Result<(f64, TaskVector)> {
    let net = Net::new(theta)?;
    net.check_sample(&sample)?;
    let mut g = Grads::zeros(net.shape);
    let loss = net.loss_grad(sample.features, sample.label, Some(&mut g), &mut Scratch::new(net.shape));
    Ok((loss, g.into_task_vector(net.shape)))
}

pub fn mlp_logits(theta: &ParameterSet, features: &[f64]) -> Result<Vec<f64>> {
    let net = Net::new(theta)?;
    if features.len() != net.shape.inputs {
        return Err(Error::misaligned("feature length does not match the model"));
    }
    let mut buf = Scratch::new(net.shape);
    net.forward(features, &mut buf);
    Ok(buf.logits)
}

/// Mean loss and mean gradient over a dataset.
pub fn full_batch_loss_grad(theta: &ParameterSet, data: &Dataset) -> Result<(f64, TaskVector)> {
    let net = Net::new(theta)?;
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut g = Grads::zeros(net.shape);
    let mut buf = Scratch::new(net.shape);
    let mut loss = 0.0;
    for s in data.iter() {
        net.check_sample(&s)?;
        loss += net.loss_grad(s.features, s.label, Some(&mut g), &mut buf);
    }
    let inv = 1.0 / data.len() as f64;
    let g = g.into_task_vector(net.shape).scale(inv);
    Ok((loss * inv, g))
}

pub fn mean_loss(theta: &ParameterSet, data: &Dataset) -> Result<f64> {
    let net = Net::new(theta)?;
    let mut buf = Scratch::new(net.shape);
    let mut loss = 0.0;
    for s in data.iter() {
        net.check_sample(&s)?;
        loss += net.loss_grad(s.features, s.label, None, &mut buf);
    }
    Ok(loss / data.len().max(1) as f64)
}

/// One gradient per training sample, in dataset order.
pub fn per_sample_gradients(theta: &ParameterSet, data: &Dataset) -> Result<Vec<TaskVector>> {
    let net = Net::new(theta)?;
    let mut buf = Scratch::new(net.shape);
    data.iter()
        .map(|s| {
            net.check_sample(&s)?;
            let mut g = Grads::zeros(net.shape);
            net.loss_grad(s.features, s.label, Some(&mut g), &mut buf);
            Ok(g.into_task_vector(net.shape))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    /// Upper bound on gradient steps.
    pub steps: usize,
    pub lr: f64,
    /// Values at or above the training-set size give full-batch descent.
    pub batch_size: usize,
    pub seed: u64,
    /// Full-batch only: stop once the gradient norm is at most
    /// `grad_tol` times its initial value. Zero disables the check.
    pub grad_tol: f64,
    /// Record the full-batch training loss after every step.
    pub record_loss: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 10_000,
            lr: 0.5,
            batch_size: usize::MAX,
            seed: 0,
            grad_tol: 1e-2,
            record_loss: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ParameterSet,
    pub steps_taken: usize,
    pub initial_grad_norm: f64,
    pub final_grad_norm: f64,
    /// Full-batch training loss before training, then after each step (if recorded).
    pub train_losses: Vec<f64>,
}

/// Summed loss over a batch (rows of `x`) with the summed gradient written to `grads`.
fn batch_loss_grad(net: &Net<'_>, x: &Matrix, labels: &[usize], grads: &mut Grads) -> f64 {
    let s = net.shape;
    let w1 = Matrix::from_row_slice(s.hidden, s.inputs, net.w1);
    let w2 = Matrix::from_row_slice(s.classes, s.hidden, net.w2);
    let mut z1 = x * w1.transpose();
    for mut row in z1.row_iter_mut() {
        for (z, b) in row.iter_mut().zip(net.b1) {
            *z += b;
        }
    }
    let a = z1.map(|z| z.max(0.0));
    let mut dz2 = &a * w2.transpose();
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let mut row = dz2.row_mut(r);
        for (l, b) in row.iter_mut().zip(net.b2) {
            *l += b;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let target = row[label];
        let mut sum = 0.0;
        for l in row.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        loss += max + sum.ln() - target;
        row /= sum;
        row[label] -= 1.0;
    }
    let gw2 = dz2.transpose() * &a;
    let mut dz1 = &dz2 * &w2;
    dz1.zip_apply(&z1, |d, z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    let gw1 = dz1.transpose() * x;
    for c in 0..s.classes {
        grads.b2[c] = dz2.column(c).sum();
        for j in 0..s.hidden {
            grads.w2[c * s.hidden + j] = gw2[(c, j)];
        }
    }
    for j in 0..s.hidden {
        grads.b1[j] = dz1.column(j).sum();
        for i in 0..s.inputs {
            grads.w1[j * s.inputs + i] = gw1[(j, i)];
        }
    }
    loss
}

/// Gradient descent on the task's training split.
///
/// A batch size at least the training-set size gives deterministic
/// full-batch descent with optional early stopping. Smaller batches visit a
/// seeded permutation per epoch, so the trajectory is a function of the seed.
pub fn finetune_mlp(
    theta0: &ParameterSet,
    task: &MlpTask,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || cfg.batch_size == 0 {
        return Err(Error::invalid("learning rate must be >= 0 and batch size positive"));
    }
    let shape = MlpShape::from_params(theta0)?;
    if shape != task.shape {
        return Err(Error::misaligned("model does not match the task architecture"));
    }
    let data = &task.train;
    let (loss0, g0) = full_batch_loss_grad(theta0, data)?;
    let initial_grad_norm = g0.norm_sq().sqrt();
    let mut params = theta0.clone();
    let mut train_losses = Vec::new();
    if cfg.record_loss {
        train_losses.push(loss0);
    }

    let mut rng = rng_for(cfg.seed, 0x7EA1 + task.id as u64);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let batch = cfg.batch_size.min(data.len());
    let features = Matrix::from_row_slice(data.len(), data.dim, &data.features);
    let mut grads = Grads::zeros(shape);
    let mut steps_taken = 0;
    for step in 0..cfg.steps {
        let loss = if batch == data.len() {
            // Full batch: fixed order, no shuffling needed.
            batch_loss_grad(&Net::new(&params)?, &features, &data.labels, &mut grads)
        } else {
            if cursor + batch > data.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            let x = features.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            batch_loss_grad(&Net::new(&params)?, &x, &labels, &mut grads)
        };
        cursor += batch;
        if batch == data.len()
            && cfg.grad_tol > 0.0
            && grads.norm_sq().sqrt() / batch as f64 <= cfg.grad_tol * initial_grad_norm
        {
            break;
        }
        if !loss.is_finite() || !grads.norm_sq().is_finite() {
            return Err(Error::Divergence {
                step,
                loss: loss / batch as f64,
            });
        }
        steps_taken += 1;
        let scale = cfg.lr / batch as f64;
        for (name, buf) in [(W1, &grads.w1), (B1, &grads.b1), (W2, &grads.w2), (B2, &grads.b2)] {
            let t = params.get_mut(name).unwrap();
            for (p, g) in t.data_mut().iter_mut().zip(buf) {
                *p -= scale * g;
            }
        }
        if cfg.record_loss {
            let l = mean_loss(&params, data)?;
            if !l.is_finite() {
                return Err(Error::Divergence { step, loss: l });
            }
            train_losses.push(l);
        }
    }
    let (_, g_final) = full_batch_loss_grad(&params, data)?;
    Ok(FinetuneOutcome {
        params,
        steps_taken,
        initial_grad_norm,
        final_grad_norm: g_final.norm_sq().sqrt(),
        train_losses,
    })
}

/// Top-1 accuracy on a dataset; ties in the logits go to the lowest class.
pub fn accuracy_on(theta: &ParameterSet, data: &Dataset) -> Result<f64> {
    let net = Net::new(theta)?;
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut buf = Scratch::new(net.shape);
    let mut correct = 0usize;
    for s in data.iter() {
        net.check_sample(&s)?;
        if net.predict(s.features, &mut buf) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Top-1 accuracy on the task's test split.
pub fn evaluate_accuracy(theta: &ParameterSet, task: &MlpTask) -> Result<f64> {
    accuracy_on(theta, &task.test)
}

/// Everything a merging experiment needs: shared init, fine-tuned models
/// and per-sample gradient streams at each fine-tuned model.
#[derive(Debug, Clone)]
pub struct MlpExperiment {
    pub base: ParameterSet,
    pub tasks: Vec<MlpTask>,
    pub models: Vec<ParameterSet>,
    pub finetune: Vec<FinetuneOutcome>,
    /// Per task: gradients over the training split at the fine-tuned model.
    pub gradients: Vec<Vec<TaskVector>>,
}

impl MlpExperiment {
    pub fn build(suite: &MlpSuiteConfig, finetune: &FinetuneConfig) -> Result<Self> {
        let (base, tasks) = gen_mlp_tasks(suite)?;
        let runs = tasks
            .par_iter()
            .map(|task| {
                let cfg = FinetuneConfig {
                    seed: derive_seed(suite.seed, 0x5EED + task.id as u64) ^ finetune.seed,
                    ..*finetune
                };
                let out = finetune_mlp(&base, task, &cfg)?;
                let grads = per_sample_gradients(&out.params, &task.train)?;
                Ok((out, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut models = Vec::with_capacity(runs.len());
        let mut outcomes = Vec::with_capacity(runs.len());
        let mut gradients = Vec::with_capacity(runs.len());
        for (out, g) in runs {
            models.push(out.params.clone());
            outcomes.push(out);
            gradients.push(g);
        }
        Ok(MlpExperiment {
            base,
            tasks,
            models,
            finetune: outcomes,
            gradients,
        })
    }

    /// Per-task accuracy of `theta` on every task's test split.
    pub fn accuracies(&self, theta: &ParameterSet) -> Result<Vec<f64>> {
        self.tasks.iter().map(|t| evaluate_accuracy(theta, t)).collect()
    }
}
