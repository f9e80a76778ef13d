//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use epimerge_core::checkpoint::{ParameterSet, TaskVector, Tensor};
use epimerge_core::curvature::{CurvatureEstimate, CurvatureSource};
use epimerge_core::linalg::{Matrix, Vector};
use epimerge_core::subspace::LayerBasis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| gauss(rng))
}

pub fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(n, |_, _| gauss(rng))
}

/// Random SPD matrix `A A^T + 0.1 I`.
pub fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = random_matrix(n, n, rng);
    &a * a.transpose() + Matrix::identity(n, n) * 0.1
}

pub fn random_set(shapes: &[(&str, Vec<usize>)], rng: &mut ChaCha8Rng) -> ParameterSet {
    shapes
        .iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| gauss(rng)).collect();
            (name.to_string(), Tensor::from_f64(shape.clone(), data))
        })
        .collect()
}

pub fn random_deltas(like: &ParameterSet, tasks: usize, rng: &mut ChaCha8Rng) -> Vec<TaskVector> {
    (0..tasks)
        .map(|_| TaskVector::from_set(like.map(|_| 0.0).unflatten_like(
            &(0..like.numel()).map(|_| gauss(rng)).collect::<Vec<_>>(),
        ).unwrap()))
        .collect()
}

pub fn random_fisher(like: &ParameterSet, rng: &mut ChaCha8Rng) -> CurvatureEstimate {
    let v = like.map(|_| 0.0);
    let vals: Vec<f64> = (0..like.numel()).map(|_| rng.random_range(0.05..3.0)).collect();
    CurvatureEstimate::new(v.unflatten_like(&vals).unwrap(), 1, CurvatureSource::LoadedFile).unwrap()
}

pub fn constant_fisher(like: &ParameterSet, value: f64) -> CurvatureEstimate {
    CurvatureEstimate::new(like.map(|_| value), 1, CurvatureSource::LoadedFile).unwrap()
}

pub fn random_weights(tasks: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..tasks).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / s).collect();
    // Push the rounding error into the last weight so the sum is 1 to the ulp.
    let head: f64 = w[..tasks - 1].iter().sum();
    w[tasks - 1] = 1.0 - head;
    w
}

/// Row-major vectorization used throughout the library.
pub fn vec_row_major(m: &Matrix) -> Vector {
    Vector::from_fn(m.nrows() * m.ncols(), |idx, _| m[(idx / m.ncols(), idx % m.ncols())])
}

pub fn unvec_row_major(v: &Vector, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |r, c| v[r * cols + c])
}

/// Explicit subspace block built column by column as `vec(u_i v_i^T)`.
pub fn materialized_s(lb: &LayerBasis) -> Matrix {
    let (rows, cols) = lb.layer_shape();
    let mut s = Matrix::zeros(rows * cols, lb.dim());
    for i in 0..lb.dim() {
        let atom = lb.u_atoms.column(i) * lb.v_atoms.column(i).transpose();
        s.set_column(i, &vec_row_major(&atom));
    }
    s
}

/// The standard basis `e_a e_b^T` of a `rows x cols` layer (S = I).
pub fn full_space_basis(rows: usize, cols: usize) -> LayerBasis {
    let p = rows * cols;
    LayerBasis {
        u_atoms: Matrix::from_fn(rows, p, |r, i| if i / cols == r { 1.0 } else { 0.0 }),
        v_atoms: Matrix::from_fn(cols, p, |c, i| if i % cols == c { 1.0 } else { 0.0 }),
        tags: vec![0; p],
    }
}

pub fn max_abs_diff(a: &ParameterSet, b: &ParameterSet) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut e: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| b.total_cmp(a));
    e
}
