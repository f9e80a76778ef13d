//! Per-layer tagged rank-1 bases built from task-vector SVDs.
//!
//! For a matrix layer the basis holds `k*T` atoms `u_i v_i^T` where the
//! columns `u_i` (and separately `v_i`) are orthonormal. Atoms are therefore
//! orthonormal under the Frobenius inner product and the layer's block of
//! the subspace matrix never needs to be materialized: projecting,
//! lifting and restricting a diagonal metric all reduce to products with
//! `U` and `V`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{
    read_checkpoint, write_checkpoint, DType, LayerKind, ParameterSet, TaskVector, Tensor,
};
use crate::curvature::CurvatureEstimate;
use crate::error::{Error, RankGuardReport, RankViolation, Result};
use crate::linalg::{procrustes_orthonormalize, thin_svd, Matrix, Vector};
use crate::meta::{sidecar_path, Sidecar};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBasis {
    /// `rows x kT`, orthonormal columns.
    pub u_atoms: Matrix,
    /// `cols x kT`, orthonormal columns.
    pub v_atoms: Matrix,
    /// Owning task of each atom.
    pub tags: Vec<usize>,
}

impl LayerBasis {
    pub fn dim(&self) -> usize {
        self.tags.len()
    }

    pub fn layer_shape(&self) -> (usize, usize) {
        (self.u_atoms.nrows(), self.v_atoms.nrows())
    }

    /// `G[i,j] = (u_i . u_j)(v_i . v_j)`.
    pub fn gram(&self) -> Matrix {
        let uu = self.u_atoms.transpose() * &self.u_atoms;
        let vv = self.v_atoms.transpose() * &self.v_atoms;
        uu.component_mul(&vv)
    }

    /// Explicit `(rows*cols) x kT` block of the subspace matrix, row-major vec.
    /// Quadratic in the layer size; meant for small layers and dense metrics.
    pub fn materialize(&self) -> Matrix {
        let (rows, cols) = self.layer_shape();
        Matrix::from_fn(rows * cols, self.dim(), |idx, i| {
            self.u_atoms[(idx / cols, i)] * self.v_atoms[(idx % cols, i)]
        })
    }

    pub fn project(&self, delta: &Matrix) -> Vector {
        let ud = self.u_atoms.transpose() * delta;
        Vector::from_fn(self.dim(), |i, _| ud.row(i).dot(&self.v_atoms.column(i).transpose()))
    }

    pub fn lift(&self, coeffs: &Vector) -> Matrix {
        let mut scaled = self.u_atoms.clone();
        for (j, c) in coeffs.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*c);
        }
        scaled * self.v_atoms.transpose()
    }

    /// `S^T diag(vec(metric)) S` via `(u_i o u_j)^T M (v_i o v_j)`.
    pub fn restrict_diagonal(&self, metric: &Matrix) -> Matrix {
        let p = self.dim();
        let mut h = Matrix::zeros(p, p);
        for i in 0..p {
            let ui = self.u_atoms.column(i);
            let vi = self.v_atoms.column(i);
            for j in i..p {
                let a = ui.component_mul(&self.u_atoms.column(j));
                let b = vi.component_mul(&self.v_atoms.column(j));
                let val = (a.transpose() * metric * b)[(0, 0)];
                h[(i, j)] = val;
                h[(j, i)] = val;
            }
        }
        h
    }

    /// `S^T H S` for a dense metric over the row-major vec of the layer.
    pub fn restrict_dense(&self, metric: &Matrix) -> Matrix {
        let s = self.materialize();
        let h = s.transpose() * metric * &s;
        (&h + h.transpose()) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedBasis {
    pub k: usize,
    pub tasks: usize,
    layers: BTreeMap<String, LayerBasis>,
}

impl TaggedBasis {
    pub fn from_layers(k: usize, tasks: usize, layers: BTreeMap<String, LayerBasis>) -> Self {
        TaggedBasis { k, tasks, layers }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerBasis> {
        self.layers.get(name)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &LayerBasis)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total subspace dimension `p = sum_l kT`.
    pub fn dim(&self) -> usize {
        self.layers.values().map(LayerBasis::dim).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }
}

/// Per-layer subspace coefficients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProjectedVector {
    layers: BTreeMap<String, Vector>,
}

impl ProjectedVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Vector) {
        self.layers.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Option<&Vector> {
        self.layers.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Vector)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn scale(&self, s: f64) -> Self {
        ProjectedVector {
            layers: self.layers.iter().map(|(k, v)| (k.clone(), v * s)).collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.values().map(|v| v.norm_squared()).sum()
    }

    pub fn max_abs_diff(&self, other: &ProjectedVector) -> f64 {
        self.layers
            .iter()
            .map(|(k, v)| match other.layers.get(k) {
                Some(o) if o.len() == v.len() => (v - o).amax(),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
            .max(if self.layers.len() == other.layers.len() { 0.0 } else { f64::INFINITY })
    }
}

impl FromIterator<(String, Vector)> for ProjectedVector {
    fn from_iter<I: IntoIterator<Item = (String, Vector)>>(iter: I) -> Self {
        ProjectedVector {
            layers: iter.into_iter().collect(),
        }
    }
}

/// Projected curvature `S^T H S` per layer.
pub type ProjectedHessians = BTreeMap<String, Matrix>;

fn layer_matrix<'a>(set: &'a ParameterSet, name: &str, shape: (usize, usize)) -> Result<Matrix> {
    let t: &'a Tensor = set
        .get(name)
        .ok_or_else(|| Error::misaligned(format!("layer `{name}` missing")))?;
    if t.shape() != [shape.0, shape.1] {
        return Err(Error::misaligned(format!(
            "layer `{name}` has shape {:?}, basis expects [{}, {}]",
            t.shape(),
            shape.0,
            shape.1
        )));
    }
    Ok(t.to_matrix().expect("rank-2 tensor"))
}

/// Names and shapes of the matrix layers of `set`.
pub fn matrix_layers(set: &ParameterSet) -> Vec<(String, usize, usize)> {
    set.iter()
        .filter(|(_, t)| t.kind() == LayerKind::Matrix)
        .map(|(n, t)| (n.to_string(), t.shape()[0], t.shape()[1]))
        .collect()
}

/// Checks `k*T <= min(rows, cols)` on every matrix layer.
pub fn rank_guard(set: &ParameterSet, k: usize, tasks: usize) -> RankGuardReport {
    let required = k * tasks;
    RankGuardReport {
        violations: matrix_layers(set)
            .into_iter()
            .filter(|(_, r, c)| required > (*r).min(*c))
            .map(|(layer, rows, cols)| RankViolation {
                layer,
                rows,
                cols,
                required,
            })
            .collect(),
    }
}

/// Builds the tagged basis from `T` aligned task vectors at per-task rank `k`.
///
/// Per matrix layer: rank-`k` SVD of each task's delta, stack the left
/// factors task-major and the right factors likewise, then replace each
/// stack by its orthonormal polar factor. Auxiliary layers get no basis.
pub fn build_tagged_basis(deltas: &[TaskVector], k: usize) -> Result<TaggedBasis> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::invalid("at least one task vector is required"))?;
    if k == 0 {
        return Err(Error::invalid("rank k must be at least 1"));
    }
    for d in &deltas[1..] {
        first.check_aligned(d)?;
    }
    let tasks = deltas.len();
    let report = rank_guard(first, k, tasks);
    if !report.violations.is_empty() {
        return Err(Error::RankGuard(report));
    }

    let layers = matrix_layers(first)
        .into_par_iter()
        .map(|(name, rows, cols)| {
            let mut u_stack = Matrix::zeros(rows, k * tasks);
            let mut v_stack = Matrix::zeros(cols, k * tasks);
            for (t, delta) in deltas.iter().enumerate() {
                let m = layer_matrix(delta, &name, (rows, cols))?;
                let svd = thin_svd(&m, k)?;
                u_stack.columns_mut(t * k, k).copy_from(&svd.u);
                v_stack.columns_mut(t * k, k).copy_from(&svd.v);
            }
            let basis = LayerBasis {
                u_atoms: procrustes_orthonormalize(&u_stack)?,
                v_atoms: procrustes_orthonormalize(&v_stack)?,
                tags: (0..tasks).flat_map(|t| std::iter::repeat_n(t, k)).collect(),
            };
            Ok((name, basis))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TaggedBasis {
        k,
        tasks,
        layers: layers.into_iter().collect(),
    })
}

/// Coefficients `c_i = u_i^T Delta v_i` on every basis layer.
pub fn project_vector(basis: &TaggedBasis, delta: &TaskVector) -> Result<ProjectedVector> {
    basis
        .layers
        .iter()
        .map(|(name, lb)| {
            let m = layer_matrix(delta, name, lb.layer_shape())?;
            Ok((name.clone(), lb.project(&m)))
        })
        .collect()
}

/// `sum_i c_i u_i v_i^T` per basis layer. The result holds basis layers only.
pub fn lift(basis: &TaggedBasis, coeffs: &ProjectedVector) -> Result<TaskVector> {
    if coeffs.len() != basis.layers.len() {
        return Err(Error::misaligned(format!(
            "{} coefficient blocks for {} basis layers",
            coeffs.len(),
            basis.layers.len()
        )));
    }
    let mut out = ParameterSet::new();
    for (name, lb) in &basis.layers {
        let c = coeffs
            .get(name)
            .ok_or_else(|| Error::misaligned(format!("no coefficients for layer `{name}`")))?;
        if c.len() != lb.dim() {
            return Err(Error::misaligned(format!(
                "layer `{name}`: {} coefficients, basis has {} atoms",
                c.len(),
                lb.dim()
            )));
        }
        out.set(name.clone(), Tensor::from_matrix(DType::F64, &lb.lift(c)));
    }
    Ok(TaskVector::from_set(out))
}

/// Restricts one task's Fisher diagonal to each basis layer.
pub fn project_diag_curvature(
    basis: &TaggedBasis,
    fisher: &CurvatureEstimate,
) -> Result<ProjectedHessians> {
    basis
        .layers
        .par_iter()
        .map(|(name, lb)| {
            let m = layer_matrix(fisher.values(), name, lb.layer_shape())?;
            if let Some(&bad) = m.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::NegativeCurvature {
                    layer: name.clone(),
                    value: bad,
                });
            }
            Ok((name.clone(), lb.restrict_diagonal(&m)))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// `delta - lift(project(delta))` on basis layers; other layers pass through unchanged.
pub fn residual_component(basis: &TaggedBasis, delta: &TaskVector) -> Result<TaskVector> {
    let mut out = delta.clone();
    for (name, lb) in &basis.layers {
        let m = layer_matrix(delta, name, lb.layer_shape())?;
        let resid = &m - lb.lift(&lb.project(&m));
        out.set(name.clone(), Tensor::from_matrix(DType::F64, &resid));
    }
    Ok(out)
}

/// Writes `<layer>#u` / `<layer>#v` tensors plus a sidecar with `k`, `tasks` and tags.
pub fn write_basis(basis: &TaggedBasis, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut set = ParameterSet::new();
    let mut meta = Sidecar::new();
    meta.set("kind", "tagged-basis")
        .set("k", basis.k)
        .set("tasks", basis.tasks)
        .set("layers", basis.layers.len());
    for (name, lb) in &basis.layers {
        set.set(format!("{name}#u"), Tensor::from_matrix(DType::F64, &lb.u_atoms));
        set.set(format!("{name}#v"), Tensor::from_matrix(DType::F64, &lb.v_atoms));
        let tags: Vec<String> = lb.tags.iter().map(usize::to_string).collect();
        meta.set(format!("tags.{name}"), tags.join(","));
    }
    write_checkpoint(&set, path)?;
    meta.write(sidecar_path(path))
}

pub fn read_basis(path: impl AsRef<Path>) -> Result<TaggedBasis> {
    let path = path.as_ref();
    let set = read_checkpoint(path)?;
    let meta_path = sidecar_path(path);
    let meta = Sidecar::read(&meta_path)?;
    let k: usize = meta.require("k", &meta_path)?;
    let tasks: usize = meta.require("tasks", &meta_path)?;
    let bad = |reason: String| Error::Metadata {
        path: meta_path.clone(),
        reason,
    };

    let mut layers = BTreeMap::new();
    for (name, t) in set.iter() {
        let Some(layer) = name.strip_suffix("#u") else {
            continue;
        };
        let v = set
            .get(&format!("{layer}#v"))
            .ok_or_else(|| bad(format!("missing `{layer}#v`")))?;
        let (u_atoms, v_atoms) = match (t.to_matrix(), v.to_matrix()) {
            (Some(u), Some(v)) => (u, v),
            _ => return Err(bad(format!("atoms of `{layer}` are not matrices"))),
        };
        let tags = meta
            .get(&format!("tags.{layer}"))
            .ok_or_else(|| bad(format!("missing tags for `{layer}`")))?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("malformed tags for `{layer}`")))?;
        if tags.len() != k * tasks || u_atoms.ncols() != tags.len() || v_atoms.ncols() != tags.len()
        {
            return Err(bad(format!("atom count mismatch in `{layer}`")));
        }
        layers.insert(
            layer.to_string(),
            LayerBasis {
                u_atoms,
                v_atoms,
                tags,
            },
        );
    }
    Ok(TaggedBasis { k, tasks, layers })
}
