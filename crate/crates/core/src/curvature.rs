//! Empirical Fisher diagonals and conditioning of projected curvature.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{read_checkpoint, write_checkpoint, DType, ParameterSet, TaskVector, Tensor};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::meta::{sidecar_path, Sidecar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureSource {
    GradientStream,
    ExactQuadratic,
    LoadedFile,
}

impl CurvatureSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CurvatureSource::GradientStream => "gradient-stream",
            CurvatureSource::ExactQuadratic => "exact-quadratic",
            CurvatureSource::LoadedFile => "loaded-file",
        }
    }
}

/// Non-negative per-coordinate curvature for one task, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureEstimate {
    values: ParameterSet,
    sample_count: usize,
    source: CurvatureSource,
}

impl CurvatureEstimate {
    pub fn new(values: ParameterSet, sample_count: usize, source: CurvatureSource) -> Result<Self> {
        for (name, t) in values.iter() {
            if let Some(&bad) = t.data().iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
                return Err(Error::NegativeCurvature {
                    layer: name.to_string(),
                    value: bad,
                });
            }
        }
        if source == CurvatureSource::GradientStream && sample_count == 0 {
            return Err(Error::invalid("gradient-stream estimate needs at least one sample"));
        }
        Ok(CurvatureEstimate {
            values,
            sample_count,
            source,
        })
    }

    pub fn values(&self) -> &ParameterSet {
        &self.values
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn source(&self) -> CurvatureSource {
        self.source
    }

    /// Same shapes as `set` (dtype is not compared).
    pub fn check_matches(&self, set: &ParameterSet) -> Result<()> {
        if self.values.len() != set.len() {
            return Err(Error::misaligned("curvature and model have different layer counts"));
        }
        for ((n1, t1), (n2, t2)) in self.values.iter().zip(set.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::misaligned(format!(
                    "curvature layer `{n1}` {:?} vs model layer `{n2}` {:?}",
                    t1.shape(),
                    t2.shape()
                )));
            }
        }
        Ok(())
    }
}

/// `v = (1/N) sum_s g_s o g_s`, accumulated in stream order.
pub fn accumulate_fisher<'a, I>(grad_stream: I) -> Result<CurvatureEstimate>
where
    I: IntoIterator<Item = &'a TaskVector>,
{
    let mut iter = grad_stream.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::invalid("empty gradient stream"))?;
    let mut acc = first.as_set().map(|g| g * g);
    let mut count = 1usize;
    for g in iter {
        acc.check_aligned(g)?;
        for ((_, a), (_, t)) in acc.iter_mut().zip(g.iter()) {
            for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                *x += y * y;
            }
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    CurvatureEstimate::new(acc.map(|x| x * inv), count, CurvatureSource::GradientStream)
}

/// Indices of a seeded shuffle of `0..n`, truncated to `max(1, floor(f*n))`.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((fraction * n as f64).floor() as usize).max(1).min(n);
    idx.truncate(keep);
    Ok(idx)
}

/// Seeded shuffle of the stream followed by a prefix of `max(1, floor(f*N))` items.
pub fn subsample_stream<T: Clone>(stream: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    Ok(subsample_indices(stream.len(), fraction, seed)?
        .into_iter()
        .map(|i| stream[i].clone())
        .collect())
}

/// `H + eps I`.
pub fn ensure_psd(h: &Matrix, eps: f64) -> Matrix {
    let mut out = h.clone();
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] += eps;
    }
    out
}

/// Rescales `H` to trace `p`.
pub fn trace_normalize(h: &Matrix) -> Result<Matrix> {
    let tr = h.trace();
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::invalid(format!("cannot trace-normalize: trace = {tr}")));
    }
    Ok(h * (h.nrows() as f64 / tr))
}

/// Writes `v_t` as a container with a sidecar holding `sample_count` and `fraction`.
pub fn write_fisher(est: &CurvatureEstimate, fraction: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_checkpoint(&est.values, path)?;
    let mut meta = Sidecar::new();
    meta.set("kind", "fisher-diagonal")
        .set("sample_count", est.sample_count)
        .set("fraction", fraction)
        .set("source", est.source.as_str());
    meta.write(sidecar_path(path))
}

/// Reads a Fisher container; the sidecar is optional.
pub fn read_fisher(path: impl AsRef<Path>) -> Result<CurvatureEstimate> {
    let path = path.as_ref();
    let values = read_checkpoint(path)?;
    let meta_path = sidecar_path(path);
    let sample_count = if meta_path.exists() {
        Sidecar::read(&meta_path)?.require("sample_count", &meta_path)?
    } else {
        0
    };
    CurvatureEstimate::new(values, sample_count, CurvatureSource::LoadedFile)
}

/// One container holding every per-sample gradient, tensors named `<layer>#<index>`.
pub fn write_gradient_stream(stream: &[TaskVector], path: impl AsRef<Path>) -> Result<()> {
    let width = stream.len().saturating_sub(1).to_string().len();
    let mut set = ParameterSet::new();
    for (i, g) in stream.iter().enumerate() {
        for (name, t) in g.iter() {
            set.set(format!("{name}#{i:0width$}"), t.clone().with_dtype(DType::F64));
        }
    }
    let path = path.as_ref();
    write_checkpoint(&set, path)?;
    let mut meta = Sidecar::new();
    meta.set("kind", "gradient-stream").set("samples", stream.len());
    meta.write(sidecar_path(path))
}

pub fn read_gradient_stream(path: impl AsRef<Path>) -> Result<Vec<TaskVector>> {
    let path = path.as_ref();
    let set = read_checkpoint(path)?;
    let mut samples: Vec<ParameterSet> = Vec::new();
    for (full, t) in set.iter() {
        let (layer, idx) = full
            .rsplit_once('#')
            .and_then(|(l, i)| i.parse::<usize>().ok().map(|i| (l, i)))
            .ok_or_else(|| Error::invalid(format!("gradient tensor `{full}` lacks a #<index> suffix")))?;
        if samples.len() <= idx {
            samples.resize_with(idx + 1, ParameterSet::new);
        }
        samples[idx].set(layer, Tensor::from_f64(t.shape().to_vec(), t.data().to_vec()));
    }
    if let Some(first) = samples.first() {
        for (i, s) in samples.iter().enumerate().skip(1) {
            first
                .check_aligned(s)
                .map_err(|e| Error::misaligned(format!("gradient sample {i}: {e}")))?;
        }
    }
    Ok(samples.into_iter().map(TaskVector::from_set).collect())
}
