//! Merging aggregators: flat baselines, Fisher averaging, and the subspace
//! Fréchet mean in its mean and sum forms.
//!
//! Every subspace method treats auxiliary (non-matrix) layers with task
//! arithmetic at the aggregator's effective scale: `alpha * T` for the sum
//! forms (TSV-M, EpiMer sum) and `1` for the mean form, so that
//! sum-with-`alpha = 1/T` and the mean form produce identical models.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::checkpoint::{task_vector, ParameterSet, TaskVector};
use crate::curvature::{ensure_psd, CurvatureEstimate};
use crate::error::{Error, Result};
use crate::linalg::{spd_solve_vec, Matrix, Vector};
use crate::meta::Sidecar;
use crate::subspace::{
    build_tagged_basis, lift, project_diag_curvature, project_vector, ProjectedHessians,
    ProjectedVector, TaggedBasis,
};

pub const DEFAULT_JITTER: f64 = 1e-8;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.20;
/// Fisher mass at or below this falls back to the plain weighted mean.
pub const FISHER_MASS_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Am,
    Ta,
    Ties,
    FisherAvg,
    Tsvm,
    EpiMerMean,
    EpiMerSum,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Am,
        Method::Ta,
        Method::Ties,
        Method::FisherAvg,
        Method::Tsvm,
        Method::EpiMerMean,
        Method::EpiMerSum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Am => "am",
            Method::Ta => "ta",
            Method::Ties => "ties",
            Method::FisherAvg => "fisher",
            Method::Tsvm => "tsvm",
            Method::EpiMerMean => "epimer-mean",
            Method::EpiMerSum => "epimer-sum",
        }
    }

    pub fn needs_curvature(self) -> bool {
        matches!(self, Method::FisherAvg | Method::EpiMerMean | Method::EpiMerSum)
    }

    pub fn needs_basis(self) -> bool {
        matches!(self, Method::Tsvm | Method::EpiMerMean | Method::EpiMerSum)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "am" => Ok(Method::Am),
            "ta" => Ok(Method::Ta),
            "ties" => Ok(Method::Ties),
            "fisher" | "fisher-avg" | "fisheravg" => Ok(Method::FisherAvg),
            "tsvm" | "tsv-m" => Ok(Method::Tsvm),
            "epimer-mean" | "epimermean" => Ok(Method::EpiMerMean),
            "epimer-sum" | "epimersum" | "epimer" => Ok(Method::EpiMerSum),
            other => Err(Error::invalid(format!("unknown merge method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeConfig {
    pub method: Method,
    /// `lambda_t`, non-negative and summing to one.
    pub weights: Vec<f64>,
    pub k: usize,
    pub alpha: f64,
    pub jitter: f64,
    pub keep_fraction: f64,
}

impl MergeConfig {
    /// Defaults: uniform weights, `k = 2`, `alpha = 1/sqrt(T)`, jitter `1e-8`, TIES keeps 20%.
    pub fn new(method: Method, tasks: usize) -> Self {
        MergeConfig {
            method,
            weights: uniform_weights(tasks),
            k: 2,
            alpha: 1.0 / (tasks.max(1) as f64).sqrt(),
            jitter: DEFAULT_JITTER,
            keep_fraction: DEFAULT_KEEP_FRACTION,
        }
    }

    pub fn validate(&self, tasks: usize) -> Result<()> {
        check_weights(&self.weights, tasks)?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.k == 0 {
            return Err(Error::invalid("rank k must be at least 1"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "keep fraction must lie in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        Ok(())
    }
}

pub fn uniform_weights(tasks: usize) -> Vec<f64> {
    vec![1.0 / tasks.max(1) as f64; tasks]
}

pub fn check_weights(weights: &[f64], tasks: usize) -> Result<()> {
    if tasks == 0 {
        return Err(Error::invalid("at least one task is required"));
    }
    if weights.len() != tasks {
        return Err(Error::invalid(format!(
            "{} weights for {tasks} tasks",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

fn check_all_aligned(sets: &[&ParameterSet]) -> Result<()> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("at least one model is required"))?;
    for s in &sets[1..] {
        first.check_aligned(s)?;
    }
    Ok(())
}

/// `theta_m = sum_t lambda_t theta_t`.
pub fn merge_am(models: &[ParameterSet], weights: &[f64]) -> Result<ParameterSet> {
    check_weights(weights, models.len())?;
    check_all_aligned(&models.iter().collect::<Vec<_>>())?;
    let mut out = models[0].map(|x| weights[0] * x);
    for (m, &w) in models.iter().zip(weights).skip(1) {
        out = out.zip_map(m, |a, b| a + w * b)?;
    }
    Ok(out)
}

/// `theta_m = theta_0 + alpha * sum_t lambda_t delta_t`.
pub fn merge_ta(
    base: &ParameterSet,
    deltas: &[TaskVector],
    weights: &[f64],
    alpha: f64,
) -> Result<ParameterSet> {
    base.add_delta(&weighted_delta_sum(base, deltas, weights, alpha)?)
}

/// `alpha * sum_t lambda_t delta_t` on every layer of `base`.
fn weighted_delta_sum(
    base: &ParameterSet,
    deltas: &[TaskVector],
    weights: &[f64],
    alpha: f64,
) -> Result<TaskVector> {
    check_weights(weights, deltas.len())?;
    check_all_aligned(&deltas.iter().map(|d| d.as_set()).collect::<Vec<_>>())?;
    let mut acc = deltas[0].as_set().map(|_| 0.0);
    for (d, &w) in deltas.iter().zip(weights) {
        acc = acc.zip_map(d, |a, b| a + w * b)?;
    }
    let acc = acc.map(|x| alpha * x);
    let zero = base.map(|_| 0.0);
    for (name, t) in zero.iter() {
        match acc.get(name) {
            Some(d) if d.shape() == t.shape() => {}
            _ => return Err(Error::misaligned(format!("delta layer `{name}` does not match base"))),
        }
    }
    Ok(TaskVector::from_set(acc))
}

/// TIES: per-task magnitude trim, sign election by frequency, disjoint mean.
///
/// Each task keeps its entries with magnitude at least the `ceil(keep * n)`-th
/// largest over all of its coordinates. Per coordinate the elected sign is the
/// one held by more surviving nonzero entries (ties go positive); the merged
/// value is the mean of `lambda_t * T * delta_t` over tasks that agree with it.
pub fn merge_ties(
    base: &ParameterSet,
    deltas: &[TaskVector],
    weights: &[f64],
    keep_fraction: f64,
) -> Result<ParameterSet> {
    check_weights(weights, deltas.len())?;
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    check_all_aligned(&deltas.iter().map(|d| d.as_set()).collect::<Vec<_>>())?;
    let tasks = deltas.len() as f64;

    let trimmed: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| {
            let flat = d.flatten();
            let thresh = magnitude_threshold(&flat, keep_fraction);
            flat.into_iter()
                .map(|x| if x.abs() >= thresh { x } else { 0.0 })
                .collect()
        })
        .collect();

    let n = trimmed.first().map_or(0, Vec::len);
    let mut merged = vec![0.0; n];
    for (i, slot) in merged.iter_mut().enumerate() {
        let (mut pos, mut neg) = (0usize, 0usize);
        for t in &trimmed {
            if t[i] > 0.0 {
                pos += 1;
            } else if t[i] < 0.0 {
                neg += 1;
            }
        }
        if pos + neg == 0 {
            continue;
        }
        let sign = if pos >= neg { 1.0 } else { -1.0 };
        let (mut sum, mut count) = (0.0, 0usize);
        for (t, &w) in trimmed.iter().zip(weights) {
            if t[i] * sign > 0.0 {
                sum += w * tasks * t[i];
                count += 1;
            }
        }
        *slot = sum / count as f64;
    }
    let delta = TaskVector::from_set(deltas[0].unflatten_like(&merged)?);
    base.add_delta(&delta)
}

/// The `ceil(keep * n)`-th largest magnitude (at least one entry is kept).
fn magnitude_threshold(values: &[f64], keep_fraction: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut mags: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    let keep = ((keep_fraction * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    let (_, kth, _) = mags.select_nth_unstable_by(keep - 1, |a, b| b.total_cmp(a));
    *kth
}

/// Per-coordinate Fisher-weighted average of the models.
///
/// Coordinates whose total Fisher mass `sum_t lambda_t v_t` is at most
/// [`FISHER_MASS_GUARD`] take the plain `lambda`-weighted mean.
pub fn merge_fisher_avg(
    models: &[ParameterSet],
    fishers: &[CurvatureEstimate],
    weights: &[f64],
) -> Result<ParameterSet> {
    check_weights(weights, models.len())?;
    check_all_aligned(&models.iter().collect::<Vec<_>>())?;
    if fishers.len() != models.len() {
        return Err(Error::invalid(format!(
            "{} Fisher estimates for {} models",
            fishers.len(),
            models.len()
        )));
    }
    for f in fishers {
        f.check_matches(&models[0])?;
    }
    let entries = models[0]
        .iter()
        .map(|(name, t0)| {
            let n = t0.numel();
            let mut out = vec![0.0; n];
            for (i, slot) in out.iter_mut().enumerate() {
                let (mut num, mut mass, mut plain) = (0.0, 0.0, 0.0);
                for ((m, f), &w) in models.iter().zip(fishers).zip(weights) {
                    let theta = m.get(name).unwrap().data()[i];
                    let v = f.values().get(name).unwrap().data()[i];
                    num += w * v * theta;
                    mass += w * v;
                    plain += w * theta;
                }
                *slot = if mass > FISHER_MASS_GUARD { num / mass } else { plain };
            }
            (name.to_string(), t0.with_data(out))
        })
        .collect();
    Ok(entries)
}

/// Outcome of one per-layer Fréchet solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSolve {
    /// Jitter added to each projected Hessian plus any solver escalation.
    pub jitter_used: f64,
    /// `||H x - b|| / (||H|| ||x|| + ||b||)`.
    pub relative_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregator {
    /// `(sum lambda H)^-1 sum lambda H d`.
    Mean,
    /// `alpha * T` times the mean.
    Sum { alpha: f64 },
}

impl Aggregator {
    /// Multiplier applied to the mean solution (and to auxiliary layers).
    pub fn scale(self, tasks: usize) -> f64 {
        match self {
            Aggregator::Mean => 1.0,
            Aggregator::Sum { alpha } => alpha * tasks as f64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Sum { .. } => "sum",
        }
    }
}

/// Solves `(sum_t lambda_t H_t) x = scale * sum_t lambda_t H_t d_t` for one layer.
///
/// `hessians` are used as given; callers condition them with [`ensure_psd`].
pub fn frechet_solve(
    hessians: &[&Matrix],
    coeffs: &[&Vector],
    weights: &[f64],
    scale: f64,
) -> Result<(Vector, LayerSolve)> {
    check_weights(weights, hessians.len())?;
    if coeffs.len() != hessians.len() {
        return Err(Error::invalid("one coefficient vector per Hessian is required"));
    }
    let p = coeffs[0].len();
    for (h, d) in hessians.iter().zip(coeffs) {
        if h.shape() != (p, p) || d.len() != p {
            return Err(Error::misaligned(format!(
                "Hessian {:?} / coefficients {} vs dimension {p}",
                h.shape(),
                d.len()
            )));
        }
    }
    let mut hbar = Matrix::zeros(p, p);
    let mut rhs = Vector::zeros(p);
    for ((h, d), &w) in hessians.iter().zip(coeffs).zip(weights) {
        hbar += *h * w;
        rhs += (*h * *d) * w;
    }
    let rhs = rhs * scale;
    let (x, jitter, residual) = spd_solve_vec(&hbar, &rhs, 0.0)?;
    let denom = hbar.norm() * x.norm() + rhs.norm();
    let relative_residual = if denom > 0.0 { residual / denom } else { 0.0 };
    Ok((
        x,
        LayerSolve {
            jitter_used: jitter,
            relative_residual,
        },
    ))
}

/// Subspace Fréchet coefficients for every basis layer.
pub fn epimer_coefficients(
    projected: &[ProjectedVector],
    hessians: &[ProjectedHessians],
    weights: &[f64],
    jitter: f64,
    aggregator: Aggregator,
) -> Result<(ProjectedVector, BTreeMap<String, LayerSolve>)> {
    check_weights(weights, projected.len())?;
    if hessians.len() != projected.len() {
        return Err(Error::invalid(format!(
            "{} projected Hessian sets for {} tasks",
            hessians.len(),
            projected.len()
        )));
    }
    let scale = aggregator.scale(projected.len());
    let names: Vec<&str> = projected[0].iter().map(|(n, _)| n).collect();
    let solved = names
        .par_iter()
        .map(|&name| {
            let conditioned = hessians
                .iter()
                .map(|hs| {
                    hs.get(name)
                        .map(|h| ensure_psd(h, jitter))
                        .ok_or_else(|| Error::misaligned(format!("no projected Hessian for `{name}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let coeffs = projected
                .iter()
                .map(|pv| {
                    pv.get(name)
                        .ok_or_else(|| Error::misaligned(format!("no coefficients for `{name}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let (x, mut solve) =
                frechet_solve(&conditioned.iter().collect::<Vec<_>>(), &coeffs, weights, scale)?;
            solve.jitter_used += jitter;
            Ok((name.to_string(), x, solve))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut coeffs = ProjectedVector::new();
    let mut solves = BTreeMap::new();
    for (name, x, s) in solved {
        coeffs.insert(name.clone(), x);
        solves.insert(name, s);
    }
    Ok((coeffs, solves))
}

/// `alpha * T * sum_t lambda_t d_t` per layer (flat metric on the tagged basis).
pub fn tsvm_coefficients(
    projected: &[ProjectedVector],
    weights: &[f64],
    alpha: f64,
) -> Result<ProjectedVector> {
    check_weights(weights, projected.len())?;
    let scale = alpha * projected.len() as f64;
    projected[0]
        .iter()
        .map(|(name, first)| {
            let mut acc = Vector::zeros(first.len());
            for (pv, &w) in projected.iter().zip(weights) {
                let d = pv
                    .get(name)
                    .filter(|d| d.len() == first.len())
                    .ok_or_else(|| Error::misaligned(format!("coefficients for `{name}`")))?;
                acc += d * w;
            }
            Ok((name.to_string(), acc * scale))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SubspaceMerge {
    pub merged: ParameterSet,
    pub coefficients: ProjectedVector,
    pub solves: BTreeMap<String, LayerSolve>,
}

pub fn project_all(basis: &TaggedBasis, deltas: &[TaskVector]) -> Result<Vec<ProjectedVector>> {
    deltas.iter().map(|d| project_vector(basis, d)).collect()
}

/// `theta_0 + S c` on basis layers; auxiliary layers get `theta_0 + aux_scale * sum lambda delta`.
pub fn assemble_subspace_merge(
    base: &ParameterSet,
    deltas: &[TaskVector],
    basis: &TaggedBasis,
    coefficients: &ProjectedVector,
    weights: &[f64],
    aux_scale: f64,
) -> Result<ParameterSet> {
    let lifted = lift(basis, coefficients)?;
    let aux = weighted_delta_sum(base, deltas, weights, aux_scale)?;
    let mut delta = aux.clone();
    for (name, t) in lifted.iter() {
        delta.set(name.to_string(), t.clone());
    }
    base.add_delta(&delta)
}

fn check_basis(basis: &TaggedBasis, deltas: &[TaskVector]) -> Result<()> {
    if basis.tasks != deltas.len() {
        return Err(Error::misaligned(format!(
            "basis was built for {} tasks, got {} task vectors",
            basis.tasks,
            deltas.len()
        )));
    }
    Ok(())
}

pub fn merge_tsvm(
    base: &ParameterSet,
    deltas: &[TaskVector],
    basis: &TaggedBasis,
    weights: &[f64],
    alpha: f64,
) -> Result<SubspaceMerge> {
    check_basis(basis, deltas)?;
    let projected = project_all(basis, deltas)?;
    let coefficients = tsvm_coefficients(&projected, weights, alpha)?;
    let merged = assemble_subspace_merge(
        base,
        deltas,
        basis,
        &coefficients,
        weights,
        alpha * deltas.len() as f64,
    )?;
    Ok(SubspaceMerge {
        merged,
        coefficients,
        solves: BTreeMap::new(),
    })
}

fn merge_epimer(
    base: &ParameterSet,
    deltas: &[TaskVector],
    basis: &TaggedBasis,
    hessians: &[ProjectedHessians],
    weights: &[f64],
    jitter: f64,
    aggregator: Aggregator,
) -> Result<SubspaceMerge> {
    check_basis(basis, deltas)?;
    let projected = project_all(basis, deltas)?;
    let (coefficients, solves) =
        epimer_coefficients(&projected, hessians, weights, jitter, aggregator)?;
    let merged = assemble_subspace_merge(
        base,
        deltas,
        basis,
        &coefficients,
        weights,
        aggregator.scale(deltas.len()),
    )?;
    Ok(SubspaceMerge {
        merged,
        coefficients,
        solves,
    })
}

/// Per-layer subspace Fréchet mean.
pub fn merge_epimer_mean(
    base: &ParameterSet,
    deltas: &[TaskVector],
    basis: &TaggedBasis,
    hessians: &[ProjectedHessians],
    weights: &[f64],
    jitter: f64,
) -> Result<SubspaceMerge> {
    merge_epimer(base, deltas, basis, hessians, weights, jitter, Aggregator::Mean)
}

/// Sum aggregator: `alpha * T` times the Fréchet mean.
pub fn merge_epimer_sum(
    base: &ParameterSet,
    deltas: &[TaskVector],
    basis: &TaggedBasis,
    hessians: &[ProjectedHessians],
    weights: &[f64],
    alpha: f64,
    jitter: f64,
) -> Result<SubspaceMerge> {
    merge_epimer(base, deltas, basis, hessians, weights, jitter, Aggregator::Sum { alpha })
}

pub struct MergeInputs<'a> {
    pub base: &'a ParameterSet,
    pub models: &'a [ParameterSet],
    pub fishers: Option<&'a [CurvatureEstimate]>,
    /// Prebuilt basis; built from the task vectors at `config.k` when absent.
    pub basis: Option<&'a TaggedBasis>,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub merged: ParameterSet,
    pub coefficients: Option<ProjectedVector>,
    pub solves: BTreeMap<String, LayerSolve>,
}

/// Runs the configured method end to end.
pub fn run_merge(config: &MergeConfig, inputs: &MergeInputs<'_>) -> Result<MergeOutcome> {
    let tasks = inputs.models.len();
    config.validate(tasks)?;
    let deltas = inputs
        .models
        .iter()
        .map(|m| task_vector(m, inputs.base))
        .collect::<Result<Vec<_>>>()?;
    let fishers = if config.method.needs_curvature() {
        let f = inputs.fishers.ok_or_else(|| {
            Error::invalid(format!("method `{}` requires Fisher inputs", config.method))
        })?;
        if f.len() != tasks {
            return Err(Error::invalid(format!(
                "{} Fisher files for {tasks} models",
                f.len()
            )));
        }
        Some(f)
    } else {
        None
    };

    let flat = |merged| MergeOutcome {
        merged,
        coefficients: None,
        solves: BTreeMap::new(),
    };
    let owned_basis;
    let basis = if config.method.needs_basis() {
        match inputs.basis {
            Some(b) => Some(b),
            None => {
                owned_basis = build_tagged_basis(&deltas, config.k)?;
                Some(&owned_basis)
            }
        }
    } else {
        None
    };

    let w = &config.weights;
    Ok(match config.method {
        Method::Am => flat(merge_am(inputs.models, w)?),
        Method::Ta => flat(merge_ta(inputs.base, &deltas, w, config.alpha)?),
        Method::Ties => flat(merge_ties(inputs.base, &deltas, w, config.keep_fraction)?),
        Method::FisherAvg => flat(merge_fisher_avg(inputs.models, fishers.unwrap(), w)?),
        Method::Tsvm => {
            let sm = merge_tsvm(inputs.base, &deltas, basis.unwrap(), w, config.alpha)?;
            MergeOutcome {
                merged: sm.merged,
                coefficients: Some(sm.coefficients),
                solves: sm.solves,
            }
        }
        Method::EpiMerMean | Method::EpiMerSum => {
            let basis = basis.unwrap();
            let hessians = fishers
                .unwrap()
                .iter()
                .map(|f| project_diag_curvature(basis, f))
                .collect::<Result<Vec<_>>>()?;
            let sm = if config.method == Method::EpiMerMean {
                merge_epimer_mean(inputs.base, &deltas, basis, &hessians, w, config.jitter)?
            } else {
                merge_epimer_sum(inputs.base, &deltas, basis, &hessians, w, config.alpha, config.jitter)?
            };
            MergeOutcome {
                merged: sm.merged,
                coefficients: Some(sm.coefficients),
                solves: sm.solves,
            }
        }
    })
}

/// Sidecar describing a merge: method, weights, rank, alpha, jitter and per-layer jitter used.
pub fn merge_sidecar(config: &MergeConfig, outcome: &MergeOutcome) -> Sidecar {
    let mut meta = Sidecar::new();
    let weights: Vec<String> = config.weights.iter().map(|w| format!("{w:.16e}")).collect();
    meta.set("kind", "merged-model")
        .set("method", config.method)
        .set("tasks", config.weights.len())
        .set("weights", weights.join(","))
        .set("k", config.k)
        .set("alpha", format!("{:.16e}", config.alpha))
        .set("jitter", format!("{:.16e}", config.jitter));
    if config.method == Method::Ties {
        meta.set("keep_fraction", format!("{:.16e}", config.keep_fraction));
    }
    for (name, s) in &outcome.solves {
        meta.set(format!("eps_used.{name}"), format!("{:.16e}", s.jitter_used));
    }
    meta
}
