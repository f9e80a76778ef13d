//! Curvature heterogeneity, the Fréchet variance / residual energy split
//! and the excess-loss bound, evaluated on concrete instances.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::checkpoint::{task_vector, ParameterSet, TaskVector};
use crate::curvature::{ensure_psd, trace_normalize, CurvatureEstimate};
use crate::error::{Error, Result};
use crate::linalg::{spd_solve_vec, Matrix, Vector};
use crate::merge::{check_weights, frechet_solve, project_all, Aggregator};
use crate::subspace::{
    project_diag_curvature, project_vector, residual_component, ProjectedHessians,
    ProjectedVector, TaggedBasis,
};
use crate::synthetic::QuadraticSuite;

/// Slack used when certifying `actual <= bound`.
pub const BOUND_TOLERANCE: f64 = 1e-9;

fn check_layer_inputs(hessians: &[&Matrix], coeffs: &[&Vector], weights: &[f64]) -> Result<usize> {
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
    Ok(p)
}

/// `c = sum_t lambda_t (H_t - Hbar)(d_t - dbar)` and `Hbar = sum_t lambda_t H_t` for one layer.
pub fn curvature_correlation(
    hessians: &[&Matrix],
    coeffs: &[&Vector],
    weights: &[f64],
) -> Result<(Vector, Matrix)> {
    let p = check_layer_inputs(hessians, coeffs, weights)?;
    let mut hbar = Matrix::zeros(p, p);
    let mut dbar = Vector::zeros(p);
    for ((h, d), &w) in hessians.iter().zip(coeffs).zip(weights) {
        hbar += *h * w;
        dbar += *d * w;
    }
    let mut c = Vector::zeros(p);
    for ((h, d), &w) in hessians.iter().zip(coeffs).zip(weights) {
        c += (*h - &hbar) * (*d - &dbar) * w;
    }
    Ok((c, hbar))
}

/// `c^T Hbar^-1 c` for one layer.
pub fn eta(c: &Vector, hbar: &Matrix, jitter: f64) -> Result<f64> {
    if c.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let (x, _, _) = spd_solve_vec(hbar, c, jitter)?;
    Ok(c.dot(&x))
}

/// `F(x) = sum_t lambda_t (x - d_t)^T H_t (x - d_t)` by direct summation.
pub fn frechet_objective(x: &Vector, hessians: &[&Matrix], coeffs: &[&Vector], weights: &[f64]) -> f64 {
    hessians
        .iter()
        .zip(coeffs)
        .zip(weights)
        .map(|((h, d), &w)| {
            let e = x - *d;
            w * e.dot(&(*h * &e))
        })
        .sum()
}

fn layer_refs<'a>(
    name: &str,
    projected: &'a [ProjectedVector],
    hessians: &'a [ProjectedHessians],
) -> Result<(Vec<&'a Matrix>, Vec<&'a Vector>)> {
    let hs = hessians
        .iter()
        .map(|h| {
            h.get(name)
                .ok_or_else(|| Error::misaligned(format!("no projected Hessian for `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = projected
        .iter()
        .map(|p| {
            p.get(name)
                .ok_or_else(|| Error::misaligned(format!("no coefficients for `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((hs, ds))
}

/// `V_S = sum_t lambda_t (x - d_t)^T H_t (x - d_t)` summed over layers, at the merged coefficients `x`.
pub fn frechet_variance(
    merged: &ProjectedVector,
    projected: &[ProjectedVector],
    hessians: &[ProjectedHessians],
    weights: &[f64],
) -> Result<f64> {
    check_weights(weights, projected.len())?;
    if hessians.len() != projected.len() {
        return Err(Error::invalid("one projected Hessian set per task is required"));
    }
    let mut total = 0.0;
    for (name, x) in merged.iter() {
        let (hs, ds) = layer_refs(name, projected, hessians)?;
        check_layer_inputs(&hs, &ds, weights)?;
        if x.len() != ds[0].len() {
            return Err(Error::misaligned(format!("merged coefficients for `{name}`")));
        }
        total += frechet_objective(x, &hs, &ds, weights);
    }
    Ok(total)
}

fn residual_energy_shifted(
    deltas: &[TaskVector],
    basis: &TaggedBasis,
    fishers: &[CurvatureEstimate],
    weights: &[f64],
    shift: f64,
) -> Result<f64> {
    check_weights(weights, deltas.len())?;
    if fishers.len() != deltas.len() {
        return Err(Error::invalid("one Fisher estimate per task is required"));
    }
    let mut total = 0.0;
    for ((delta, fisher), &w) in deltas.iter().zip(fishers).zip(weights) {
        fisher.check_matches(delta)?;
        let resid = residual_component(basis, delta)?;
        for name in basis.layer_names() {
            let r = resid.get(name).unwrap().data();
            let v = fisher.values().get(name).unwrap().data();
            total += w * r.iter().zip(v).map(|(r, v)| (v + shift) * r * r).sum::<f64>();
        }
    }
    Ok(total)
}

/// `R_S = sum_t lambda_t sum_coords v_t (delta_t^perp)^2` over the basis layers.
///
/// Layers outside the basis are merged outside the subspace and do not enter `R_S`.
pub fn residual_energy(
    deltas: &[TaskVector],
    basis: &TaggedBasis,
    fishers: &[CurvatureEstimate],
    weights: &[f64],
) -> Result<f64> {
    residual_energy_shifted(deltas, basis, fishers, weights, 0.0)
}

/// `1/2 (sqrt(V_S) + sqrt(R_S))^2`, with tiny negative round-off clamped to zero.
pub fn bound_value(v_s: f64, r_s: f64) -> f64 {
    let s = v_s.max(0.0).sqrt() + r_s.max(0.0).sqrt();
    0.5 * s * s
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostics {
    pub name: String,
    pub c: Vector,
    pub mean_hessian: Matrix,
    pub eta: f64,
    /// Relative residual of the Fréchet-mean solve.
    pub solve_residual: f64,
    pub jitter_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    /// Aggregator whose coefficients `V_S` is evaluated at.
    pub aggregator: &'static str,
    /// `sum_layers c^T Hbar^-1 c`.
    pub eta: f64,
    /// `eta` after trace-normalizing every projected Hessian.
    pub eta_normalized: Option<f64>,
    /// `F(d_I) - F(d_H)` by direct evaluation of the objective.
    pub advantage: f64,
    /// `F` at the weighted average of projected task vectors.
    pub objective_flat: f64,
    /// `F` at the curvature-aware mean.
    pub objective_curved: f64,
    pub v_s: f64,
    pub r_s: f64,
    pub bound_value: f64,
    /// Exact excess loss; only available on quadratic suites.
    pub actual_excess_loss: Option<f64>,
    pub bound_holds: Option<bool>,
    /// Taylor remainder; identically zero on quadratic tasks.
    pub r3_note: f64,
    pub layers: Vec<LayerDiagnostics>,
}

impl DiagnosticsReport {
    /// `max(1, bound, |actual|)`, the scale for relative tolerances.
    pub fn scale(&self) -> f64 {
        1f64.max(self.bound_value)
            .max(self.actual_excess_loss.map_or(0.0, f64::abs))
    }

    /// `bound - actual`, when the actual excess loss is known.
    pub fn slack(&self) -> Option<f64> {
        self.actual_excess_loss.map(|a| self.bound_value - a)
    }

    /// Fixed-key-order JSON; floats carry 17 significant digits, non-finite values become `null`.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        s.push_str("{\n");
        let _ = writeln!(s, "  \"aggregator\": \"{}\",", self.aggregator);
        let fields: [(&str, Option<f64>); 10] = [
            ("eta", Some(self.eta)),
            ("eta_normalized", self.eta_normalized),
            ("advantage", Some(self.advantage)),
            ("objective_flat", Some(self.objective_flat)),
            ("objective_curved", Some(self.objective_curved)),
            ("v_s", Some(self.v_s)),
            ("r_s", Some(self.r_s)),
            ("bound_value", Some(self.bound_value)),
            ("actual_excess_loss", self.actual_excess_loss),
            ("r3_note", Some(self.r3_note)),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "  \"{k}\": {},", json_opt(v));
        }
        let holds = self.bound_holds.map_or("null".to_string(), |b| b.to_string());
        let _ = writeln!(s, "  \"bound_holds\": {holds},");
        s.push_str("  \"layers\": [");
        for (i, l) in self.layers.iter().enumerate() {
            s.push_str(if i == 0 { "\n" } else { ",\n" });
            s.push_str("    {\n");
            let _ = writeln!(s, "      \"name\": {},", json_string(&l.name));
            let _ = writeln!(s, "      \"dim\": {},", l.c.len());
            let _ = writeln!(s, "      \"eta\": {},", json_num(l.eta));
            let _ = writeln!(s, "      \"solve_residual\": {},", json_num(l.solve_residual));
            let _ = writeln!(s, "      \"jitter_used\": {},", json_num(l.jitter_used));
            let _ = writeln!(s, "      \"c\": {},", json_array(l.c.iter()));
            s.push_str("      \"mean_hessian\": [");
            for r in 0..l.mean_hessian.nrows() {
                if r > 0 {
                    s.push_str(", ");
                }
                s.push_str(&json_array(l.mean_hessian.row(r).iter()));
            }
            s.push_str("]\n    }");
        }
        if !self.layers.is_empty() {
            s.push_str("\n  ");
        }
        s.push_str("]\n}\n");
        s
    }
}

/// 17 significant digits.
pub fn json_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".to_string()
    }
}

fn json_opt(x: Option<f64>) -> String {
    x.map_or("null".to_string(), json_num)
}

fn json_array<'a>(xs: impl Iterator<Item = &'a f64>) -> String {
    let items: Vec<String> = xs.map(|&x| json_num(x)).collect();
    format!("[{}]", items.join(", "))
}

fn json_string(s: &str) -> String {
    let mut out = String::from("\"");
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

struct LayerAnalysis {
    diag: LayerDiagnostics,
    flat: f64,
    curved: f64,
    merged: Vector,
    eta_normalized: Option<f64>,
}

fn analyze_layer(
    name: &str,
    hs: &[&Matrix],
    ds: &[&Vector],
    weights: &[f64],
    scale: f64,
    normalize: bool,
) -> Result<LayerAnalysis> {
    let (c, hbar) = curvature_correlation(hs, ds, weights)?;
    let layer_eta = eta(&c, &hbar, 0.0)?;
    let (d_h, solve) = frechet_solve(hs, ds, weights, 1.0)?;
    let mut d_i = Vector::zeros(d_h.len());
    for (d, &w) in ds.iter().zip(weights) {
        d_i += *d * w;
    }
    let eta_normalized = if normalize {
        let normed = hs.iter().map(|h| trace_normalize(h)).collect::<Result<Vec<_>>>();
        match normed {
            Ok(n) => {
                let refs: Vec<&Matrix> = n.iter().collect();
                let (cn, hn) = curvature_correlation(&refs, ds, weights)?;
                Some(eta(&cn, &hn, 0.0)?)
            }
            Err(_) => None,
        }
    } else {
        None
    };
    Ok(LayerAnalysis {
        flat: frechet_objective(&d_i, hs, ds, weights),
        curved: frechet_objective(&d_h, hs, ds, weights),
        merged: &d_h * scale,
        eta_normalized,
        diag: LayerDiagnostics {
            name: name.to_string(),
            c,
            mean_hessian: hbar,
            eta: layer_eta,
            solve_residual: solve.relative_residual,
            jitter_used: solve.jitter_used,
        },
    })
}

/// Everything except `R_S`, from projected task vectors and (already conditioned) projected Hessians.
fn analyze(
    projected: &[ProjectedVector],
    hessians: &[ProjectedHessians],
    weights: &[f64],
    aggregator: Aggregator,
    normalize: bool,
) -> Result<(DiagnosticsReport, ProjectedVector)> {
    check_weights(weights, projected.len())?;
    if hessians.len() != projected.len() {
        return Err(Error::invalid("one projected Hessian set per task is required"));
    }
    let scale = aggregator.scale(projected.len());
    let names: Vec<&str> = projected[0].iter().map(|(n, _)| n).collect();
    let layers = names
        .par_iter()
        .map(|&name| {
            let (hs, ds) = layer_refs(name, projected, hessians)?;
            analyze_layer(name, &hs, &ds, weights, scale, normalize)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut merged = ProjectedVector::new();
    let (mut eta_sum, mut flat, mut curved) = (0.0, 0.0, 0.0);
    let mut eta_norm = normalize.then_some(0.0);
    for l in &layers {
        eta_sum += l.diag.eta;
        flat += l.flat;
        curved += l.curved;
        eta_norm = match (eta_norm, l.eta_normalized) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        };
        merged.insert(l.diag.name.clone(), l.merged.clone());
    }
    let v_s = frechet_variance(&merged, projected, hessians, weights)?;
    let report = DiagnosticsReport {
        aggregator: aggregator.as_str(),
        eta: eta_sum,
        eta_normalized: eta_norm,
        advantage: flat - curved,
        objective_flat: flat,
        objective_curved: curved,
        v_s,
        r_s: 0.0,
        bound_value: bound_value(v_s, 0.0),
        actual_excess_loss: None,
        bound_holds: None,
        r3_note: 0.0,
        layers: layers.into_iter().map(|l| l.diag).collect(),
    };
    Ok((report, merged))
}

/// Diagnostics from task vectors, Fisher diagonals and a tagged basis.
///
/// Projected Hessians are conditioned with `jitter`; `R_S` uses the same
/// shifted metric `v_t + jitter` so that both terms refer to one ambient metric.
pub fn diagnose(
    deltas: &[TaskVector],
    fishers: &[CurvatureEstimate],
    basis: &TaggedBasis,
    weights: &[f64],
    jitter: f64,
    aggregator: Aggregator,
) -> Result<DiagnosticsReport> {
    check_weights(weights, deltas.len())?;
    if fishers.len() != deltas.len() {
        return Err(Error::invalid(format!(
            "{} Fisher estimates for {} task vectors",
            fishers.len(),
            deltas.len()
        )));
    }
    let projected = project_all(basis, deltas)?;
    let hessians = fishers
        .iter()
        .map(|f| {
            project_diag_curvature(basis, f).map(|hs| {
                hs.into_iter()
                    .map(|(n, h)| (n, ensure_psd(&h, jitter)))
                    .collect::<BTreeMap<_, _>>()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut report, _) = analyze(&projected, &hessians, weights, aggregator, true)?;
    report.r_s = residual_energy_shifted(deltas, basis, fishers, weights, jitter)?;
    report.bound_value = bound_value(report.v_s, report.r_s);
    Ok(report)
}

/// Certifies the excess-loss bound for `theta_m` on a quadratic suite.
///
/// Curvature is exact and unjittered. On basis layers the merged point is
/// represented by its projection onto the basis; layers outside the basis
/// enter `V_S` in full coordinates (the identity basis), so `R_S` only
/// collects the basis-layer residuals. `V_S` and the curvature advantage
/// refer to the mean solution's objective; the bound is checked at `theta_m`.
pub fn certify_bound(
    suite: &QuadraticSuite,
    basis: &TaggedBasis,
    theta_m: &ParameterSet,
    weights: &[f64],
) -> Result<DiagnosticsReport> {
    let deltas = suite.deltas();
    check_weights(weights, deltas.len())?;
    let projected = project_all(basis, &deltas)?;
    let hessians = suite
        .tasks
        .iter()
        .map(|t| t.projected_hessians(basis))
        .collect::<Result<Vec<_>>>()?;
    let (mut report, _) = analyze(&projected, &hessians, weights, Aggregator::Mean, false)?;

    let delta_m = task_vector(theta_m, &suite.base)?;
    let coeffs = project_vector(basis, &delta_m)?;
    let mut v_s = frechet_variance(&coeffs, &projected, &hessians, weights)?;
    let mut r_s = 0.0;
    for ((task, delta), &w) in suite.tasks.iter().zip(&deltas).zip(weights) {
        let resid = residual_component(basis, delta)?;
        for (name, t) in resid.iter() {
            let h = &task.hessian[name];
            if basis.contains(name) {
                r_s += w * h.quad(t.data());
            } else {
                let dm = delta_m.get(name).unwrap().data();
                let e: Vec<f64> = dm.iter().zip(t.data()).map(|(a, b)| a - b).collect();
                v_s += w * h.quad(&e);
            }
        }
    }
    let actual = suite.excess_loss(theta_m, weights)?;
    report.v_s = v_s;
    report.r_s = r_s;
    report.bound_value = bound_value(v_s, r_s);
    report.actual_excess_loss = Some(actual);
    let scale = report.scale();
    report.bound_holds = Some(actual <= report.bound_value + BOUND_TOLERANCE * scale);
    Ok(report)
}
