//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines appear in `cargo test`
//! output. Soft criteria print `FAIL (soft, flagged for review)` without
//! failing the target.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use epimerge_core::curvature::subsample_stream;
use epimerge_core::diagnostics::certify_bound;
use epimerge_core::linalg::{Matrix, Vector};
use epimerge_core::merge::{
    epimer_coefficients, merge_epimer_mean, merge_epimer_sum, merge_ta, merge_tsvm, project_all,
    uniform_weights, Aggregator, DEFAULT_JITTER,
};
use epimerge_core::subspace::{
    lift, project_diag_curvature, project_vector, LayerBasis, ProjectedHessians, ProjectedVector,
};
use epimerge_core::synthetic::{
    accuracy_on, gen_in_subspace_suite, gen_mlp_tasks, gen_quadratic_suite, mlp_loss_grad,
    FinetuneConfig, LayerHessian, MlpExperiment, MlpSuiteConfig, QuadraticSuite, QuadraticTask,
};
use epimerge_core::{
    accumulate_fisher, build_tagged_basis, diagnose, run_merge, task_vector, CurvatureEstimate,
    CurvatureSource, MergeConfig, MergeInputs, Method, ParameterSet, TaggedBasis,
    TaskVector, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the oracle independent of the library's sampler.
    let u1: f64 = r.random_range(f64::EPSILON..1.0);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_weights(t: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..t).map(|_| r.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / s).collect();
    let head: f64 = w[..t - 1].iter().sum();
    w[t - 1] = 1.0 - head;
    w
}

fn random_spd(n: usize, r: &mut ChaCha8Rng) -> Matrix {
    let a = Matrix::from_fn(n, n, |_, _| gauss(r));
    &a * a.transpose() + Matrix::identity(n, n) * 0.1
}

fn random_set(shapes: &[(&str, &[usize])], r: &mut ChaCha8Rng) -> ParameterSet {
    shapes
        .iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            (name.to_string(), Tensor::from_f64(shape.to_vec(), (0..n).map(|_| gauss(r)).collect()))
        })
        .collect()
}

fn random_deltas(like: &ParameterSet, t: usize, r: &mut ChaCha8Rng) -> Vec<TaskVector> {
    (0..t).map(|_| TaskVector::from_set(random_set_like(like, r))).collect()
}

fn random_set_like(like: &ParameterSet, r: &mut ChaCha8Rng) -> ParameterSet {
    like.iter()
        .map(|(n, t)| (n.to_string(), t.with_data((0..t.numel()).map(|_| gauss(r)).collect())))
        .collect()
}

/// `F(x) = sum_t lambda_t (x - d_t)^T H_t (x - d_t)` over all layers.
fn objective(x: &ProjectedVector, ds: &[ProjectedVector], hs: &[ProjectedHessians], w: &[f64]) -> f64 {
    let mut f = 0.0;
    for (name, xv) in x.iter() {
        for t in 0..w.len() {
            let e = xv - ds[t].get(name).unwrap();
            f += w[t] * e.dot(&(&hs[t][name] * &e));
        }
    }
    f
}

struct LayerOracle {
    flat: Vector,
    curved: Vector,
    eta: f64,
    residual: f64,
}

/// Dense Cholesky solve of the per-layer normal equations.
fn layer_oracle(name: &str, ds: &[ProjectedVector], hs: &[ProjectedHessians], w: &[f64]) -> LayerOracle {
    let p = ds[0].get(name).unwrap().len();
    let mut hbar = Matrix::zeros(p, p);
    let mut dbar = Vector::zeros(p);
    let mut b = Vector::zeros(p);
    for t in 0..w.len() {
        let (h, d) = (&hs[t][name], ds[t].get(name).unwrap());
        hbar += h * w[t];
        dbar += d * w[t];
        b += h * d * w[t];
    }
    let c = &b - &hbar * &dbar;
    let chol = hbar.clone().cholesky().expect("mean Hessian is SPD");
    let curved = chol.solve(&b);
    let residual = (&hbar * &curved - &b).norm() / (hbar.norm() * curved.norm() + b.norm()).max(f64::MIN_POSITIVE);
    LayerOracle { eta: c.dot(&chol.solve(&c)), flat: dbar, curved, residual }
}

struct Instance {
    suite: QuadraticSuite,
    basis: TaggedBasis,
    weights: Vec<f64>,
    projected: Vec<ProjectedVector>,
    hessians: Vec<ProjectedHessians>,
}

impl Instance {
    fn new(suite: QuadraticSuite, k: usize, weights: Vec<f64>) -> Self {
        let basis = build_tagged_basis(&suite.deltas(), k).unwrap();
        let projected = project_all(&basis, &suite.deltas()).unwrap();
        let hessians = suite.tasks.iter().map(|t| t.projected_hessians(&basis).unwrap()).collect();
        Instance { suite, basis, weights, projected, hessians }
    }

    fn oracles(&self) -> BTreeMap<String, LayerOracle> {
        self.basis
            .layer_names()
            .map(|n| (n.to_string(), layer_oracle(n, &self.projected, &self.hessians, &self.weights)))
            .collect()
    }

    fn f(&self, x: &ProjectedVector) -> f64 {
        objective(x, &self.projected, &self.hessians, &self.weights)
    }

    fn mean_merge(&self) -> ParameterSet {
        merge_epimer_mean(&self.suite.base, &self.suite.deltas(), &self.basis, &self.hessians, &self.weights, 0.0)
            .unwrap()
            .merged
    }
}

/// 200 seeded instances: T in 1..=8, h in {0, 0.5, 1}, subspace dimension kT <= 16.
fn random_instance(i: u64) -> Instance {
    let t = 1 + (i % 8) as usize;
    let h = [0.0, 0.5, 1.0][(i % 3) as usize];
    let k = (10 / t).max(1);
    let suite = gen_quadratic_suite(i, &[(16, 16), (12, 10)], t, h).unwrap();
    let weights = random_weights(t, &mut rng(0xA11CE + i));
    Instance::new(suite, k, weights)
}

fn pick<'a>(x: &'a BTreeMap<String, LayerOracle>, f: impl Fn(&LayerOracle) -> &Vector) -> ProjectedVector {
    let mut out = ProjectedVector::new();
    for (n, o) in x {
        out.insert(n.clone(), f(o).clone());
    }
    out
}

struct Verdict {
    pass: bool,
    soft: bool,
    detail: String,
}

impl Verdict {
    fn hard(pass: bool, detail: String) -> Self {
        Verdict { pass, soft: false, detail }
    }
}

fn within(elapsed: Duration, budget: Duration) -> (bool, String) {
    (elapsed < budget, format!("{:.2} s of {} s budget", elapsed.as_secs_f64(), budget.as_secs()))
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let (mut worst, mut min_eta) = (0.0f64, f64::INFINITY);
    for i in 0..200 {
        let inst = random_instance(i);
        let o = inst.oracles();
        let f_i = inst.f(&pick(&o, |l| &l.flat));
        let f_h = inst.f(&pick(&o, |l| &l.curved));
        let eta: f64 = o.values().map(|l| l.eta).sum();
        let report = certify_bound(&inst.suite, &inst.basis, &inst.mean_merge(), &inst.weights).unwrap();
        let tol = 1e-9 * f_i.max(1.0);
        worst = worst.max(((f_i - f_h) - eta).abs() / tol);
        worst = worst.max(((f_i - f_h) - report.eta).abs() / tol);
        worst = worst.max((report.advantage - eta).abs() / tol);
        min_eta = min_eta.min(eta).min(report.eta);
    }
    let (fast, time) = within(start.elapsed(), Duration::from_secs(5));
    Verdict::hard(
        worst <= 1.0 && min_eta >= -1e-12 && fast,
        format!("200 instances, worst |gap - eta| / tol = {worst:.2e}, min eta = {min_eta:.3e}, {time}"),
    )
}

fn criterion_2() -> Verdict {
    let (mut homog, mut ident) = (0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let t = 2 + (seed % 4) as usize;
        let w = random_weights(t, &mut rng(seed));
        let mut suite = gen_quadratic_suite(seed, &[(8, 8), (7, 9)], t, 1.0).unwrap();
        let shared = suite.tasks[0].hessian.clone();
        for task in &mut suite.tasks {
            task.hessian = shared.clone();
        }
        let deltas = suite.deltas();
        let basis = build_tagged_basis(&deltas, 1).unwrap();
        let fishers: Vec<_> = suite.tasks.iter().map(|x| x.curvature().unwrap()).collect();
        let rep = diagnose(&deltas, &fishers, &basis, &w, 0.0, Aggregator::Mean).unwrap();
        homog = homog.max(rep.eta);

        let mut suite = gen_quadratic_suite(seed, &[(8, 8), (7, 9)], t, 1.0).unwrap();
        let optimum = suite.tasks[0].optimum.clone();
        for task in &mut suite.tasks {
            task.optimum = optimum.clone();
        }
        let deltas = suite.deltas();
        let basis = build_tagged_basis(&deltas, 1).unwrap();
        let fishers: Vec<_> = suite.tasks.iter().map(|x| x.curvature().unwrap()).collect();
        let rep = diagnose(&deltas, &fishers, &basis, &w, 0.0, Aggregator::Mean).unwrap();
        ident = ident.max(rep.eta);
    }
    Verdict::hard(
        homog <= 1e-12 && ident <= 1e-12,
        format!("50 seeds, max eta homogeneous = {homog:.2e}, identical task vectors = {ident:.2e}"),
    )
}

fn colinear_instance(seed: u64) -> (QuadraticSuite, TaggedBasis, ParameterSet) {
    // H_t = h h^T with h = S a_t + rho_t and residual delta components chosen
    // so the Cauchy-Schwarz steps in the bound are tight for one kappa.
    let (rows, cols, t) = (4usize, 4usize, 2usize);
    let mut r = rng(700 + seed);
    let u = Matrix::from_fn(rows, t, |_, _| gauss(&mut r)).qr().q();
    let v = Matrix::from_fn(cols, t, |_, _| gauss(&mut r)).qr().q();
    let layer = LayerBasis { u_atoms: u, v_atoms: v, tags: (0..t).collect() };
    let s = explicit_s(&layer);
    let basis = TaggedBasis::from_layers(1, t, [("w".to_string(), layer)].into_iter().collect());
    let perp = Matrix::identity(rows * cols, rows * cols) - &s * s.transpose();
    let kappa = 0.3 + seed as f64 * 0.1;
    let x = Vector::from_fn(t, |_, _| gauss(&mut r));
    let as_set = |v: &Vector| -> ParameterSet {
        [("w".to_string(), Tensor::from_f64(vec![rows, cols], v.iter().copied().collect()))]
            .into_iter()
            .collect()
    };
    let tasks = (0..t)
        .map(|_| {
            let x_t = Vector::from_fn(t, |_, _| gauss(&mut r));
            let a = Vector::from_fn(t, |_, _| gauss(&mut r));
            let rho = &perp * Vector::from_fn(rows * cols, |_, _| gauss(&mut r));
            let h = &s * &a + &rho;
            let scale = -kappa * a.dot(&(&x - &x_t)) / rho.norm_squared();
            QuadraticTask {
                optimum: as_set(&(&s * &x_t + &rho * scale)),
                hessian: [("w".to_string(), LayerHessian::Dense(&h * h.transpose()))].into_iter().collect(),
                floor: 0.0,
            }
        })
        .collect();
    let theta = as_set(&(&s * &x));
    (QuadraticSuite { base: as_set(&Vector::zeros(rows * cols)), tasks }, basis, theta)
}

fn criterion_3() -> Verdict {
    let mut violations = 0;
    let mut count = 0;
    for i in 0..200u64 {
        let inst = if i % 2 == 0 {
            random_instance(i)
        } else {
            let t = 1 + (i % 4) as usize;
            let suite = gen_in_subspace_suite(i, &[(8, 8), (9, 8)], t, 2, [0.0, 0.5, 1.0][(i % 3) as usize]).unwrap();
            Instance::new(suite, 2, random_weights(t, &mut rng(i)))
        };
        let t = inst.weights.len();
        let deltas = inst.suite.deltas();
        let candidates = [
            inst.mean_merge(),
            merge_epimer_sum(&inst.suite.base, &deltas, &inst.basis, &inst.hessians, &inst.weights, 1.0 / (t as f64).sqrt(), 0.0)
                .unwrap()
                .merged,
            merge_ta(&inst.suite.base, &deltas, &inst.weights, 1.0).unwrap(),
        ];
        for theta in &candidates {
            let rep = certify_bound(&inst.suite, &inst.basis, theta, &inst.weights).unwrap();
            let actual: f64 = inst
                .suite
                .tasks
                .iter()
                .zip(&inst.weights)
                .map(|(task, w)| w * (task.loss(theta).unwrap() - task.floor))
                .sum();
            let s = rep.v_s.max(0.0).sqrt() + rep.r_s.max(0.0).sqrt();
            let bound = 0.5 * s * s;
            count += 1;
            if actual > bound + 1e-9 * bound.max(actual).max(1.0) {
                violations += 1;
            }
        }
    }
    let mut worst_slack = 0.0f64;
    for seed in 0..20 {
        let (suite, basis, theta) = colinear_instance(seed);
        let w = uniform_weights(2);
        let rep = certify_bound(&suite, &basis, &theta, &w).unwrap();
        let actual = suite.excess_loss(&theta, &w).unwrap();
        worst_slack = worst_slack.max((rep.bound_value - actual).abs() / rep.scale());
    }
    Verdict::hard(
        violations == 0 && worst_slack <= 1e-6,
        format!("{violations} violations over {count} merged points; colinear slack / scale max {worst_slack:.2e}"),
    )
}

fn criterion_4() -> Verdict {
    let (mut worst_res, mut non_increase, mut tried) = (0.0f64, 0, 0);
    for i in 0..200 {
        let inst = random_instance(i);
        let o = inst.oracles();
        let deltas = inst.suite.deltas();
        let m = merge_epimer_mean(&inst.suite.base, &deltas, &inst.basis, &inst.hessians, &inst.weights, 0.0).unwrap();
        for s in m.solves.values() {
            worst_res = worst_res.max(s.relative_residual);
        }
        for l in o.values() {
            worst_res = worst_res.max(l.residual);
        }
        let star = m.coefficients;
        let f_star = inst.f(&star);
        let mut r = rng(0xBEEF + i);
        for _ in 0..50 {
            let mut moved = ProjectedVector::new();
            for (name, x) in star.iter() {
                let dir = Vector::from_fn(x.len(), |_, _| gauss(&mut r));
                moved.insert(name, x + dir.normalize() * 1e-3 / (star.len() as f64).sqrt());
            }
            tried += 1;
            if inst.f(&moved) <= f_star {
                non_increase += 1;
            }
        }
    }
    Verdict::hard(
        worst_res <= 1e-10 && non_increase == 0,
        format!("max relative solve residual {worst_res:.2e}; {non_increase} of {tried} perturbations did not increase F"),
    )
}

/// Explicit `vec(u_i v_i^T)` columns in row-major order.
fn explicit_s(lb: &LayerBasis) -> Matrix {
    let (rows, cols) = (lb.u_atoms.nrows(), lb.v_atoms.nrows());
    let mut s = Matrix::zeros(rows * cols, lb.tags.len());
    for i in 0..lb.tags.len() {
        for r in 0..rows {
            for c in 0..cols {
                s[(r * cols + c, i)] = lb.u_atoms[(r, i)] * lb.v_atoms[(c, i)];
            }
        }
    }
    s
}

fn vec_rm(m: &Matrix) -> Vector {
    Vector::from_fn(m.nrows() * m.ncols(), |i, _| m[(i / m.ncols(), i % m.ncols())])
}

fn full_space(like: &ParameterSet, tasks: usize) -> TaggedBasis {
    let layers = like
        .iter()
        .map(|(name, t)| {
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let p = rows * cols;
            let lb = LayerBasis {
                u_atoms: Matrix::from_fn(rows, p, |r, i| f64::from(u8::from(i / cols == r))),
                v_atoms: Matrix::from_fn(cols, p, |c, i| f64::from(u8::from(i % cols == c))),
                tags: vec![0; p],
            };
            (name.to_string(), lb)
        })
        .collect();
    TaggedBasis::from_layers(1, tasks, layers)
}

fn identity_hessians(basis: &TaggedBasis) -> ProjectedHessians {
    basis.layers().map(|(n, lb)| (n.to_string(), Matrix::identity(lb.tags.len(), lb.tags.len()))).collect()
}

fn max_diff(a: &ParameterSet, b: &ParameterSet) -> f64 {
    a.flatten().iter().zip(b.flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_5() -> Verdict {
    let (mut tsvm, mut ta, mut fisher) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let t = 2 + (seed % 3) as usize;
        let w = random_weights(t, &mut r);
        let alpha = r.random_range(0.1..1.5);

        let like = random_set(&[("w1", &[12, 10]), ("b1", &[12]), ("w2", &[9, 12])], &mut r);
        let deltas = random_deltas(&like, t, &mut r);
        let basis = build_tagged_basis(&deltas, 2).unwrap();
        let hs = vec![identity_hessians(&basis); t];
        let a = merge_epimer_sum(&like, &deltas, &basis, &hs, &w, alpha, 0.0).unwrap().merged;
        let b = merge_tsvm(&like, &deltas, &basis, &w, alpha).unwrap().merged;
        tsvm = tsvm.max(max_diff(&a, &b));

        // Full space, at most 100 parameters.
        let small = random_set(&[("a", &[6, 5]), ("b", &[4, 4])], &mut r);
        let deltas = random_deltas(&small, t, &mut r);
        let basis = full_space(&small, t);
        let hs = vec![identity_hessians(&basis); t];
        let mean = merge_epimer_mean(&small, &deltas, &basis, &hs, &w, 0.0).unwrap().merged;
        ta = ta.max(max_diff(&mean, &merge_ta(&small, &deltas, &w, 1.0).unwrap()));
        let sum = merge_epimer_sum(&small, &deltas, &basis, &hs, &w, alpha, 0.0).unwrap().merged;
        ta = ta.max(max_diff(&sum, &merge_ta(&small, &deltas, &w, alpha * t as f64).unwrap()));

        let fishers: Vec<CurvatureEstimate> = (0..t)
            .map(|_| {
                let v = small.map(|_| 0.0);
                let vals: Vec<f64> = (0..small.numel()).map(|_| r.random_range(0.05..3.0)).collect();
                CurvatureEstimate::new(v.unflatten_like(&vals).unwrap(), 1, CurvatureSource::LoadedFile).unwrap()
            })
            .collect();
        let hs: Vec<_> = fishers.iter().map(|f| project_diag_curvature(&basis, f).unwrap()).collect();
        let merged = merge_epimer_mean(&small, &deltas, &basis, &hs, &w, 0.0).unwrap().merged;
        let base = small.flatten();
        let got = merged.flatten();
        for j in 0..base.len() {
            let (mut num, mut den) = (0.0, 0.0);
            for s in 0..t {
                let v = fishers[s].values().flatten()[j];
                num += w[s] * v * deltas[s].flatten()[j];
                den += w[s] * v;
            }
            fisher = fisher.max((got[j] - (base[j] + num / den)).abs());
        }
    }
    Verdict::hard(
        tsvm <= 1e-12 && ta <= 1e-12 && fisher <= 1e-12,
        format!("max |diff|: identity metric vs TSV-M {tsvm:.2e}, S = I vs TA {ta:.2e}, diag Fisher vs formula {fisher:.2e}"),
    )
}

fn criterion_6() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut r = rng(0x600 + seed);
        let t = 1 + (seed % 6) as usize;
        let p = 1 + (seed % 7) as usize;
        let w = random_weights(t, &mut r);
        let alpha = r.random_range(0.05..2.0);
        let mut projected = vec![ProjectedVector::new(); t];
        let mut hessians: Vec<ProjectedHessians> = vec![BTreeMap::new(); t];
        for name in ["l0", "l1"] {
            for s in 0..t {
                projected[s].insert(name, Vector::from_fn(p, |_, _| gauss(&mut r)));
                hessians[s].insert(name.to_string(), random_spd(p, &mut r));
            }
        }
        let (mean, _) = epimer_coefficients(&projected, &hessians, &w, 0.0, Aggregator::Mean).unwrap();
        let (sum, _) = epimer_coefficients(&projected, &hessians, &w, 0.0, Aggregator::Sum { alpha }).unwrap();
        for (name, m) in mean.iter() {
            let expected = m * (alpha * t as f64);
            let got = sum.get(name).unwrap();
            worst = worst.max((got - &expected).amax() / expected.amax().max(1.0));
        }
    }
    Verdict::hard(worst <= 1e-12, format!("50 instances, max relative deviation from alpha*T*mean {worst:.2e}"))
}

fn criterion_7() -> Verdict {
    let (mut gram, mut round, mut proj, mut curv) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..30u64 {
        let mut r = rng(0x700 + seed);
        let t = 1 + (seed % 3) as usize;
        let k = 6 / t;
        let like = random_set(&[("a", &[8, 7]), ("b", &[6, 8]), ("c", &[6, 6])], &mut r);
        let deltas = random_deltas(&like, t, &mut r);
        let basis = build_tagged_basis(&deltas, k).unwrap();
        let fisher = CurvatureEstimate::new(
            like.map(|_| 0.0).unflatten_like(&(0..like.numel()).map(|_| r.random_range(0.0..2.0)).collect::<Vec<_>>()).unwrap(),
            1,
            CurvatureSource::LoadedFile,
        )
        .unwrap();
        let restricted = project_diag_curvature(&basis, &fisher).unwrap();
        let projected = project_vector(&basis, &deltas[0]).unwrap();
        for (name, lb) in basis.layers() {
            let s = explicit_s(lb);
            let dim = lb.tags.len();
            gram = gram.max((s.transpose() * &s - Matrix::identity(dim, dim)).amax());
            let d = vec_rm(&deltas[0].get(name).unwrap().to_matrix().unwrap());
            proj = proj.max((projected.get(name).unwrap() - s.transpose() * &d).amax());
            let v = vec_rm(&fisher.values().get(name).unwrap().to_matrix().unwrap());
            let oracle = s.transpose() * Matrix::from_diagonal(&v) * &s;
            curv = curv.max((&restricted[name] - oracle).amax());
        }
        let mut c = ProjectedVector::new();
        for (name, lb) in basis.layers() {
            c.insert(name, Vector::from_fn(lb.tags.len(), |_, _| gauss(&mut r)));
        }
        let back = project_vector(&basis, &lift(&basis, &c).unwrap()).unwrap();
        round = round.max(back.max_abs_diff(&c));
    }
    Verdict::hard(
        gram <= 1e-10 && round <= 1e-12 && proj <= 1e-10 && curv <= 1e-10,
        format!("Gram - I {gram:.2e}, project(lift) - id {round:.2e}, project vs S^T {proj:.2e}, curvature vs S^T diag S {curv:.2e}"),
    )
}

fn criterion_8() -> Verdict {
    let cfg = MlpSuiteConfig { seed: 8, tasks: 1, samples: 200, ..MlpSuiteConfig::default() };
    let (base, tasks) = gen_mlp_tasks(&cfg).unwrap();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for probe in 0..50u64 {
        let mut r = rng(0x800 + probe);
        let sample = tasks[0].train.sample(probe as usize);
        let theta = base.add_delta(&TaskVector::from_set(random_set_like(&base, &mut r)).scale(0.1)).unwrap();
        let dir = TaskVector::from_set(random_set_like(&base, &mut r));
        let (_, g) = mlp_loss_grad(&theta, sample).unwrap();
        let loss = |s: f64| mlp_loss_grad(&theta.add_delta(&dir.scale(s)).unwrap(), sample).unwrap().0;
        let fd = (loss(step) - loss(-step)) / (2.0 * step);
        let an: f64 = g.flatten().iter().zip(dir.flatten()).map(|(a, b)| a * b).sum();
        worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
    }
    Verdict::hard(worst <= 1e-5, format!("50 probes, max relative error {worst:.2e}"))
}

const SEEDS: u64 = 10;
const ALPHAS: [f64; 6] = [0.2, 0.3, 0.4, 0.5, 0.7, 1.0];

struct Desk {
    exp: MlpExperiment,
    deltas: Vec<TaskVector>,
    basis: TaggedBasis,
    seed: u64,
}

impl Desk {
    fn fishers(&self, fraction: f64) -> Vec<CurvatureEstimate> {
        self.exp
            .gradients
            .iter()
            .map(|g| accumulate_fisher(subsample_stream(g, fraction, self.seed).unwrap().iter()).unwrap())
            .collect()
    }

    fn merge(&self, method: Method, alpha: f64, fishers: &[CurvatureEstimate]) -> ParameterSet {
        let mut config = MergeConfig::new(method, self.exp.models.len());
        config.k = 2;
        config.alpha = alpha;
        let inputs = MergeInputs {
            base: &self.exp.base,
            models: &self.exp.models,
            fishers: Some(fishers),
            basis: Some(&self.basis),
        };
        run_merge(&config, &inputs).unwrap().merged
    }

    fn accuracy(&self, theta: &ParameterSet, test: bool) -> (f64, f64) {
        let acc: Vec<f64> = self
            .exp
            .tasks
            .iter()
            .map(|t| accuracy_on(theta, if test { &t.test } else { &t.train }).unwrap())
            .collect();
        (acc.iter().sum::<f64>() / acc.len() as f64, acc.iter().copied().fold(1.0, f64::min))
    }

    /// Test (mean, worst) at the alpha with the best mean train accuracy.
    fn tuned(&self, method: Method, fishers: &[CurvatureEstimate]) -> (f64, f64, f64) {
        let (alpha, merged) = ALPHAS
            .iter()
            .map(|&a| (a, self.merge(method, a, fishers)))
            .max_by(|a, b| self.accuracy(&a.1, false).0.total_cmp(&self.accuracy(&b.1, false).0))
            .unwrap();
        let (mean, worst) = self.accuracy(&merged, true);
        (alpha, mean, worst)
    }
}

fn build_desks() -> Vec<Desk> {
    (0..SEEDS)
        .map(|seed| {
            let exp = MlpExperiment::build(&MlpSuiteConfig { seed, ..MlpSuiteConfig::default() }, &FinetuneConfig::default()).unwrap();
            let deltas: Vec<TaskVector> = exp.models.iter().map(|m| task_vector(m, &exp.base).unwrap()).collect();
            let basis = build_tagged_basis(&deltas, 2).unwrap();
            Desk { exp, deltas, basis, seed }
        })
        .collect()
}

fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 { x[n / 2] } else { 0.5 * (x[n / 2 - 1] + x[n / 2]) }
}

fn criterion_9(desks: &[Desk], build: Duration) -> Vec<(String, Verdict)> {
    let start = Instant::now();
    let (mut curved_ok, mut beats_ta, mut beats_tsvm) = (0, 0, 0);
    let mut rows = Vec::new();
    for d in desks {
        let fishers = d.fishers(1.0);
        let w = uniform_weights(d.deltas.len());
        let rep = diagnose(&d.deltas, &fishers, &d.basis, &w, DEFAULT_JITTER, Aggregator::Mean).unwrap();
        if rep.objective_curved <= rep.objective_flat + 1e-12 * rep.objective_flat.max(1.0) {
            curved_ok += 1;
        }
        let (a_e, esum, esum_w) = d.tuned(Method::EpiMerSum, &fishers);
        let (a_t, ta, _) = d.tuned(Method::Ta, &fishers);
        let (a_s, _, tsvm_w) = d.tuned(Method::Tsvm, &fishers);
        beats_ta += usize::from(esum >= ta);
        beats_tsvm += usize::from(esum_w >= tsvm_w);
        rows.push(format!(
            "seed {}: epimer-sum {esum:.3}/{esum_w:.3} (alpha {a_e}), ta {ta:.3} (alpha {a_t}), tsvm worst {tsvm_w:.3} (alpha {a_s})",
            d.seed
        ));
    }
    let elapsed = build + start.elapsed();
    let (fast, time) = within(elapsed, Duration::from_secs(120));
    for r in &rows {
        println!("    {r}");
    }
    let soft = beats_ta >= 7 && beats_tsvm >= 6;
    vec![
        (
            "9a".into(),
            Verdict::hard(
                curved_ok == SEEDS as usize && fast,
                format!("F(curved) <= F(flat) on {curved_ok}/{SEEDS} seeds, {time}"),
            ),
        ),
        (
            "9b".into(),
            Verdict {
                pass: soft,
                soft: true,
                detail: format!(
                    "epimer-sum mean accuracy >= TA on {beats_ta}/{SEEDS} (need 7), worst-task >= TSV-M on {beats_tsvm}/{SEEDS} (need 6)"
                ),
            },
        ),
    ]
}

fn criterion_10(desks: &[Desk]) -> Verdict {
    let (mut acc_gap, mut eta_rel, mut raw_rel) = (Vec::new(), Vec::new(), Vec::new());
    for d in desks {
        let full = d.fishers(1.0);
        let tenth = d.fishers(0.1);
        let quarter = d.fishers(0.25);
        let a_full = d.accuracy(&d.merge(Method::EpiMerSum, 1.0, &full), true).0;
        let a_tenth = d.accuracy(&d.merge(Method::EpiMerSum, 1.0, &tenth), true).0;
        acc_gap.push((a_tenth - a_full).abs());
        let w = uniform_weights(d.deltas.len());
        let diag = |f: &[CurvatureEstimate]| diagnose(&d.deltas, f, &d.basis, &w, DEFAULT_JITTER, Aggregator::Mean).unwrap();
        let (r_full, r_quarter) = (diag(&full), diag(&quarter));
        eta_rel.push((r_quarter.eta_normalized.unwrap() / r_full.eta_normalized.unwrap() - 1.0).abs());
        raw_rel.push((r_quarter.eta / r_full.eta - 1.0).abs());
    }
    let (gap, rel, raw) = (median(acc_gap), median(eta_rel), median(raw_rel));
    Verdict::hard(
        gap <= 0.02 && rel <= 0.2,
        format!(
            "median |acc(f=0.1) - acc(f=1)| = {gap:.4}; median |eta_norm(0.25)/eta_norm(1) - 1| = {rel:.3} (raw eta {raw:.3}, informational)"
        ),
    )
}

fn epimerge(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_epimerge"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn criterion_11() -> Verdict {
    let root = tempfile::TempDir::new().unwrap();
    let p = |s: &str| root.path().join(s).to_str().unwrap().to_string();
    let mut failures = Vec::new();
    let mut check = |what: &str, runs: [Vec<String>; 2], outs: [String; 2]| {
        for args in &runs {
            if !epimerge(&args.iter().map(String::as_str).collect::<Vec<_>>()) {
                failures.push(format!("{what} failed to run"));
                return;
            }
        }
        let [a, b] = outs.clone().map(|o| {
            let path = Path::new(&o);
            if path.is_dir() { snapshot(path) } else { vec![(String::new(), fs::read(path).unwrap_or_default())] }
        });
        let meta = |o: &str| fs::read(format!("{o}.meta")).ok();
        if a != b || a.iter().all(|(_, x)| x.is_empty()) || meta(&outs[0]) != meta(&outs[1]) {
            failures.push(what.to_string());
        }
    };
    let v = |xs: &[&str]| -> Vec<String> { xs.iter().map(|s| s.to_string()).collect() };
    let twice = |f: &dyn Fn(&str) -> Vec<String>| [f("1"), f("2")];

    check(
        "synth mlp",
        twice(&|i| v(&["synth", "--out", &p(&format!("mlp{i}")), "--seed", "3", "--samples", "400"])),
        [p("mlp1"), p("mlp2")],
    );
    check(
        "synth quadratic",
        twice(&|i| v(&["synth", "--kind", "quadratic", "--out", &p(&format!("q{i}")), "--seed", "3"])),
        [p("q1"), p("q2")],
    );
    let suite = p("mlp1");
    let s = |f: &str| format!("{suite}/{f}");
    let inputs = |cmd: &str, fishers: bool| {
        let mut a = v(&[cmd, "--base", &s("base.epmc"), "--models"]);
        a.extend((0..4).map(|t| s(&format!("model_{t}.epmc"))));
        if fishers {
            a.push("--fishers".into());
            a.extend((0..4).map(|t| s(&format!("fisher_{t}.epmc"))));
        }
        a
    };
    check(
        "fisher",
        twice(&|i| v(&["fisher", "--grads", &s("grads_0.epmc"), "--fraction", "0.3", "--seed", "5", "--out", &p(&format!("f{i}.epmc"))])),
        [p("f1.epmc"), p("f2.epmc")],
    );
    check(
        "build-basis",
        twice(&|i| [inputs("build-basis", false), v(&["--rank", "2", "--out", &p(&format!("basis{i}.epmc"))])].concat()),
        [p("basis1.epmc"), p("basis2.epmc")],
    );
    for method in Method::ALL {
        let name = method.as_str();
        check(
            &format!("merge {name}"),
            twice(&|i| [inputs("merge", true), v(&["--method", name, "--out", &p(&format!("{name}{i}.epmc"))])].concat()),
            [p(&format!("{name}1.epmc")), p(&format!("{name}2.epmc"))],
        );
    }
    check(
        "diagnose",
        twice(&|i| [inputs("diagnose", true), v(&["--aggregator", "sum", "--out", &p(&format!("d{i}.json"))])].concat()),
        [p("d1.json"), p("d2.json")],
    );
    check(
        "sweep",
        twice(&|i| v(&["sweep", "--suite", &suite, "--fractions", "0.1,1.0", "--seed", "4", "--out", &p(&format!("sw{i}.csv"))])),
        [p("sw1.csv"), p("sw2.csv")],
    );
    check(
        "scan",
        twice(&|i| v(&["scan", "--suite", &suite, "--merged", &p("am1.epmc"), "--points", "5", "--out", &p(&format!("sc{i}.csv"))])),
        [p("sc1.csv"), p("sc2.csv")],
    );
    let commands = 2 + 4 + Method::ALL.len();
    Verdict::hard(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{commands} command runs byte-identical across reruns")
        } else {
            format!("differences or failures: {}", failures.join(", "))
        },
    )
}

fn report(id: &str, title: &str, v: &Verdict) {
    let status = match (v.pass, v.soft) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL (soft, flagged for review)",
    };
    println!("{status} [{id}] {title}: {}", v.detail);
}

fn main() {
    // `cargo test -- --list` and filters from other targets must not trigger the suite.
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().skip(1).find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }

    let mut hard_failures = 0;
    let mut run = |id: &str, title: &str, v: Verdict| {
        report(id, title, &v);
        if !v.pass && !v.soft {
            hard_failures += 1;
        }
    };
    run("1", "curvature-advantage identity", criterion_1());
    run("2", "zero-eta cases", criterion_2());
    run("3", "excess-loss bound", criterion_3());
    run("4", "existence and uniqueness", criterion_4());
    run("5", "subsumption", criterion_5());
    run("6", "aggregator relation", criterion_6());
    run("7", "basis correctness", criterion_7());
    run("8", "gradient fidelity", criterion_8());

    let start = Instant::now();
    let desks = build_desks();
    let build = start.elapsed();
    for (id, v) in criterion_9(&desks, build) {
        let title = if id == "9a" { "desk analog, in-subspace objective" } else { "desk analog, accuracy direction" };
        run(&id, title, v);
    }
    run("10", "Fisher subsample robustness", criterion_10(&desks));
    run("11", "CLI determinism", criterion_11());

    if hard_failures > 0 {
        println!("acceptance: {hard_failures} hard criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all hard criteria passed");
}
