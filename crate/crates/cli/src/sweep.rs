//! Grid sweep over (method, k, alpha, fraction) on an mlp suite.
//!
//! Bases are built once per rank and Fisher diagonals once per fraction.
//! The `eta`, `v_s` and `r_s` columns describe the curvature-aware solution
//! on the row's basis and Fisher fraction; `v_s` is taken at the sum
//! aggregator for `epimer-sum` rows and at the mean otherwise.

use std::collections::BTreeMap;

use epimerge_core::curvature::subsample_stream;
use epimerge_core::merge::uniform_weights;
use epimerge_core::subspace::rank_guard;
use epimerge_core::synthetic::accuracy_on;
use epimerge_core::{
    accumulate_fisher, build_tagged_basis, diagnose, run_merge, task_vector, Aggregator,
    CurvatureEstimate, DiagnosticsReport, MergeConfig, MergeInputs, Method, TaggedBasis,
};
use log::{info, warn};
use rayon::prelude::*;

use crate::commands::{emit, num};
use crate::suite::load_mlp_suite;
use crate::{CliResult, Failure, SweepArgs, DEFAULT_ALPHAS, DEFAULT_FRACTIONS, DEFAULT_RANKS};

pub const HEADER: &str = "method,k,alpha,fraction,avg_accuracy,worst_accuracy,eta,v_s,r_s";

type DiagKey = (usize, usize, Option<usize>);

pub fn run(args: SweepArgs) -> CliResult {
    let methods = args.methods.unwrap_or_else(|| Method::ALL.to_vec());
    let requested = args.ranks.unwrap_or_else(|| DEFAULT_RANKS.to_vec());
    let alphas = args.alphas.unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());
    let fractions = args.fractions.unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
    if methods.is_empty() || requested.is_empty() || alphas.is_empty() || fractions.is_empty() {
        return Err(Failure::Usage("sweep grids must be non-empty".into()));
    }
    if args.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }

    let suite = load_mlp_suite(&args.suite, true)?;
    let tasks = suite.models.len();
    let weights = args.weights.unwrap_or_else(|| uniform_weights(tasks));
    let ranks: Vec<usize> = requested
        .iter()
        .copied()
        .filter(|&k| {
            let ok = k > 0 && rank_guard(&suite.base, k, tasks).violations.is_empty();
            if !ok {
                warn!("rank k = {k} dropped by the rank guard");
            }
            ok
        })
        .collect();
    if ranks.is_empty() {
        return Err(Failure::Data("every requested rank violates the rank guard".into()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    let rows = pool.install(|| -> CliResult<Vec<String>> {
        let deltas = suite
            .models
            .iter()
            .map(|m| task_vector(m, &suite.base))
            .collect::<Result<Vec<_>, _>>()?;
        let bases = ranks
            .par_iter()
            .map(|&k| build_tagged_basis(&deltas, k))
            .collect::<Result<Vec<TaggedBasis>, _>>()?;
        let fishers = fractions
            .par_iter()
            .map(|&f| {
                suite
                    .gradients
                    .iter()
                    .map(|g| accumulate_fisher(subsample_stream(g, f, args.seed)?.iter()))
                    .collect::<Result<Vec<CurvatureEstimate>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        info!("built {} bases and {} Fisher sets", bases.len(), fishers.len());

        let sum_rows = methods.contains(&Method::EpiMerSum);
        let mut keys: Vec<DiagKey> = Vec::new();
        for ki in 0..ranks.len() {
            for fi in 0..fractions.len() {
                keys.push((ki, fi, None));
                if sum_rows {
                    keys.extend((0..alphas.len()).map(|ai| (ki, fi, Some(ai))));
                }
            }
        }
        let reports: BTreeMap<DiagKey, DiagnosticsReport> = keys
            .par_iter()
            .map(|&(ki, fi, ai)| {
                let aggregator = ai.map_or(Aggregator::Mean, |ai| Aggregator::Sum { alpha: alphas[ai] });
                diagnose(&deltas, &fishers[fi], &bases[ki], &weights, args.jitter, aggregator)
                    .map(|r| ((ki, fi, ai), r))
            })
            .collect::<Result<_, _>>()?;

        let mut grid = Vec::new();
        for &method in &methods {
            for ki in 0..ranks.len() {
                for ai in 0..alphas.len() {
                    for fi in 0..fractions.len() {
                        grid.push((method, ki, ai, fi));
                    }
                }
            }
        }
        grid.par_iter()
            .map(|&(method, ki, ai, fi)| -> CliResult<String> {
                let config = MergeConfig {
                    method,
                    weights: weights.clone(),
                    k: ranks[ki],
                    alpha: alphas[ai],
                    jitter: args.jitter,
                    keep_fraction: args.keep_fraction,
                };
                let outcome = run_merge(
                    &config,
                    &MergeInputs {
                        base: &suite.base,
                        models: &suite.models,
                        fishers: Some(&fishers[fi]),
                        basis: Some(&bases[ki]),
                    },
                )?;
                let acc = suite
                    .test
                    .iter()
                    .map(|d| accuracy_on(&outcome.merged, d))
                    .collect::<Result<Vec<f64>, _>>()?;
                let avg = acc.iter().sum::<f64>() / acc.len() as f64;
                let worst = acc.iter().copied().fold(f64::INFINITY, f64::min);
                let key = (ki, fi, (method == Method::EpiMerSum).then_some(ai));
                let r = &reports[&key];
                Ok(format!(
                    "{method},{},{},{},{},{},{},{},{}",
                    ranks[ki],
                    num(alphas[ai]),
                    num(fractions[fi]),
                    num(avg),
                    num(worst),
                    num(r.eta),
                    num(r.v_s),
                    num(r.r_s)
                ))
            })
            .collect()
    })?;

    let mut csv = String::with_capacity(rows.len() * 160);
    csv.push_str(HEADER);
    csv.push('\n');
    for row in rows {
        csv.push_str(&row);
        csv.push('\n');
    }
    emit(&csv, args.out.as_deref())
}
