use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use epimerge_core::curvature::{read_fisher, read_gradient_stream, subsample_stream, write_fisher};
use epimerge_core::merge::{merge_sidecar, uniform_weights};
use epimerge_core::meta::sidecar_path;
use epimerge_core::subspace::{matrix_layers, rank_guard, read_basis, write_basis};
use epimerge_core::synthetic::{accuracy_on, mean_loss};
use epimerge_core::{
    accumulate_fisher, build_tagged_basis, diagnose as run_diagnose, read_checkpoint, run_merge,
    task_vector, write_checkpoint, Aggregator, CurvatureEstimate, MergeConfig, MergeInputs,
    ParameterSet, TaggedBasis, TaskVector,
};
use log::{info, warn};

use crate::suite::load_mlp_suite;
use crate::{
    require_paths, AggregatorArg, BuildBasisArgs, CliResult, DiagnoseArgs, Failure, FisherArgs,
    MergeArgs, ModelInputs, ScanArgs,
};

/// 17 significant digits, the CSV float format.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `text` to `path`, or to stdout when no path is given.
pub fn emit(text: &str, path: Option<&Path>) -> CliResult {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Data(format!("stdout: {e}"))),
    }
}

struct Loaded {
    base: ParameterSet,
    models: Vec<ParameterSet>,
}

impl Loaded {
    fn deltas(&self) -> CliResult<Vec<TaskVector>> {
        Ok(self
            .models
            .iter()
            .map(|m| task_vector(m, &self.base))
            .collect::<Result<_, _>>()?)
    }
}

fn load_models(inputs: &ModelInputs, extra: &[&Path]) -> CliResult<Loaded> {
    require_paths(
        std::iter::once(inputs.base.as_path())
            .chain(inputs.models.iter().map(PathBuf::as_path))
            .chain(extra.iter().copied()),
    )?;
    let base = read_checkpoint(&inputs.base)?;
    let models = inputs
        .models
        .iter()
        .map(read_checkpoint)
        .collect::<Result<Vec<_>, _>>()?;
    info!("loaded base and {} models", models.len());
    Ok(Loaded { base, models })
}

fn load_fishers(paths: &[PathBuf], tasks: usize) -> CliResult<Vec<CurvatureEstimate>> {
    if paths.len() != tasks {
        return Err(Failure::Usage(format!(
            "{} Fisher files given for {tasks} models",
            paths.len()
        )));
    }
    Ok(paths.iter().map(read_fisher).collect::<Result<_, _>>()?)
}

fn load_basis(path: &Path, tasks: usize) -> CliResult<TaggedBasis> {
    let basis = read_basis(path)?;
    if basis.tasks != tasks {
        return Err(Failure::Usage(format!(
            "basis was built for {} tasks but {tasks} models were given",
            basis.tasks
        )));
    }
    Ok(basis)
}

fn weights_or_uniform(weights: Option<Vec<f64>>, tasks: usize) -> Vec<f64> {
    weights.unwrap_or_else(|| uniform_weights(tasks))
}

fn default_alpha(tasks: usize) -> f64 {
    1.0 / (tasks as f64).sqrt()
}

pub fn build_basis(args: BuildBasisArgs) -> CliResult {
    let loaded = load_models(&args.inputs, &[])?;
    let tasks = loaded.models.len();
    let report = rank_guard(&loaded.base, args.rank, tasks);
    for (name, rows, cols) in matrix_layers(&loaded.base) {
        let status = if report.violations.iter().any(|v| v.layer == name) { "VIOLATION" } else { "ok" };
        println!("{name}\t{rows}x{cols}\tkT={}\t{status}", args.rank * tasks);
    }
    if !report.violations.is_empty() {
        return Err(Failure::Data(format!("rank guard violated: {report}")));
    }
    let basis = build_tagged_basis(&loaded.deltas()?, args.rank)?;
    write_basis(&basis, &args.out)?;
    println!("basis: {} layers, subspace dimension {}", basis.num_layers(), basis.dim());
    Ok(())
}

pub fn merge(args: MergeArgs) -> CliResult {
    let extra: Vec<&Path> = args.fishers.iter().map(PathBuf::as_path).chain(args.basis.as_deref()).collect();
    let loaded = load_models(&args.inputs, &extra)?;
    let tasks = loaded.models.len();
    let fishers = if args.method.needs_curvature() {
        Some(load_fishers(&args.fishers, tasks)?)
    } else {
        if !args.fishers.is_empty() {
            warn!("method `{}` ignores --fishers", args.method);
        }
        None
    };
    let basis = match (&args.basis, args.method.needs_basis()) {
        (Some(p), true) => Some(load_basis(p, tasks)?),
        (Some(_), false) => {
            warn!("method `{}` ignores --basis", args.method);
            None
        }
        (None, _) => None,
    };
    let config = MergeConfig {
        method: args.method,
        weights: weights_or_uniform(args.weights, tasks),
        k: basis.as_ref().map_or(args.rank, |b| b.k),
        alpha: args.alpha.unwrap_or_else(|| default_alpha(tasks)),
        jitter: args.jitter,
        keep_fraction: args.keep_fraction,
    };
    let outcome = run_merge(
        &config,
        &MergeInputs {
            base: &loaded.base,
            models: &loaded.models,
            fishers: fishers.as_deref(),
            basis: basis.as_ref(),
        },
    )?;
    write_checkpoint(&outcome.merged, &args.out)?;
    merge_sidecar(&config, &outcome).write(sidecar_path(&args.out))?;
    println!("merged {tasks} models with {} into {}", config.method, args.out.display());
    Ok(())
}

pub fn diagnose(args: DiagnoseArgs) -> CliResult {
    let extra: Vec<&Path> = args.fishers.iter().map(PathBuf::as_path).chain(args.basis.as_deref()).collect();
    let loaded = load_models(&args.inputs, &extra)?;
    let tasks = loaded.models.len();
    let fishers = load_fishers(&args.fishers, tasks)?;
    let deltas = loaded.deltas()?;
    let basis = match &args.basis {
        Some(p) => load_basis(p, tasks)?,
        None => build_tagged_basis(&deltas, args.rank)?,
    };
    let aggregator = match args.aggregator {
        AggregatorArg::Mean => Aggregator::Mean,
        AggregatorArg::Sum => Aggregator::Sum {
            alpha: args.alpha.unwrap_or_else(|| default_alpha(tasks)),
        },
    };
    let weights = weights_or_uniform(args.weights, tasks);
    let report = run_diagnose(&deltas, &fishers, &basis, &weights, args.jitter, aggregator)?;
    let json = report.to_json();
    if let Some(out) = &args.out {
        emit(&json, Some(out))?;
    }
    emit(&json, None)
}

pub fn fisher(args: FisherArgs) -> CliResult {
    require_paths([args.grads.as_path()])?;
    let stream = read_gradient_stream(&args.grads)?;
    let sample = subsample_stream(&stream, args.fraction, args.seed)?;
    let est = accumulate_fisher(sample.iter())?;
    write_fisher(&est, args.fraction, &args.out)?;
    println!(
        "fisher from {} of {} samples written to {}",
        est.sample_count(),
        stream.len(),
        args.out.display()
    );
    Ok(())
}

pub fn scan(args: ScanArgs) -> CliResult {
    if args.points < 2 {
        return Err(Failure::Usage("--points must be at least 2".into()));
    }
    require_paths([args.merged.as_path()])?;
    let suite = load_mlp_suite(&args.suite, false)?;
    let merged = read_checkpoint(&args.merged)?;
    let mut csv = String::from("task,s,train_loss,test_accuracy\n");
    for (t, model) in suite.models.iter().enumerate() {
        for i in 0..args.points {
            let s = i as f64 / (args.points - 1) as f64;
            let theta = model.zip_map(&merged, |a, b| a + s * (b - a))?;
            csv.push_str(&format!(
                "{t},{},{},{}\n",
                num(s),
                num(mean_loss(&theta, &suite.train[t])?),
                num(accuracy_on(&theta, &suite.test[t])?)
            ));
        }
    }
    emit(&csv, args.out.as_deref())
}
