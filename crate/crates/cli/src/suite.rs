//! On-disk layout of synthetic suites.
//!
//! ```text
//! suite.meta          kind, seed, tasks and generator settings
//! base.epmc           shared initial parameters
//! model_<t>.epmc      fine-tuned parameters of task t
//! fisher_<t>.epmc     Fisher diagonal (full data, or exact for quadratics)
//! grads_<t>.epmc      per-sample gradients at model_<t>   (mlp only)
//! data_<t>.epmc       train/test splits                    (mlp only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use epimerge_core::curvature::{read_gradient_stream, write_fisher, write_gradient_stream};
use epimerge_core::meta::Sidecar;
use epimerge_core::synthetic::{
    accuracy_on, gen_quadratic_suite, Dataset, FinetuneConfig, MlpExperiment, MlpSuiteConfig,
};
use epimerge_core::{accumulate_fisher, read_checkpoint, write_checkpoint, ParameterSet, TaskVector};
use log::info;

use crate::{CliResult, Failure, SuiteKind, SynthArgs};

pub fn base_path(dir: &Path) -> PathBuf {
    dir.join("base.epmc")
}

pub fn model_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("model_{t}.epmc"))
}

pub fn fisher_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("fisher_{t}.epmc"))
}

pub fn grads_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("grads_{t}.epmc"))
}

pub fn data_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("data_{t}.epmc"))
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("suite.meta")
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn parse_dims(specs: &[String]) -> CliResult<Vec<(usize, usize)>> {
    specs
        .iter()
        .map(|s| {
            let (r, c) = s
                .split_once(['x', 'X'])
                .ok_or_else(|| Failure::Usage(format!("layer shape `{s}` is not ROWSxCOLS")))?;
            match (r.trim().parse(), c.trim().parse()) {
                (Ok(r), Ok(c)) => Ok((r, c)),
                _ => Err(Failure::Usage(format!("layer shape `{s}` is not ROWSxCOLS"))),
            }
        })
        .collect()
}

pub fn synth(args: SynthArgs) -> CliResult {
    fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    let dir = args.out.as_path();
    let mut manifest = Sidecar::new();
    manifest.set("seed", args.seed).set("tasks", args.tasks);
    match args.kind {
        SuiteKind::Quadratic => {
            let dims = parse_dims(&args.dims)?;
            let suite = gen_quadratic_suite(args.seed, &dims, args.tasks, args.heterogeneity)?;
            write_checkpoint(&suite.base, base_path(dir))?;
            for (t, task) in suite.tasks.iter().enumerate() {
                write_checkpoint(&task.optimum, model_path(dir, t))?;
                let curvature = task
                    .curvature()
                    .ok_or_else(|| Failure::Data("quadratic suite has dense curvature".into()))?;
                write_fisher(&curvature, 1.0, fisher_path(dir, t))?;
            }
            manifest
                .set("kind", "quadratic")
                .set("dims", args.dims.join(","))
                .set("heterogeneity", args.heterogeneity);
            println!("wrote quadratic suite with {} tasks to {}", args.tasks, dir.display());
        }
        SuiteKind::Mlp => {
            let d = MlpSuiteConfig::default();
            let cfg = MlpSuiteConfig {
                seed: args.seed,
                tasks: args.tasks,
                inputs: args.inputs.unwrap_or(d.inputs),
                hidden: args.hidden.unwrap_or(d.hidden),
                classes: args.classes.unwrap_or(d.classes),
                samples: args.samples.unwrap_or(d.samples),
                class_spread: args.spread.unwrap_or(d.class_spread),
                noise: args.noise.unwrap_or(d.noise),
                ..d
            };
            let fd = FinetuneConfig::default();
            let finetune = FinetuneConfig {
                steps: args.steps.unwrap_or(fd.steps),
                lr: args.lr.unwrap_or(fd.lr),
                ..fd
            };
            let exp = MlpExperiment::build(&cfg, &finetune)?;
            write_checkpoint(&exp.base, base_path(dir))?;
            for (t, task) in exp.tasks.iter().enumerate() {
                write_checkpoint(&exp.models[t], model_path(dir, t))?;
                write_gradient_stream(&exp.gradients[t], grads_path(dir, t))?;
                write_fisher(&accumulate_fisher(exp.gradients[t].iter())?, 1.0, fisher_path(dir, t))?;
                let mut data = task.train.to_parameter_set("train");
                for (name, tensor) in task.test.to_parameter_set("test").iter() {
                    data.set(name, tensor.clone());
                }
                write_checkpoint(&data, data_path(dir, t))?;
                let out = &exp.finetune[t];
                println!(
                    "task {t}: steps {} grad ratio {:.3e} test accuracy {:.4}",
                    out.steps_taken,
                    out.final_grad_norm / out.initial_grad_norm,
                    accuracy_on(&exp.models[t], &task.test)?
                );
            }
            manifest
                .set("kind", "mlp")
                .set("inputs", cfg.inputs)
                .set("hidden", cfg.hidden)
                .set("classes", cfg.classes)
                .set("samples", cfg.samples)
                .set("class_spread", cfg.class_spread)
                .set("noise", cfg.noise)
                .set("steps", finetune.steps)
                .set("lr", finetune.lr);
            println!("wrote mlp suite with {} tasks to {}", args.tasks, dir.display());
        }
    }
    manifest.write(manifest_path(dir))?;
    Ok(())
}

/// A synthetic classification suite read back from disk.
pub struct MlpSuite {
    pub base: ParameterSet,
    pub models: Vec<ParameterSet>,
    pub gradients: Vec<Vec<TaskVector>>,
    pub train: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

/// Reads an mlp suite; gradient streams are loaded only when asked for.
pub fn load_mlp_suite(dir: &Path, with_gradients: bool) -> CliResult<MlpSuite> {
    let mpath = manifest_path(dir);
    crate::require_paths([mpath.as_path()])?;
    let manifest = Sidecar::read(&mpath)?;
    if manifest.get("kind") != Some("mlp") {
        return Err(Failure::Data(format!("{} does not describe an mlp suite", dir.display())));
    }
    let tasks: usize = manifest.require("tasks", &mpath)?;
    let mut paths = vec![base_path(dir)];
    for t in 0..tasks {
        paths.extend([model_path(dir, t), data_path(dir, t)]);
        if with_gradients {
            paths.push(grads_path(dir, t));
        }
    }
    crate::require_paths(paths.iter().map(PathBuf::as_path))?;

    let base = read_checkpoint(base_path(dir))?;
    let mut suite = MlpSuite {
        base,
        models: Vec::with_capacity(tasks),
        gradients: Vec::new(),
        train: Vec::with_capacity(tasks),
        test: Vec::with_capacity(tasks),
    };
    for t in 0..tasks {
        suite.models.push(read_checkpoint(model_path(dir, t))?);
        let data = read_checkpoint(data_path(dir, t))?;
        suite.train.push(Dataset::from_parameter_set(&data, "train")?);
        suite.test.push(Dataset::from_parameter_set(&data, "test")?);
        if with_gradients {
            suite.gradients.push(read_gradient_stream(grads_path(dir, t))?);
        }
    }
    info!("loaded {tasks}-task suite from {}", dir.display());
    Ok(suite)
}
