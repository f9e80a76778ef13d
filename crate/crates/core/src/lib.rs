//! Curvature-aware subspace merging of fine-tuned models.
//!
//! Task vectors are projected onto a per-layer tagged basis built from
//! their truncated SVDs, and merged by the Fréchet mean under projected
//! Fisher curvature. Flat-geometry baselines, executable diagnostics and
//! synthetic test beds live alongside.

pub mod checkpoint;
pub mod curvature;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod meta;
pub mod subspace;
pub mod synthetic;

pub use checkpoint::{
    read_checkpoint, task_vector, write_checkpoint, DType, LayerKind, ParameterSet, TaskVector,
    Tensor,
};
pub use curvature::{accumulate_fisher, CurvatureEstimate, CurvatureSource};
pub use diagnostics::{certify_bound, diagnose, DiagnosticsReport};
pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use merge::{run_merge, Aggregator, MergeConfig, MergeInputs, MergeOutcome, Method};
pub use subspace::{build_tagged_basis, ProjectedHessians, ProjectedVector, TaggedBasis};
