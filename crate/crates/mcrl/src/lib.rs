//! Multi-cluster reference learning.
//!
//! A feature-space domain-adaptation toolkit: a classifier is trained on a
//! labeled source domain while its feature distribution is pulled toward an
//! unlabeled target domain. Target samples carry no labels, so each one is
//! associated with one or more *reference clusters* (classes) chosen from the
//! model's own predictions, and a weighted class-conditional kernel distance
//! between source and target features is minimized alongside cross-entropy.
//!
//! The crate is deliberately dependency-light on the numeric side: dense
//! matrices, the RNG, and the optimizer are implemented here so that every
//! run is bitwise reproducible from a seed, on any platform with IEEE-754
//! doubles.
//!
//! Module map:
//! - [`numerics`]: matrices, SplitMix64 RNG, stable activations, SGD.
//! - [`model`]: tanh feature transform + linear head, exact gradients,
//!   binary checkpoints.
//! - [`kernels`]: multi-kernel MMD with weighted class-conditional form.
//! - [`selection`]: pseudo-labels and reference-cluster weighting policies.
//! - [`data`]: embedding datasets, CSV I/O, synthetic shift benchmarks.
//! - [`adapt`]: training loops (source-only, adaptation, chained stages).
//! - [`eval`]: accuracy/F1 metrics and the ablation grid.
//! - [`report`]: deterministic JSON run reports.
//! - [`gradcheck`]: finite-difference gradient verification.

pub mod adapt;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod numerics;
pub mod report;
pub mod selection;

pub use data::{EmbeddingDataset, LabelRole, ShiftSpec};
pub use error::{Error, Result};
