//! Automatic channel pruning for convolutional networks.
//!
//! The engine works in two stages. Feature maps captured from a trained network
//! are clustered per layer with density-based clustering on cosine distance; the
//! number of clusters plus noise points gives a preliminary channel count for every
//! prunable group. A particle swarm then refines that vector, scoring candidates
//! with a pluggable [`fitness::Evaluator`].
//!
//! - [`structmodel`]: architecture templates, width coupling, parameter/FLOP counts.
//! - [`featio`]: the `ACPF` feature-dump format and sample averaging.
//! - [`cluster`]: pairwise channel distances and DBSCAN.
//! - [`pso`]: the swarm search.
//! - [`fitness`]: evaluators, the worker protocol and the retrain budget.
//! - [`toynet`]: a tiny trainable network on synthetic data.
//! - [`pipeline`]: the end-to-end toy run.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod featio;
pub mod fitness;
pub mod pipeline;
pub mod pso;
pub mod structmodel;
pub mod toynet;

pub use cluster::{
    cluster_prune, dbscan, pairwise_distance, pruned_channel_count, ClusterResult, DistanceMatrix, Metric,
};
pub use featio::{average_samples, read_dump, write_dump, AveragedMaps, DumpShape, FeatureDump};
pub use fitness::{retrain_budget, Evaluator, EvaluatorSpec, FitnessError};
pub use pso::{run_search, SearchOutcome, SwarmConfig, SwarmState};
pub use structmodel::{
    apply_structure, build_template, compression_report, count_flops, count_params, ArchTemplate, CompressionReport,
    ConcreteNetwork, StructureVector, Totals,
};
