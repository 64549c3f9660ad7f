//! Circuit discovery and circuit comparison for small transformers.
//!
//! The crate contains an embedded toy transformer with exact residual-stream
//! bookkeeping, edge/node/neuron attribution (EAP, EAP-IG and exact
//! patching), the edge-patching intervention with normalized faithfulness,
//! minimal-circuit search, overlap metrics, clustering, random-overlap
//! baselines, and report emission.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what every experiment uses.

pub mod attribution;
pub mod circuit;
pub mod circuits;
pub mod cluster;
pub mod compare;
pub mod error;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tasks;
pub mod tensor;

pub use circuit::{prune, Circuit, Granularity, Member, Provenance};
pub use error::{Error, Result};
pub use graph::{build_graph, Channel, ChannelMode, ComputationalGraph, EdgeId, NodeId};
pub use model::{build_model, ModelConfig, Normalization};
pub use scalar::Scalar;
pub use tasks::{generate_task, Family, MetricMode, MetricSpec, TaskExample, TaskKind, TaskSpec};

/// Double-precision model.
pub type Model = model::Transformer<f64>;
/// Double-precision parameters.
pub type Params = model::ModelParams<f64>;
/// Double-precision activation cache.
pub type Cache = model::ActivationCache<f64>;
/// Double-precision matrix.
pub type Matrix = tensor::Mat<f64>;


/// Double-precision prepared task.
pub type Prepared = circuits::PreparedTask<f64>;
