//! Deterministic federated-learning simulator for studying model poisoning.
//!
//! The crate is organised bottom-up:
//!
//! * [`vecmath`]: flat parameter vectors and the numerics every other module needs.
//! * [`model`]: a small fully connected classifier with manual backprop and Adam.
//! * [`data`]: IDX loading, synthetic blobs and IID / label-biased client partitioning.
//! * [`aggregation`]: FedAvg and ten Byzantine-robust aggregation rules.
//! * [`attacks`]: the optimization-based FMPA attack family plus six baseline attacks.
//! * [`engine`]: round orchestration, attacker scheduling, metrics and multi-seed runs.
//!
//! Everything is a pure function of its inputs and explicit seeds.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod attacks;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod rng;
pub mod vecmath;

pub use aggregation::{AggregationContext, AggregationOutcome, AggregatorSpec};
pub use attacks::{AttackKind, AttackPlan, FmpaConfig, MaliciousResult, PreciseConfig, ReferenceMode, SmoothingState};
pub use data::{Dataset, PartitionMode, PartitionSpec};
pub use engine::{ExperimentRecord, FlConfig, RoundTrace, Schedule};
pub use error::{Error, Result};
pub use model::{LabeledBatch, MlpArchitecture, OptimizerState};
pub use vecmath::ParamVector;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
