//! Entropy-weighted ensemble fusion with confidence-gap routing and
//! Top-K constrained arbitration.
//!
//! Backbones contribute softmax opinions; opinions are fused with weights
//! `softmax(-U / τ)` over their predictive entropies `U`. Samples with a low
//! top probability or a narrow top-2 margin are escalated to an arbiter that
//! must pick among the fused Top-K classes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arbiter;
pub mod backends;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod loss;
pub mod synth;
pub mod train;

pub use arbiter::{Arbiter, ArbiterConfig, ArbitrationRequest, ArbitrationResult, DescriptorDb};
pub use backends::{Backend, BackendSet, FailurePolicy, LogitStore, Payload, SampleRef};
pub use error::{Error, Result};
pub use eval::{Cascade, ClassifyOutcome, DatasetManifest, EvalRecord, MetricsReport, Split};
pub use fusion::{
    ClassDistribution, EnsembleEngine, EnsemblePrediction, FusionConfig, ModelOpinion, RouterConfig,
};
pub use loss::{LossBreakdown, LossConfig};
pub use train::{TrainConfig, TrainReport};
