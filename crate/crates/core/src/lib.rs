//! Generalisation-aware automatic pruning for small vision-language
//! transformers: second-order layer pruning, a norm-regularised fitness,
//! constrained evolutionary policy search and projector evolution.

pub mod calib;
pub mod error;
pub mod fitness;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod obs;
pub mod oracle;
pub mod policy;
pub mod seed;
pub mod space;

pub use error::{Error, Result};
pub use fitness::{fitness, rademacher_proxy, FitnessRecord};
pub use linalg::{frobenius_norm, gemm, spd_inverse, Matrix};
pub use model::{init_model, ModelConfig, Sample, ToyVLM};
pub use obs::{apply_policy, obs_prune_layer, LayerMasks, PruneOptions, PruneResult};
pub use policy::{evolve_round, Policy, Population, RatioGrid, SearchParams};
pub use space::{evolve_projector, importance_weights, ImportanceWeights};
