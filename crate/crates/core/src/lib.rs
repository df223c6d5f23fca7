//! Desk-scale policy-optimization laboratory: GRPO and caption-regularized
//! policy optimization on a synthetic multimodal perception-reasoning task.
//!
//! The numeric core ([`tensor`], [`graph`], [`finite_diff`], [`objective`])
//! is generic over the scalar type through [`scalar::Real`]; the lab itself
//! runs at f64 via the aliases below, which is what the gradient checks and
//! byte-stable artifacts assume.

pub mod scalar;
pub mod rng;
pub mod tensor;
pub mod graph;
pub mod finite_diff;
pub mod vocab;
pub mod env;
pub mod policy;
pub mod objective;
pub mod hash;
pub mod config;
pub mod checkpoint;
pub mod metrics;
pub mod par;
pub mod trainer;

/// Scalar type of the lab.
pub type Scalar = f64;
pub type Tensor = tensor::Tensor<Scalar>;
pub type Graph = graph::Graph<Scalar>;
pub type PolicyParams = policy::PolicyParams<Scalar>;
pub type ObjectiveConfig = objective::ObjectiveConfig<Scalar>;
pub type GroupStats = objective::GroupStats<Scalar>;
