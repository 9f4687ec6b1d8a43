//! Deep generative urban planning on synthetic cities.
//!
//! Land-use configurations are `n x n x C` POI-count tensors. A context graph
//! of the target area and its eight neighbours is embedded by a graph
//! autoencoder, concatenated with one-hot instruction slots, and fed to one
//! of three conditional generators: an adversarial planner ([`gan`]), a
//! variational planner with a zone-map head ([`cvae`]), or a two-stage
//! hierarchical planner with zone-level attention ([`hier`]). The [`hitl`]
//! module closes the loop with an instruction grammar, a preference reward
//! model, best-of-K refinement and reward-weighted fine-tuning.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for common use.

pub mod context;
pub mod cvae;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gan;
pub mod hier;
pub mod hitl;
pub mod lda;
pub mod nn;
pub mod plan;
pub mod rng;
pub mod scalar;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
pub use plan::{GeneratorKind, Plan, PlanGenerator, PlanShape, RewardTunable};
pub use scalar::Scalar;
pub use spatial::{Attribute, CategoryZoneMapping, GridSpec, Instruction, LandUseConfiguration, ZoneMap};

pub type Configuration = spatial::LandUseConfiguration<f64>;
pub type ConfigurationF32 = spatial::LandUseConfiguration<f32>;
pub type Condition = context::ConditionEmbedding<f64>;
pub type ConditionF32 = context::ConditionEmbedding<f32>;
pub type Encoder = context::GraphEncoder<f64>;
pub type EncoderF32 = context::GraphEncoder<f32>;
pub type Lucgan = gan::LucganModel<f64>;
pub type LucganF32 = gan::LucganModel<f32>;
pub type Cluvae = cvae::CluvaeModel<f64>;
pub type CluvaeF32 = cvae::CluvaeModel<f32>;
pub type Ihplanner = hier::IhplannerModel<f64>;
pub type IhplannerF32 = hier::IhplannerModel<f32>;
pub type Reward = hitl::RewardModel<f64>;
pub type RewardF32 = hitl::RewardModel<f32>;
pub type Session = hitl::PlanningSession<f64>;
