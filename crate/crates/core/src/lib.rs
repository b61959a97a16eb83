//! Modality-composable diffusion policies.
//!
//! Each sensory modality gets its own DDPM score expert. At execution time
//! the experts' noise predictions are mixed with consensus weights from a
//! small router (or fixed weights), so modalities can be trained separately
//! and combined without retraining.

pub mod analysis;
pub mod baselines;
pub mod compose;
pub mod dataset;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod experts;
pub mod harness;
pub mod numcore;
pub mod rng;
pub mod rollout;
pub mod router;

pub use analysis::{
    perturb_importance, robustness_eval, CorruptionMode, ImportanceConfig, ImportanceTrace,
    ScenarioSpec,
};
pub use baselines::{ConcatPolicy, MoEFeaturePolicy};
pub use compose::{compose_policy, inter_compose, manual_compose, ComposedPolicy, Policy};
pub use dataset::{generate_dataset, Dataset};
pub use diffusion::{ddpm_sample, make_schedule, NoiseSchedule, Normalizer};
pub use envs::{EnvKind, EnvSpec, Observation};
pub use error::{Error, Result};
pub use experts::{train_expert, ExpertConfig, ModalityExpert, TrainConfig};
pub use rollout::{evaluate, EvalSummary};
pub use router::{train_router, ConsensusWeights, Router, RoutingStrategy};
