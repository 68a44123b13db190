//! Intrinsic exploration scaffolds for cooperative multi-agent reinforcement
//! learning.
//!
//! Each agent receives a training-time bonus equal to the Bayesian surprise
//! its own action causes in a learned latent model of the next global state:
//! the KL divergence between a latent prior conditioned on the full joint
//! action and one conditioned on the joint action with that agent's action
//! masked out. A separate stochastic exploration actor maximises this bonus,
//! while a value-decomposed Q learner is trained on extrinsic reward only and
//! is the only network kept for execution.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod envs;
pub mod episode;
pub mod error;
pub mod nn;
pub mod par;
pub mod policies;
pub mod scaffolds;
pub mod stats;
pub mod trainer;

pub use error::{IcesError, Result};
