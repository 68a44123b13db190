//! Dec-POMDP environments: a common interface plus two desk-scale worlds.

mod corridor;
mod matrix;

use rand::RngCore;

pub use corridor::{Cell, CorridorConfig, NoisyCorridor, CORRIDOR_ACTIONS};
pub use matrix::{oracle_scaffold, MatrixGame, MatrixGameTable};

use crate::error::Result;

/// Dimensions of a Dec-POMDP instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub episode_limit: usize,
}

/// Outcome of one joint step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub next_obs: Vec<Vec<f64>>,
    pub reward_ext: f64,
    pub done: bool,
    pub won: bool,
    /// Episode ended only because the step limit was hit.
    pub truncated: bool,
}

/// A cooperative partially observable environment with a shared team reward.
pub trait Environment: Send {
    fn spec(&self) -> EnvSpec;

    /// Starts a new episode and returns `(state, per-agent observations)`.
    fn reset(&mut self, rng: &mut dyn RngCore) -> (Vec<f64>, Vec<Vec<f64>>);

    fn step(&mut self, joint_action: &[usize], rng: &mut dyn RngCore) -> Result<StepResult>;

    /// Optional per-agent action availability; `None` means every action is legal.
    fn avail_actions(&self, _agent: usize) -> Option<Vec<bool>> {
        None
    }

    fn render(&self) -> String {
        String::new()
    }
}

pub(crate) fn check_joint_action(spec: &EnvSpec, joint_action: &[usize]) -> Result<()> {
    use crate::error::IcesError;
    if joint_action.len() != spec.n_agents {
        return Err(IcesError::Dimension(format!(
            "joint action has {} entries for {} agents",
            joint_action.len(),
            spec.n_agents
        )));
    }
    if let Some(a) = joint_action.iter().find(|a| **a >= spec.n_actions) {
        return Err(IcesError::Dimension(format!(
            "action {a} outside [0, {})",
            spec.n_actions
        )));
    }
    Ok(())
}
