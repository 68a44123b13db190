use rand::{Rng, RngCore};

use super::{check_joint_action, EnvSpec, Environment, StepResult};
use crate::error::{IcesError, Result};

/// Explicit transition and reward tables of a small enumerable game.
///
/// Joint actions are indexed with agent 0 most significant:
/// `joint = ((u_0 * |U| + u_1) * |U| + u_2) ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGameTable {
    pub n_states: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    /// `transitions[s * n_joint + joint]` is a distribution over next states.
    pub transitions: Vec<Vec<f64>>,
    /// `rewards[s * n_joint + joint]`.
    pub rewards: Vec<f64>,
    pub start_state: usize,
    /// Absorbing high-reward state; entering it ends the episode as a win.
    pub win_state: Option<usize>,
}

impl MatrixGameTable {
    pub fn new(
        n_states: usize,
        n_agents: usize,
        n_actions: usize,
        transitions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        start_state: usize,
        win_state: Option<usize>,
    ) -> Result<Self> {
        let n_joint = n_actions.pow(n_agents as u32);
        if transitions.len() != n_states * n_joint || rewards.len() != n_states * n_joint {
            return Err(IcesError::Dimension(format!(
                "expected {} table rows",
                n_states * n_joint
            )));
        }
        for (k, row) in transitions.iter().enumerate() {
            if row.len() != n_states || row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                return Err(IcesError::Numeric(format!("row {k} is not a distribution")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(IcesError::Numeric(format!("row {k} sums to {total}")));
            }
        }
        if start_state >= n_states || win_state.is_some_and(|w| w >= n_states) {
            return Err(IcesError::Dimension("start/win state out of range".into()));
        }
        Ok(Self { n_states, n_agents, n_actions, transitions, rewards, start_state, win_state })
    }

    /// The shipped 4-state, 2-agent, 3-action game.
    ///
    /// * state 0: agent 0 alone picks the next state (0 → 1, 1 → 2, 2 → 0);
    ///   agent 1 has no influence.
    /// * state 1: matching actions reach the absorbing state 3 with reward 1;
    ///   mismatched actions fall to state 0 or 2 with equal probability.
    /// * state 2: a noisy TV, uniformly random over states 0–2 whatever the
    ///   agents do.
    /// * state 3: absorbing.
    pub fn shipped() -> Self {
        let (ns, na) = (4, 3);
        let n_joint = na * na;
        let mut transitions = Vec::with_capacity(ns * n_joint);
        let mut rewards = Vec::with_capacity(ns * n_joint);
        for s in 0..ns {
            for a0 in 0..na {
                for a1 in 0..na {
                    let mut row = vec![0.0; ns];
                    let mut r = 0.0;
                    match s {
                        0 => row[[1, 2, 0][a0]] = 1.0,
                        1 if a0 == a1 => {
                            row[3] = 1.0;
                            r = 1.0;
                        }
                        1 => {
                            row[0] = 0.5;
                            row[2] = 0.5;
                        }
                        2 => row[..3].iter_mut().for_each(|p| *p = 1.0 / 3.0),
                        _ => row[3] = 1.0,
                    }
                    transitions.push(row);
                    rewards.push(r);
                }
            }
        }
        Self::new(ns, 2, na, transitions, rewards, 0, Some(3)).expect("shipped table is valid")
    }

    pub fn n_joint(&self) -> usize {
        self.n_actions.pow(self.n_agents as u32)
    }

    pub fn joint_index(&self, joint_action: &[usize]) -> usize {
        joint_action.iter().fold(0, |acc, a| acc * self.n_actions + a)
    }

    pub fn joint_from_index(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_agents];
        for slot in out.iter_mut().rev() {
            *slot = index % self.n_actions;
            index /= self.n_actions;
        }
        out
    }

    pub fn row(&self, state: usize, joint_action: &[usize]) -> &[f64] {
        &self.transitions[state * self.n_joint() + self.joint_index(joint_action)]
    }

    pub fn reward(&self, state: usize, joint_action: &[usize]) -> f64 {
        self.rewards[state * self.n_joint() + self.joint_index(joint_action)]
    }

    /// `P(s' | s, u^{-i})` with agent `i`'s action marginalised uniformly.
    pub fn counterfactual_row(&self, state: usize, joint_action: &[usize], agent: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states];
        let mut u = joint_action.to_vec();
        let w = 1.0 / self.n_actions as f64;
        for a in 0..self.n_actions {
            u[agent] = a;
            for (o, p) in out.iter_mut().zip(self.row(state, &u)) {
                *o += w * p;
            }
        }
        out
    }

    pub fn one_hot(&self, state: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        v[state] = 1.0;
        v
    }
}

/// Exact per-agent influence on the next-state distribution:
/// `KL[ P(s'|s,u) ‖ P(s'|s,u^{-i}) ]` by enumeration.
pub fn oracle_scaffold(
    game: &MatrixGameTable,
    state: usize,
    joint_action: &[usize],
    agent: usize,
) -> Result<f64> {
    if state >= game.n_states || agent >= game.n_agents || joint_action.len() != game.n_agents {
        return Err(IcesError::Dimension("oracle query out of range".into()));
    }
    let p = game.row(state, joint_action);
    let q = game.counterfactual_row(state, joint_action, agent);
    let mut kl = 0.0;
    for (pp, qq) in p.iter().zip(&q) {
        if *pp > 0.0 {
            if *qq <= 0.0 {
                return Err(IcesError::InfiniteKl(format!(
                    "state {state}, action {joint_action:?}, agent {agent}"
                )));
            }
            kl += pp * (pp / qq).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Episodic environment driven by a [`MatrixGameTable`]. State and every
/// observation are the one-hot encoding of the current table state.
#[derive(Clone, Debug)]
pub struct MatrixGame {
    table: MatrixGameTable,
    episode_limit: usize,
    state: usize,
    t: usize,
    done: bool,
}

impl MatrixGame {
    pub fn new(table: MatrixGameTable, episode_limit: usize) -> Result<Self> {
        if episode_limit == 0 {
            return Err(IcesError::config("env.episode_limit", "must be positive"));
        }
        let state = table.start_state;
        Ok(Self { table, episode_limit, state, t: 0, done: false })
    }

    pub fn table(&self) -> &MatrixGameTable {
        &self.table
    }

    pub fn current_state(&self) -> usize {
        self.state
    }

    fn obs(&self) -> Vec<Vec<f64>> {
        vec![self.table.one_hot(self.state); self.table.n_agents]
    }
}

impl Environment for MatrixGame {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: self.table.n_agents,
            n_actions: self.table.n_actions,
            obs_dim: self.table.n_states,
            state_dim: self.table.n_states,
            episode_limit: self.episode_limit,
        }
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> (Vec<f64>, Vec<Vec<f64>>) {
        self.state = self.table.start_state;
        self.t = 0;
        self.done = false;
        (self.table.one_hot(self.state), self.obs())
    }

    fn step(&mut self, joint_action: &[usize], rng: &mut dyn RngCore) -> Result<StepResult> {
        if self.done {
            return Err(IcesError::Protocol("step called after episode end".into()));
        }
        check_joint_action(&self.spec(), joint_action)?;
        let reward_ext = self.table.reward(self.state, joint_action);
        let row = self.table.row(self.state, joint_action);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut next = row.iter().rposition(|p| *p > 0.0).unwrap_or(0);
        for (k, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = k;
                break;
            }
        }
        self.state = next;
        self.t += 1;
        let won = self.table.win_state == Some(next);
        let truncated = !won && self.t >= self.episode_limit;
        self.done = won || truncated;
        Ok(StepResult {
            next_state: self.table.one_hot(next),
            next_obs: self.obs(),
            reward_ext,
            done: self.done,
            won,
            truncated,
        })
    }

    fn render(&self) -> String {
        format!("state {} (t = {})\n", self.state, self.t)
    }
}
