//! Recorded episodes and their padded, time-major batch layout.

use crate::error::{IcesError, Result};
use crate::scaffolds::ScaffoldBatch;

/// One complete episode. `states` and `obs` hold `len + 1` entries (the
/// final entry is the state reached by the last action).
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub states: Vec<Vec<f64>>,
    pub obs: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    /// The last step ended the episode for a reason other than the step limit.
    pub terminated: bool,
    pub won: bool,
}

impl Episode {
    pub fn new(state: Vec<f64>, obs: Vec<Vec<f64>>) -> Self {
        Self { states: vec![state], obs: vec![obs], actions: Vec::new(), rewards: Vec::new(), terminated: false, won: false }
    }

    pub fn push(&mut self, actions: Vec<usize>, reward: f64, next_state: Vec<f64>, next_obs: Vec<Vec<f64>>) {
        self.actions.push(actions);
        self.rewards.push(reward);
        self.states.push(next_state);
        self.obs.push(next_obs);
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// `B` episodes padded to the longest one, stored time-major so that the
/// rows of one time step are contiguous. Row `(t * B + b) * n + i` is agent
/// `i` of episode `b` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub batch: usize,
    pub steps: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    /// `(steps + 1) * B * n * obs_dim`.
    pub obs: Vec<f64>,
    /// `(steps + 1) * B * state_dim`.
    pub states: Vec<f64>,
    /// `steps * B * n`; padding entries are 0.
    pub actions: Vec<usize>,
    /// `steps * B`.
    pub rewards: Vec<f64>,
    /// `steps * B`; 1 on a true terminal step.
    pub terminal: Vec<f64>,
    /// `steps * B`; 1 where the step exists.
    pub mask: Vec<f64>,
    pub lens: Vec<usize>,
}

impl EpisodeBatch {
    pub fn from_episodes(episodes: &[&Episode], n_actions: usize) -> Result<Self> {
        let first = episodes.first().ok_or_else(|| IcesError::Dimension("empty episode batch".into()))?;
        let n = first.obs[0].len();
        let obs_dim = first.obs[0][0].len();
        let state_dim = first.states[0].len();
        let b = episodes.len();
        let steps = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        if steps == 0 {
            return Err(IcesError::Dimension("episodes without steps".into()));
        }
        let mut out = Self {
            batch: b,
            steps,
            n_agents: n,
            n_actions,
            obs_dim,
            state_dim,
            obs: vec![0.0; (steps + 1) * b * n * obs_dim],
            states: vec![0.0; (steps + 1) * b * state_dim],
            actions: vec![0; steps * b * n],
            rewards: vec![0.0; steps * b],
            terminal: vec![0.0; steps * b],
            mask: vec![0.0; steps * b],
            lens: episodes.iter().map(|e| e.len()).collect(),
        };
        for (k, ep) in episodes.iter().enumerate() {
            if ep.states.len() != ep.len() + 1 || ep.obs.len() != ep.len() + 1 || ep.rewards.len() != ep.len() {
                return Err(IcesError::Dimension("episode arrays are misaligned".into()));
            }
            for t in 0..=ep.len() {
                let srow = (t * b + k) * state_dim;
                out.states[srow..srow + state_dim].copy_from_slice(&ep.states[t]);
                for i in 0..n {
                    let orow = ((t * b + k) * n + i) * obs_dim;
                    out.obs[orow..orow + obs_dim].copy_from_slice(&ep.obs[t][i]);
                }
            }
            for t in 0..ep.len() {
                let r = t * b + k;
                out.rewards[r] = ep.rewards[t];
                out.mask[r] = 1.0;
                for i in 0..n {
                    out.actions[r * n + i] = ep.actions[t][i];
                }
            }
            if ep.terminated {
                out.terminal[(ep.len() - 1) * b + k] = 1.0;
            }
        }
        Ok(out)
    }

    /// Rows for one step of the recurrent agents at time `t`:
    /// `[obs, one-hot previous action (zeros at t = 0), one-hot agent id]`.
    pub fn agent_inputs(&self, t: usize) -> Vec<f64> {
        let (b, n, u) = (self.batch, self.n_agents, self.n_actions);
        let width = self.obs_dim + u + n;
        let mut out = vec![0.0; b * n * width];
        for k in 0..b {
            for i in 0..n {
                let row = k * n + i;
                let dst = &mut out[row * width..(row + 1) * width];
                let src = ((t * b + k) * n + i) * self.obs_dim;
                dst[..self.obs_dim].copy_from_slice(&self.obs[src..src + self.obs_dim]);
                if t > 0 {
                    let prev = self.actions[((t - 1) * b + k) * n + i];
                    dst[self.obs_dim + prev] = 1.0;
                }
                dst[self.obs_dim + u + i] = 1.0;
            }
        }
        out
    }

    /// States at time `t`, one row per episode.
    pub fn states_at(&self, t: usize) -> &[f64] {
        let w = self.batch * self.state_dim;
        &self.states[t * w..(t + 1) * w]
    }

    /// Actions at time `t`, `B * n` entries.
    pub fn actions_at(&self, t: usize) -> &[usize] {
        let w = self.batch * self.n_agents;
        &self.actions[t * w..(t + 1) * w]
    }

    /// Number of real (unpadded) steps.
    pub fn valid_steps(&self) -> usize {
        self.lens.iter().sum()
    }

    /// All real transitions in `(t, b)` order, plus each one's flat `t * B + b` index.
    pub fn transitions(&self) -> (ScaffoldBatch, Vec<usize>) {
        let (b, n, sd) = (self.batch, self.n_agents, self.state_dim);
        let mut out = ScaffoldBatch::default();
        let mut index = Vec::new();
        for t in 0..self.steps {
            for k in 0..b {
                let r = t * b + k;
                if self.mask[r] == 0.0 {
                    continue;
                }
                out.push(
                    &self.states[r * sd..(r + 1) * sd],
                    &self.actions[r * n..(r + 1) * n],
                    &self.states[(r + b) * sd..(r + b + 1) * sd],
                );
                index.push(r);
            }
        }
        (out, index)
    }
}

/// `[len(idx), width]` one-hot rows.
pub fn one_hot(idx: &[usize], width: usize) -> Vec<f64> {
    crate::nn::layers::one_hot_rows(idx, width)
}
