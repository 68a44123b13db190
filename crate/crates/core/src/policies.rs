//! Exploitation (recurrent agent Q-networks plus a monotonic mixer) and
//! exploration (stochastic actor with a value baseline) policies, and the
//! behavior policy that mixes them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::AdvantageMode;
use crate::episode::EpisodeBatch;
use crate::error::{IcesError, Result};
use crate::nn::dist::{argmax, categorical_entropy, categorical_sample, CategoricalDist};
use crate::nn::layers::{one_hot_rows, Activation, GruCell, Linear, Mlp};
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub mixer_embed: usize,
}

impl PolicyDims {
    /// Width of one agent input row: observation, previous action, agent id.
    pub fn agent_input(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }
}

/// Input row for one agent at one step.
pub fn agent_input_row(dims: &PolicyDims, obs: &[f64], prev_action: Option<usize>, agent_id: usize) -> Vec<f64> {
    let mut row = vec![0.0; dims.agent_input()];
    row[..dims.obs_dim].copy_from_slice(obs);
    if let Some(a) = prev_action {
        row[dims.obs_dim + a] = 1.0;
    }
    row[dims.obs_dim + dims.n_actions + agent_id] = 1.0;
    row
}

/// `relu(x W + b)` followed by a GRU cell.
#[derive(Clone, Debug)]
pub struct RecurrentTrunk {
    pub fc: Linear,
    pub gru: GruCell,
}

impl RecurrentTrunk {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc: Linear::new(store, &format!("{name}.fc"), input, hidden, rng),
            gru: GruCell::new(store, &format!("{name}.gru"), hidden, hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let a = self.fc.forward(tape, store, x)?;
        let a = tape.relu(a);
        self.gru.forward(tape, store, a, h)
    }

    /// Hidden states for every time step of `batch`, each `[B * n, H]`.
    pub fn unroll(&self, tape: &mut Tape, store: &ParamStore, batch: &EpisodeBatch, steps: usize) -> Result<Vec<Var>> {
        let rows = batch.batch * batch.n_agents;
        let mut h = tape.zeros(rows, self.gru.hidden_dim);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = tape.constant_rows(rows, self.fc.in_dim, batch.agent_inputs(t));
            h = self.forward(tape, store, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Shared per-agent utility network.
#[derive(Clone, Debug)]
pub struct AgentNet {
    pub trunk: RecurrentTrunk,
    pub head: Linear,
}

impl AgentNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: &PolicyDims, rng: &mut R) -> Self {
        Self {
            trunk: RecurrentTrunk::new(store, "agent", dims.agent_input(), dims.hidden, rng),
            head: Linear::new(store, "agent.q", dims.hidden, dims.n_actions, rng),
        }
    }

    /// Returns `(q [rows, U], h' [rows, H])`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(tape, store, x, h)?;
        Ok((self.head.forward(tape, store, h)?, h))
    }
}

/// QMIX mixing network. Mixing weights come from hypernetworks of the state
/// passed through an absolute value, so `Q_tot` is monotone in every `Q_i`.
#[derive(Clone, Debug)]
pub struct Mixer {
    pub hyper_w1: Linear,
    pub hyper_b1: Linear,
    pub hyper_w2: Linear,
    pub state_value: Mlp,
    pub n_agents: usize,
    pub embed: usize,
}

impl Mixer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: &PolicyDims, rng: &mut R) -> Self {
        let (s, n, e) = (dims.state_dim, dims.n_agents, dims.mixer_embed);
        Self {
            hyper_w1: Linear::new(store, "mixer.hyper_w1", s, n * e, rng),
            hyper_b1: Linear::new(store, "mixer.hyper_b1", s, e, rng),
            hyper_w2: Linear::new(store, "mixer.hyper_w2", s, e, rng),
            state_value: Mlp::new(store, "mixer.v", &[s, e, 1], Activation::Relu, rng),
            n_agents: n,
            embed: e,
        }
    }

    /// `q [B, n]`, `s [B, S]` → `Q_tot [B, 1]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var, s: Var) -> Result<Var> {
        let (b, n) = tape.shape(q);
        if n != self.n_agents || tape.shape(s).0 != b {
            return Err(IcesError::Dimension(format!(
                "mixer expects q [B, {}] and s [B, _], got q [{b}, {n}], s {:?}",
                self.n_agents,
                tape.shape(s)
            )));
        }
        let w1 = self.hyper_w1.forward(tape, store, s)?;
        let w1 = tape.abs(w1);
        let b1 = self.hyper_b1.forward(tape, store, s)?;
        let hidden = tape.row_bilinear(q, w1, self.embed);
        let hidden = tape.add(hidden, b1);
        let hidden = tape.elu(hidden);
        let w2 = self.hyper_w2.forward(tape, store, s)?;
        let w2 = tape.abs(w2);
        let y = tape.mul(hidden, w2);
        let y = tape.sum_cols(y);
        let v = self.state_value.forward(tape, store, s)?;
        Ok(tape.add(y, v))
    }
}

/// Exploitation parameters ζ and the frozen target copy ζ⁻.
#[derive(Clone, Debug)]
pub struct ExploitParams {
    pub dims: PolicyDims,
    pub store: ParamStore,
    pub target: ParamStore,
    pub agent: AgentNet,
    pub mixer: Mixer,
}

impl ExploitParams {
    pub fn new<R: Rng + ?Sized>(dims: PolicyDims, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let agent = AgentNet::new(&mut store, &dims, rng);
        let mixer = Mixer::new(&mut store, &dims, rng);
        let target = store.clone();
        Self { dims, store, target, agent, mixer }
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_from(&self.store)
    }

    /// Forward-only agent step for `rows` agents at once using ζ.
    pub fn q_step(&self, inputs: &[f64], hidden: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.constant_rows(rows, self.dims.agent_input(), inputs.to_vec());
        let h = tape.constant_rows(rows, self.dims.hidden, hidden.to_vec());
        let (q, h) = self.agent.step(&mut tape, &self.store, x, h)?;
        Ok((tape.value(q).data.clone(), tape.value(h).data.clone()))
    }

    /// Q values over actions for one agent, and the next hidden state.
    pub fn agent_q(&self, obs: &[f64], prev_action: Option<usize>, agent_id: usize, hidden: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if obs.len() != self.dims.obs_dim || hidden.len() != self.dims.hidden || agent_id >= self.dims.n_agents {
            return Err(IcesError::Dimension("agent_q input shapes".into()));
        }
        let row = agent_input_row(&self.dims, obs, prev_action, agent_id);
        self.q_step(&row, hidden, 1)
    }

    /// `Q_tot` for one joint utility vector.
    pub fn mix(&self, q: &[f64], s: &[f64]) -> Result<f64> {
        if q.len() != self.dims.n_agents || s.len() != self.dims.state_dim {
            return Err(IcesError::Dimension("mix input shapes".into()));
        }
        let mut tape = Tape::new();
        let qv = tape.constant_rows(1, q.len(), q.to_vec());
        let sv = tape.constant_rows(1, s.len(), s.to_vec());
        let y = self.mixer.forward(&mut tape, &self.store, qv, sv)?;
        Ok(tape.scalar(y))
    }

    /// `max_u Q_tot(τ_{t+1}, u, s_{t+1})` under `store` for every `(t, b)`,
    /// as `steps * B` values. Monotone mixing lets each agent maximise alone.
    pub fn max_next_q_tot(&self, store: &ParamStore, batch: &EpisodeBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (b, n) = (batch.batch, batch.n_agents);
        let hs = self.agent.trunk.unroll(&mut tape, store, batch, batch.steps + 1)?;
        let mut out = Vec::with_capacity(batch.steps * b);
        for t in 1..=batch.steps {
            let q = self.agent.head.forward(&mut tape, store, hs[t])?;
            let qm = tape.value(q);
            let best: Vec<f64> = (0..b * n).map(|r| qm.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
            let qv = tape.constant_rows(b, n, best);
            let sv = tape.constant_rows(b, batch.state_dim, batch.states_at(t).to_vec());
            let y = self.mixer.forward(&mut tape, store, qv, sv)?;
            out.extend_from_slice(&tape.value(y).data);
        }
        Ok(out)
    }

    /// `y = r + γ (1 − terminal) max Q_tot(·; store)` per `(t, b)`. Steps
    /// cut by the episode limit bootstrap like any other step.
    pub fn td_targets(&self, store: &ParamStore, batch: &EpisodeBatch, rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
        if rewards.len() != batch.steps * batch.batch {
            return Err(IcesError::Dimension("one reward per (t, b) expected".into()));
        }
        let next = if gamma == 0.0 { vec![0.0; rewards.len()] } else { self.max_next_q_tot(store, batch)? };
        Ok(rewards
            .iter()
            .zip(&next)
            .zip(&batch.terminal)
            .map(|((r, q), d)| if *d == 1.0 || gamma == 0.0 { *r } else { r + gamma * q })
            .collect())
    }

    /// Chosen-action `Q_tot(τ_t, u_t, s_t)` for all `(t, b)`, `[steps * B, 1]`.
    pub fn chosen_q_tot(&self, tape: &mut Tape, store: &ParamStore, batch: &EpisodeBatch) -> Result<Var> {
        let (b, n) = (batch.batch, batch.n_agents);
        let hs = self.agent.trunk.unroll(tape, store, batch, batch.steps)?;
        let mut per_t = Vec::with_capacity(batch.steps);
        for (t, h) in hs.into_iter().enumerate() {
            let q = self.agent.head.forward(tape, store, h)?;
            let chosen = tape.gather_cols(q, batch.actions_at(t));
            let chosen = tape.reshape(chosen, b, n);
            let s = tape.constant_rows(b, batch.state_dim, batch.states_at(t).to_vec());
            per_t.push(self.mixer.forward(tape, store, chosen, s)?);
        }
        Ok(tape.concat_rows(&per_t))
    }

    /// Masked mean of `(y − Q_tot)²` with targets already computed.
    pub fn td_loss_on_tape(&self, tape: &mut Tape, store: &ParamStore, batch: &EpisodeBatch, targets: &[f64]) -> Result<Var> {
        let q = self.chosen_q_tot(tape, store, batch)?;
        let rows = batch.steps * batch.batch;
        let y = tape.constant_rows(rows, 1, targets.to_vec());
        let m = tape.constant_rows(rows, 1, batch.mask.clone());
        let d = tape.sub(q, y);
        let d = tape.square(d);
        let d = tape.mul(d, m);
        let total = tape.sum_all(d);
        Ok(tape.scale(total, 1.0 / batch.valid_steps().max(1) as f64))
    }

    /// TD loss with targets from ζ⁻.
    pub fn td_loss(&self, batch: &EpisodeBatch, rewards: &[f64], gamma: f64) -> Result<f64> {
        let targets = self.td_targets(&self.target, batch, rewards, gamma)?;
        let mut tape = Tape::new();
        let loss = self.td_loss_on_tape(&mut tape, &self.store, batch, &targets)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(IcesError::Numeric("non-finite TD loss".into()));
        }
        Ok(v)
    }
}

/// Exploration actor ξ (own recurrent trunk plus logits head) and value
/// baseline η (reads the detached trunk encoding).
#[derive(Clone, Debug)]
pub struct ExploreParams {
    pub dims: PolicyDims,
    pub use_state: bool,
    pub store: ParamStore,
    pub value_store: ParamStore,
    pub trunk: RecurrentTrunk,
    pub actor: Mlp,
    pub value: Mlp,
}

/// Per-row inputs shared by the actor and value losses.
#[derive(Clone, Debug, Default)]
pub struct ExploreTargets {
    /// `r^i_int` for row `(t * B + b) * n + i`.
    pub r_int: Vec<f64>,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExploreLosses {
    pub actor: f64,
    pub value: f64,
    pub entropy: f64,
}

impl ExploreParams {
    pub fn new<R: Rng + ?Sized>(dims: PolicyDims, use_state: bool, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let trunk = RecurrentTrunk::new(&mut store, "explore", dims.agent_input(), dims.hidden, rng);
        let head_in = dims.hidden + dims.state_dim + dims.n_agents;
        let actor = Mlp::new(&mut store, "explore.actor", &[head_in, dims.hidden, dims.n_actions], Activation::Relu, rng);
        let mut value_store = ParamStore::new();
        let value = Mlp::new(&mut value_store, "value", &[head_in, dims.hidden, 1], Activation::Relu, rng);
        Self { dims, use_state, store, value_store, trunk, actor, value }
    }

    /// `[enc, s or zeros, agent one-hot]` for `rows` rows; `states` holds one
    /// state per group of `n` consecutive rows.
    fn head_input(&self, tape: &mut Tape, enc: Var, states: &[f64]) -> Var {
        let (rows, _) = tape.shape(enc);
        let (n, sd) = (self.dims.n_agents, self.dims.state_dim);
        let mut s = vec![0.0; rows * sd];
        if self.use_state {
            for r in 0..rows {
                let g = r / n;
                s[r * sd..(r + 1) * sd].copy_from_slice(&states[g * sd..(g + 1) * sd]);
            }
        }
        let ids: Vec<usize> = (0..rows).map(|r| r % n).collect();
        let sv = tape.constant_rows(rows, sd, s);
        let idv = tape.constant_rows(rows, n, one_hot_rows(&ids, n));
        tape.concat_cols(&[enc, sv, idv])
    }

    /// Forward-only actor step for the `n` agents of one episode. Returns
    /// logits `[n * U]` and the next hidden state.
    pub fn step(&self, inputs: &[f64], hidden: &[f64], state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows = self.dims.n_agents;
        let mut tape = Tape::new();
        let x = tape.constant_rows(rows, self.dims.agent_input(), inputs.to_vec());
        let h = tape.constant_rows(rows, self.dims.hidden, hidden.to_vec());
        let h = self.trunk.forward(&mut tape, &self.store, x, h)?;
        let z = self.head_input(&mut tape, h, state);
        let logits = self.actor.forward(&mut tape, &self.store, z)?;
        Ok((tape.value(logits).data.clone(), tape.value(h).data.clone()))
    }

    /// ν_i given an encoding of τ^i, the state and the agent id.
    pub fn explore_dist(&self, encoding: &[f64], s: &[f64], agent_id: usize) -> Result<CategoricalDist> {
        if encoding.len() != self.dims.hidden || s.len() != self.dims.state_dim || agent_id >= self.dims.n_agents {
            return Err(IcesError::Dimension("explore_dist input shapes".into()));
        }
        let mut tape = Tape::new();
        let mut z = encoding.to_vec();
        z.extend(if self.use_state { s.to_vec() } else { vec![0.0; s.len()] });
        z.extend(one_hot_rows(&[agent_id], self.dims.n_agents));
        let zv = tape.constant_rows(1, z.len(), z);
        let logits = self.actor.forward(&mut tape, &self.store, zv)?;
        Ok(CategoricalDist::new(tape.value(logits).data.clone()))
    }

    /// Builds actor and value losses over every real `(t, i)` of `batch`.
    /// The actor term depends only on ξ and the value term only on η, so a
    /// single backward pass feeds both stores. `fixed_advantage` replaces the
    /// advantages computed from the current parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn losses_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        value_store: &ParamStore,
        batch: &EpisodeBatch,
        targets: &ExploreTargets,
        mode: AdvantageMode,
        fixed_advantage: Option<&[f64]>,
    ) -> Result<(Var, Var, ExploreLosses)> {
        let (b, n) = (batch.batch, batch.n_agents);
        let total = batch.steps * b * n;
        if targets.r_int.len() != total {
            return Err(IcesError::Dimension(format!("expected {total} intrinsic rewards, got {}", targets.r_int.len())));
        }
        let hs = self.trunk.unroll(tape, store, batch, batch.steps)?;
        let mut logits = Vec::with_capacity(batch.steps);
        let mut values = Vec::with_capacity(batch.steps);
        for (t, h) in hs.into_iter().enumerate() {
            let z = self.head_input(tape, h, batch.states_at(t));
            logits.push(self.actor.forward(tape, store, z)?);
            let zd = tape.detach(z);
            values.push(self.value.forward(tape, value_store, zd)?);
        }
        let logits = tape.concat_rows(&logits);
        let v = tape.concat_rows(&values);
        let mask: Vec<f64> = (0..total).map(|r| batch.mask[r / n]).collect();
        let logp = tape.log_softmax(logits);
        let chosen = tape.gather_cols(logp, &batch.actions);
        let advantage = match fixed_advantage {
            Some(a) => a.to_vec(),
            None => advantages(&tape.value(chosen).data, &targets.r_int, &tape.value(v).data, targets.beta, mode),
        };
        let entropy = masked_entropy(tape.value(logp), &mask);
        let actor = surrogate_loss(tape, chosen, &advantage, &mask)?;
        let value = value_loss_rows(tape, v, &targets.r_int, &mask);
        let stats = ExploreLosses { actor: tape.scalar(actor), value: tape.scalar(value), entropy };
        Ok((actor, value, stats))
    }

    /// Advantages for every row under the current ξ and η, for callers that
    /// need to hold them fixed.
    pub fn advantages(&self, batch: &EpisodeBatch, targets: &ExploreTargets, mode: AdvantageMode) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let hs = self.trunk.unroll(&mut tape, &self.store, batch, batch.steps)?;
        let mut lp = Vec::new();
        let mut vs = Vec::new();
        for (t, h) in hs.into_iter().enumerate() {
            let z = self.head_input(&mut tape, h, batch.states_at(t));
            let l = self.actor.forward(&mut tape, &self.store, z)?;
            let l = tape.log_softmax(l);
            let c = tape.gather_cols(l, batch.actions_at(t));
            lp.extend_from_slice(&tape.value(c).data);
            let v = self.value.forward(&mut tape, &self.value_store, z)?;
            vs.extend_from_slice(&tape.value(v).data);
        }
        Ok(advantages(&lp, &targets.r_int, &vs, targets.beta, mode))
    }
}

/// `A = r − V − β (1 + log ν(u))` (exact entropy) or `A = r − V − β`.
pub fn advantages(log_prob: &[f64], r_int: &[f64], baseline: &[f64], beta: f64, mode: AdvantageMode) -> Vec<f64> {
    log_prob
        .iter()
        .zip(r_int)
        .zip(baseline)
        .map(|((lp, r), v)| match mode {
            AdvantageMode::ExactEntropy => r - v - beta * (1.0 + lp),
            AdvantageMode::PaperLiteral => r - v - beta,
        })
        .collect()
}

/// `−Σ mask · A · log ν(u) / Σ mask` with `A` held constant; `chosen` is
/// the `[rows, 1]` column of chosen-action log-probabilities.
pub fn surrogate_loss(tape: &mut Tape, chosen: Var, advantage: &[f64], mask: &[f64]) -> Result<Var> {
    let (rows, _) = tape.shape(chosen);
    if advantage.len() != rows || mask.len() != rows {
        return Err(IcesError::Dimension("actor loss rows are misaligned".into()));
    }
    let weight = mask.iter().sum::<f64>().max(1.0);
    let coef: Vec<f64> = advantage.iter().zip(mask).map(|(a, m)| -a * m / weight).collect();
    let c = tape.constant_rows(rows, 1, coef);
    let terms = tape.mul(chosen, c);
    Ok(tape.sum_all(terms))
}

/// Mean entropy of the masked rows of a log-probability matrix.
pub fn masked_entropy(logp: &crate::nn::tape::Mat, mask: &[f64]) -> f64 {
    let weight = mask.iter().sum::<f64>().max(1.0);
    let mut entropy = 0.0;
    for (k, m) in mask.iter().enumerate() {
        if *m > 0.0 {
            entropy -= logp.row(k).iter().filter(|l| l.is_finite()).map(|l| l.exp() * l).sum::<f64>() * m;
        }
    }
    entropy / weight
}

/// Actor loss over rows of `logits`; returns the loss and mean entropy.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss_rows(
    tape: &mut Tape,
    logits: Var,
    actions: &[usize],
    r_int: &[f64],
    baseline: &[f64],
    mask: &[f64],
    beta: f64,
    mode: AdvantageMode,
) -> Result<(Var, f64)> {
    let (rows, _) = tape.shape(logits);
    if actions.len() != rows || r_int.len() != rows || baseline.len() != rows {
        return Err(IcesError::Dimension("actor loss rows are misaligned".into()));
    }
    let logp = tape.log_softmax(logits);
    let chosen = tape.gather_cols(logp, actions);
    let adv = advantages(&tape.value(chosen).data, r_int, baseline, beta, mode);
    let entropy = masked_entropy(tape.value(logp), mask);
    Ok((surrogate_loss(tape, chosen, &adv, mask)?, entropy))
}

/// `Σ mask (r − V)² / Σ mask`.
pub fn value_loss_rows(tape: &mut Tape, v: Var, r_int: &[f64], mask: &[f64]) -> Var {
    let (rows, _) = tape.shape(v);
    let weight = mask.iter().sum::<f64>().max(1.0);
    let r = tape.constant_rows(rows, 1, r_int.to_vec());
    let m = tape.constant_rows(rows, 1, mask.to_vec());
    let d = tape.sub(r, v);
    let d = tape.square(d);
    let d = tape.mul(d, m);
    let s = tape.sum_all(d);
    tape.scale(s, 1.0 / weight)
}

/// Mixing and residual ε-greedy rates at one point of training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BehaviorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BehaviorChoice {
    pub action: usize,
    pub explored: bool,
}

/// Greedy action, skipping unavailable ones; lowest index wins ties.
pub fn greedy_action(q: &[f64], avail: Option<&[bool]>) -> usize {
    match avail {
        None => argmax(q),
        Some(m) => {
            let masked: Vec<f64> = q.iter().zip(m).map(|(v, ok)| if *ok { *v } else { f64::NEG_INFINITY }).collect();
            argmax(&masked)
        }
    }
}

/// With probability α samples from ν_i; otherwise acts greedily on `q`, with
/// a uniformly random action instead with probability ε.
pub fn behavior_action<R: Rng + ?Sized>(
    explore: Option<&CategoricalDist>,
    q: &[f64],
    alpha: f64,
    epsilon: f64,
    avail: Option<&[bool]>,
    rng: &mut R,
) -> Result<BehaviorChoice> {
    if alpha > 0.0 && rng.gen::<f64>() < alpha {
        let dist = explore.ok_or_else(|| IcesError::Protocol("α > 0 without an exploration policy".into()))?;
        let dist = match avail {
            Some(m) => CategoricalDist::new(
                dist.logits.iter().zip(m).map(|(l, ok)| if *ok { *l } else { f64::NEG_INFINITY }).collect(),
            ),
            None => dist.clone(),
        };
        return Ok(BehaviorChoice { action: categorical_sample(&dist, rng)?, explored: true });
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        let legal: Vec<usize> = (0..q.len()).filter(|&a| avail.map_or(true, |m| m[a])).collect();
        if legal.is_empty() {
            return Err(IcesError::DegenerateDistribution("no available action".into()));
        }
        return Ok(BehaviorChoice { action: legal[rng.gen_range(0..legal.len())], explored: false });
    }
    Ok(BehaviorChoice { action: greedy_action(q, avail), explored: false })
}

/// Entropy of the actor distribution for diagnostics.
pub fn entropy_of(logits: &[f64]) -> Result<f64> {
    categorical_entropy(&CategoricalDist::new(logits.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use crate::nn::optim::{adam_step, OptimizerState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> PolicyDims {
        PolicyDims { obs_dim: 3, state_dim: 4, n_agents: 2, n_actions: 3, hidden: 5, mixer_embed: 4 }
    }

    fn random_batch(d: &PolicyDims, rng: &mut ChaCha8Rng, episodes: usize) -> EpisodeBatch {
        crate::checks::random_episode_batch(d, rng, episodes).unwrap()
    }

    #[test]
    fn zero_network_ties_break_to_first_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ExploitParams::new(dims(), &mut rng);
        p.store.fill_zero();
        let (q, _) = p.agent_q(&[0.3, -1.0, 2.0], Some(1), 0, &[0.0; 5]).unwrap();
        assert!(q.iter().all(|v| *v == q[0]));
        assert_eq!(greedy_action(&q, None), 0);
        assert_eq!(greedy_action(&[5.0, 1.0, 2.0], Some(&[false, true, true])), 2);
    }

    #[test]
    fn mixer_is_monotone_in_every_agent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = PolicyDims { n_agents: 3, ..dims() };
        let mut violations = 0;
        for _ in 0..10_000 {
            let p = ExploitParams::new(d, &mut rng);
            let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let i = rng.gen_range(0..3);
            let delta = rng.gen_range(1e-3..2.0);
            let mut bumped = q.clone();
            bumped[i] += delta;
            if p.mix(&bumped, &s).unwrap() < p.mix(&q, &s).unwrap() {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn single_agent_identity_mixer_adds_state_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = PolicyDims { n_agents: 1, mixer_embed: 1, ..dims() };
        let mut p = ExploitParams::new(d, &mut rng);
        for name in ["mixer.hyper_w1.weight", "mixer.hyper_b1.weight", "mixer.hyper_b1.bias", "mixer.hyper_w2.weight"] {
            let id = p.store.find(name).unwrap();
            p.store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        for name in ["mixer.hyper_w1.bias", "mixer.hyper_w2.bias"] {
            let id = p.store.find(name).unwrap();
            p.store.get_mut(id).data[0] = -1.0;
        }
        let s = [0.2, -0.4, 1.0, 0.5];
        let mut tape = Tape::new();
        let sv = tape.constant_rows(1, 4, s.to_vec());
        let v = p.mixer.state_value.forward(&mut tape, &p.store, sv).unwrap();
        let bias = tape.scalar(v);
        for q in [0.0, 0.7, 3.2] {
            assert!((p.mix(&[q], &s).unwrap() - (q + bias)).abs() < 1e-12);
        }
    }

    #[test]
    fn td_target_with_zero_discount_is_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = dims();
        let p = ExploitParams::new(d, &mut rng);
        let batch = random_batch(&d, &mut rng, 3);
        let y = p.td_targets(&p.target, &batch, &batch.rewards, 0.0).unwrap();
        assert_eq!(y, batch.rewards);
    }

    #[test]
    fn td_targets_agree_after_sync() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = dims();
        let mut p = ExploitParams::new(d, &mut rng);
        p.store.tensors_mut()[0].data[0] += 0.5;
        let batch = random_batch(&d, &mut rng, 2);
        let before_online = p.td_targets(&p.store, &batch, &batch.rewards, 0.9).unwrap();
        let before_target = p.td_targets(&p.target, &batch, &batch.rewards, 0.9).unwrap();
        assert_ne!(before_online, before_target);
        p.sync_target().unwrap();
        let after = p.td_targets(&p.target, &batch, &batch.rewards, 0.9).unwrap();
        assert_eq!(before_online, after);
    }

    #[test]
    fn td_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = dims();
        let mut p = ExploitParams::new(d, &mut rng);
        p.target.tensors_mut().iter_mut().for_each(|t| t.data.iter_mut().for_each(|x| *x *= 0.5));
        let batch = random_batch(&d, &mut rng, 2);
        let targets = p.td_targets(&p.target, &batch, &batch.rewards, 0.99).unwrap();
        let check = check_gradients(&p.store, |tape, s| p.td_loss_on_tape(tape, s, &batch, &targets), false).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn zero_actor_is_uniform_and_no_s_ignores_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut e = ExploreParams::new(dims(), true, &mut rng);
        e.store.fill_zero();
        let d = e.explore_dist(&[0.1; 5], &[1.0; 4], 1).unwrap();
        assert!((entropy_of(&d.logits).unwrap() - 3f64.ln()).abs() < 1e-12);

        let e = ExploreParams::new(dims(), false, &mut rng);
        let a = e.explore_dist(&[0.1, 0.2, 0.3, 0.4, 0.5], &[1.0, 2.0, 3.0, 4.0], 0).unwrap();
        let b = e.explore_dist(&[0.1, 0.2, 0.3, 0.4, 0.5], &[-1.0, 0.0, 9.0, 4.0], 0).unwrap();
        assert_eq!(a, b);
        let c = e.explore_dist(&[0.1, 0.2, 0.3, 0.4, 0.5], &[-1.0, 0.0, 9.0, 4.0], 0).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn behavior_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dist = CategoricalDist::new(vec![0.0, 0.0, 0.0]);
        let q = [0.1, 0.9, 0.3];
        for _ in 0..1000 {
            let c = behavior_action(Some(&dist), &q, 0.0, 0.0, None, &mut rng).unwrap();
            assert_eq!(c, BehaviorChoice { action: 1, explored: false });
            assert!(behavior_action(Some(&dist), &q, 1.0, 0.0, None, &mut rng).unwrap().explored);
        }
        assert!(behavior_action(None, &q, 1.0, 0.0, None, &mut rng).is_err());
    }

    #[test]
    fn behavior_mixing_fraction_is_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dist = CategoricalDist::new(vec![0.0, 1.0, -1.0]);
        let n = 100_000;
        let explored = (0..n)
            .filter(|_| behavior_action(Some(&dist), &[0.0, 1.0, 0.0], 0.5, 0.1, None, &mut rng).unwrap().explored)
            .count();
        let f = explored as f64 / n as f64;
        assert!((0.494..=0.506).contains(&f), "{f}");
    }

    fn toy_logits_loss(mode: AdvantageMode, beta: f64, r: &[f64], baseline: f64) -> Vec<f64> {
        let mut store = ParamStore::new();
        let id = store.add("logits", crate::nn::tensor::Tensor::row(&[0.3, -0.2, 0.5]));
        let actions = [0, 1, 2, 1, 0];
        let rr: Vec<f64> = actions.iter().map(|a| r[*a]).collect();
        let mut tape = Tape::new();
        let l = tape.param(&store, id);
        let rows = tape.gather_rows(l, &[0; 5]);
        let (loss, _) = actor_loss_rows(&mut tape, rows, &actions, &rr, &[baseline; 5], &[1.0; 5], beta, mode).unwrap();
        tape.backward(loss);
        tape.accumulate_grads(&mut store);
        store.get(id).grad.clone().unwrap()
    }

    #[test]
    fn advantage_modes_coincide_without_entropy_bonus() {
        let r = [0.4, 1.0, -0.3];
        let a = toy_logits_loss(AdvantageMode::ExactEntropy, 0.0, &r, 0.2);
        let b = toy_logits_loss(AdvantageMode::PaperLiteral, 0.0, &r, 0.2);
        assert_eq!(a, b);
        let z = toy_logits_loss(AdvantageMode::PaperLiteral, 0.3, &[0.5; 3], 0.2);
        assert!(z.iter().all(|g| g.abs() < 1e-15), "{z:?}");
    }

    #[test]
    fn explore_losses_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = dims();
        let e = ExploreParams::new(d, true, &mut rng);
        let batch = random_batch(&d, &mut rng, 2);
        let r_int: Vec<f64> = (0..batch.steps * batch.batch * d.n_agents).map(|_| rng.gen_range(0.0..2.0)).collect();
        let targets = ExploreTargets { r_int, beta: 0.1 };
        for mode in [AdvantageMode::ExactEntropy, AdvantageMode::PaperLiteral] {
            let adv = e.advantages(&batch, &targets, mode).unwrap();
            let actor = check_gradients(&e.store, |tape, s| Ok(e.losses_on_tape(tape, s, &e.value_store, &batch, &targets, mode, Some(&adv))?.0), false).unwrap();
            assert!(actor.max_rel_error < 1e-4, "{mode:?} {actor:?}");
        }
        let value = check_gradients(&e.value_store, |tape, s| Ok(e.losses_on_tape(tape, &e.store, s, &batch, &targets, AdvantageMode::ExactEntropy, None)?.1), false).unwrap();
        assert!(value.max_rel_error < 1e-4, "{value:?}");
    }

    #[test]
    fn value_regresses_to_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = dims();
        let mut e = ExploreParams::new(d, true, &mut rng);
        let batch = random_batch(&d, &mut rng, 2);
        let rows = batch.steps * batch.batch * d.n_agents;
        let targets = ExploreTargets { r_int: vec![0.7; rows], beta: 0.0 };
        let mut opt = OptimizerState::for_store(&e.value_store);
        for _ in 0..2000 {
            e.value_store.zero_grad();
            let mut tape = Tape::new();
            let (_, v, _) = e.losses_on_tape(&mut tape, &e.store, &e.value_store, &batch, &targets, AdvantageMode::ExactEntropy, None).unwrap();
            tape.backward(v);
            tape.accumulate_grads(&mut e.value_store);
            adam_step(&mut e.value_store, &mut opt, 1e-2).unwrap();
        }
        let mut tape = Tape::new();
        let (_, _, stats) = e.losses_on_tape(&mut tape, &e.store, &e.value_store, &batch, &targets, AdvantageMode::ExactEntropy, None).unwrap();
        assert!(stats.value.sqrt() < 1e-2, "{}", stats.value);
    }

    /// Rows drawn in exact proportion to ν: every action appears
    /// `round(ν(u) N)` times, so the sample mean has no sampling noise
    /// beyond rounding.
    fn stratified_actions(probs: &[f64], n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        for (u, p) in probs.iter().enumerate() {
            let k = if u + 1 == probs.len() { n - out.len() } else { (p * n as f64).round() as usize };
            out.extend(std::iter::repeat(u).take(k));
        }
        out
    }

    fn surrogate_grad(theta: &[f64], r: &[f64], baseline: f64, beta: f64, mode: AdvantageMode, n: usize) -> Vec<f64> {
        let probs = CategoricalDist::new(theta.to_vec()).probs().unwrap();
        let actions = stratified_actions(&probs, n);
        let mut store = ParamStore::new();
        let id = store.add("logits", crate::nn::tensor::Tensor::row(theta));
        let mut tape = Tape::new();
        let l = tape.param(&store, id);
        let rows = tape.gather_rows(l, &vec![0; n]);
        let rr: Vec<f64> = actions.iter().map(|a| r[*a]).collect();
        let (loss, _) = actor_loss_rows(&mut tape, rows, &actions, &rr, &vec![baseline; n], &vec![1.0; n], beta, mode).unwrap();
        tape.backward(loss);
        tape.accumulate_grads(&mut store);
        store.get(id).grad.clone().unwrap().iter().map(|g| -g).collect()
    }

    #[test]
    fn exact_entropy_gradient_matches_regularised_objective() {
        let theta = [0.4, -0.3, 0.1];
        let r = [1.0, 0.2, -0.5];
        let beta = 0.3;
        let objective = |th: &[f64]| {
            let p = CategoricalDist::new(th.to_vec()).probs().unwrap();
            p.iter().zip(&r).map(|(p, r)| p * r).sum::<f64>() - beta * p.iter().map(|p| p * p.ln()).sum::<f64>()
        };
        let h = 1e-6;
        let numeric: Vec<f64> = (0..3)
            .map(|k| {
                let mut up = theta;
                let mut down = theta;
                up[k] += h;
                down[k] -= h;
                (objective(&up) - objective(&down)) / (2.0 * h)
            })
            .collect();
        let analytic = surrogate_grad(&theta, &r, 0.25, beta, AdvantageMode::ExactEntropy, 100_000);
        let scale = numeric.iter().map(|g| g.abs()).fold(0.0, f64::max);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() / scale <= 1e-3, "{analytic:?} vs {numeric:?}");
        }
        // the literal form misses the log-probability term
        let literal = surrogate_grad(&theta, &r, 0.25, beta, AdvantageMode::PaperLiteral, 100_000);
        assert!(literal.iter().zip(&numeric).any(|(a, n)| (a - n).abs() / scale > 1e-2));
    }

    #[test]
    fn literal_gradient_is_shift_invariant_with_converged_baseline() {
        let theta = [0.2, 0.0, -0.6];
        let r = [0.5, 1.5, -0.2];
        let probs = CategoricalDist::new(theta.to_vec()).probs().unwrap();
        let v: f64 = probs.iter().zip(&r).map(|(p, r)| p * r).sum();
        let c = 3.0;
        let shifted: Vec<f64> = r.iter().map(|x| x - c).collect();
        let a = surrogate_grad(&theta, &r, v, 0.1, AdvantageMode::PaperLiteral, 100_000);
        let b = surrogate_grad(&theta, &shifted, v - c, 0.1, AdvantageMode::PaperLiteral, 100_000);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }
}
