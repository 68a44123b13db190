//! The training loop: behavior-policy rollouts into an episodic replay
//! buffer, interleaved policy and scaffold updates, target syncs, periodic
//! greedy evaluation and the metrics log.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AdvantageMode, ExperimentConfig, Variant};
use crate::envs::{EnvSpec, Environment};
use crate::episode::{Episode, EpisodeBatch};
use crate::error::{IcesError, Result};
use crate::nn::dist::CategoricalDist;
use crate::nn::optim::{adam_step, clip_grad_norm, OptimizerState};
use crate::nn::tape::Tape;
use crate::policies::{agent_input_row, behavior_action, greedy_action, ExploitParams, ExploreParams, ExploreTargets, PolicyDims};
use crate::scaffolds::{ScaffoldDims, ScaffoldMode, ScaffoldParams, ScaffoldTrainer};

/// Fixed metrics columns, in output order.
pub const METRICS_COLUMNS: [&str; 12] = [
    "step",
    "episodes",
    "test_return_mean",
    "test_win_rate",
    "loss_td",
    "loss_elbo",
    "loss_actor",
    "loss_value",
    "mean_r_int",
    "actor_entropy",
    "alpha",
    "epsilon",
];

/// FIFO store of whole episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), episodes: VecDeque::new(), inserted: 0 }
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, k: usize) -> Option<&Episode> {
        self.episodes.get(k)
    }

    /// `k` distinct episodes chosen uniformly, or `None` if fewer are stored.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Option<Vec<&Episode>> {
        if k == 0 || self.episodes.len() < k {
            return None;
        }
        let mut idx = sample(rng, self.episodes.len(), k).into_vec();
        idx.sort_unstable();
        Some(idx.into_iter().map(|i| &self.episodes[i]).collect())
    }
}

/// α decays linearly over the whole run; ε decays linearly over its
/// annealing window and then drops to zero or stays at its floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedules {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub step_max: u64,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    pub epsilon_anneal_steps: u64,
    pub drop_epsilon: bool,
}

impl Schedules {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let a = &cfg.algo;
        Self {
            alpha_start: a.alpha_start,
            alpha_end: a.alpha_end,
            step_max: cfg.step_max,
            epsilon_start: a.epsilon_start,
            epsilon_finish: a.epsilon_finish,
            epsilon_anneal_steps: a.epsilon_anneal_steps,
            drop_epsilon: cfg.variant.removes_epsilon_after_anneal(),
        }
    }

    pub fn alpha(&self, t: u64) -> f64 {
        let frac = if self.step_max == 0 { 1.0 } else { (t as f64 / self.step_max as f64).min(1.0) };
        self.alpha_start + frac * (self.alpha_end - self.alpha_start)
    }

    pub fn epsilon(&self, t: u64) -> f64 {
        if t >= self.epsilon_anneal_steps {
            return if self.drop_epsilon { 0.0 } else { self.epsilon_finish };
        }
        let frac = t as f64 / self.epsilon_anneal_steps as f64;
        self.epsilon_start + frac * (self.epsilon_finish - self.epsilon_start)
    }
}

/// Greedy test results.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub return_mean: f64,
    pub win_rate: f64,
}

/// Runs `n_episodes` greedy episodes (α = 0, ε = 0) with ζ only.
pub fn evaluate(exploit: &ExploitParams, env: &mut dyn Environment, n_episodes: usize, rng: &mut dyn RngCore) -> Result<EvalMetrics> {
    if n_episodes == 0 {
        return Err(IcesError::EmptyMetrics("evaluation needs at least one episode".into()));
    }
    let mut total = 0.0;
    let mut wins = 0;
    for _ in 0..n_episodes {
        let mut runner = Runner::new(exploit.dims);
        let (_, mut obs) = env.reset(rng);
        loop {
            let (q, _) = runner.step_networks(exploit, None, &obs, &[])?;
            let n = exploit.dims.n_agents;
            let u: Vec<usize> = (0..n)
                .map(|i| greedy_action(&q[i * exploit.dims.n_actions..(i + 1) * exploit.dims.n_actions], env.avail_actions(i).as_deref()))
                .collect();
            runner.prev = u.iter().map(|a| Some(*a)).collect();
            let step = env.step(&u, rng)?;
            total += step.reward_ext;
            obs = step.next_obs;
            if step.done {
                wins += step.won as usize;
                break;
            }
        }
    }
    Ok(EvalMetrics { episodes: n_episodes, return_mean: total / n_episodes as f64, win_rate: wins as f64 / n_episodes as f64 })
}

/// Recurrent state carried through one episode.
struct Runner {
    dims: PolicyDims,
    h_q: Vec<f64>,
    h_x: Vec<f64>,
    prev: Vec<Option<usize>>,
}

impl Runner {
    fn new(dims: PolicyDims) -> Self {
        let n = dims.n_agents;
        Self { dims, h_q: vec![0.0; n * dims.hidden], h_x: vec![0.0; n * dims.hidden], prev: vec![None; n] }
    }

    /// Q values `[n * U]` and, when an explorer is given, its logits.
    fn step_networks(
        &mut self,
        exploit: &ExploitParams,
        explore: Option<&ExploreParams>,
        obs: &[Vec<f64>],
        state: &[f64],
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let n = self.dims.n_agents;
        let inputs: Vec<f64> = (0..n).flat_map(|i| agent_input_row(&self.dims, &obs[i], self.prev[i], i)).collect();
        let (q, h) = exploit.q_step(&inputs, &self.h_q, n)?;
        self.h_q = h;
        let logits = match explore {
            Some(x) => {
                let (l, h) = x.step(&inputs, &self.h_x, state)?;
                self.h_x = h;
                Some(l)
            }
            None => None,
        };
        Ok((q, logits))
    }
}

/// Scalars from one `train_policies` call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyStats {
    pub loss_td: f64,
    pub loss_actor: f64,
    pub loss_value: f64,
    pub mean_r_int: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, Default)]
struct Window {
    td: Vec<f64>,
    elbo: Vec<f64>,
    actor: Vec<f64>,
    value: Vec<f64>,
    r_int: Vec<f64>,
    entropy: Vec<f64>,
}

fn window_mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub episodes: u64,
    pub test_return_mean: f64,
    pub test_win_rate: f64,
    pub loss_td: f64,
    pub loss_elbo: f64,
    pub loss_actor: f64,
    pub loss_value: f64,
    pub mean_r_int: f64,
    pub actor_entropy: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let f = |x: f64| if x.is_finite() { format!("{x:.6}") } else { String::from("nan") };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episodes,
            f(self.test_return_mean),
            f(self.test_win_rate),
            f(self.loss_td),
            f(self.loss_elbo),
            f(self.loss_actor),
            f(self.loss_value),
            f(self.mean_r_int),
            f(self.actor_entropy),
            f(self.alpha),
            f(self.epsilon)
        )
    }
}

pub fn metrics_header() -> String {
    METRICS_COLUMNS.join(",")
}

/// Whole metrics log as CSV text, header included.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = metrics_header();
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

pub fn scaffold_mode(variant: Variant) -> ScaffoldMode {
    match variant {
        Variant::GlobalCon => ScaffoldMode::GlobalCon,
        Variant::NoCvae => ScaffoldMode::Euclidean,
        Variant::TwoCvaes => ScaffoldMode::TwoCvaes,
        _ => ScaffoldMode::Individual,
    }
}

/// All state of one training run.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub spec: EnvSpec,
    pub schedules: Schedules,
    pub exploit: ExploitParams,
    pub explore: Option<ExploreParams>,
    pub scaffolds: Option<ScaffoldParams>,
    pub buffer: ReplayBuffer,
    pub t_env: u64,
    pub episodes: u64,
    pub train_events: u64,
    pub metrics: Vec<MetricsRow>,
    env: Box<dyn Environment>,
    eval_env: Box<dyn Environment>,
    rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    opt_exploit: OptimizerState,
    opt_actor: Option<OptimizerState>,
    opt_value: Option<OptimizerState>,
    scaffold_trainer: Option<ScaffoldTrainer>,
    last_train: Option<u64>,
    last_target: u64,
    next_eval: u64,
    window: Window,
}

impl Trainer {
    /// Validates `cfg` (after variant overrides) and builds every network.
    pub fn new(mut cfg: ExperimentConfig) -> Result<Self> {
        cfg.apply_variant_overrides();
        cfg.validate()?;
        let env = cfg.env.build()?;
        let eval_env = cfg.env.build()?;
        let spec = env.spec();
        let a = &cfg.algo;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
        let dims = PolicyDims {
            obs_dim: spec.obs_dim,
            state_dim: spec.state_dim,
            n_agents: spec.n_agents,
            n_actions: spec.n_actions,
            hidden: a.hidden_dim,
            mixer_embed: a.mixer_embed_dim,
        };
        let exploit = ExploitParams::new(dims, &mut rng);
        let explore = cfg
            .variant
            .uses_explorer()
            .then(|| ExploreParams::new(dims, cfg.variant != Variant::NoS, &mut rng));
        let scaffolds = cfg.variant.uses_scaffolds().then(|| {
            let sd = ScaffoldDims {
                state_dim: spec.state_dim,
                n_agents: spec.n_agents,
                n_actions: spec.n_actions,
                embed_dim: a.embed_dim,
                hidden: a.scaffold_hidden,
                latent_dim: a.latent_dim,
                decoder_hidden: a.decoder_hidden,
            };
            ScaffoldParams::new(sd, scaffold_mode(cfg.variant), &mut rng)
        });
        Ok(Self {
            schedules: Schedules::from_config(&cfg),
            opt_exploit: OptimizerState::for_store(&exploit.store),
            opt_actor: explore.as_ref().map(|x| OptimizerState::for_store(&x.store)),
            opt_value: explore.as_ref().map(|x| OptimizerState::for_store(&x.value_store)),
            scaffold_trainer: scaffolds.as_ref().map(|s| ScaffoldTrainer::new(s, a.scaffold_lr, a.scaffold_clip)),
            buffer: ReplayBuffer::new(a.buffer_capacity),
            spec,
            exploit,
            explore,
            scaffolds,
            t_env: 0,
            episodes: 0,
            train_events: 0,
            metrics: Vec::new(),
            env,
            eval_env,
            rng,
            eval_rng,
            last_train: None,
            last_target: 0,
            next_eval: 0,
            window: Window::default(),
            cfg,
        })
    }

    /// Collects one episode with the behavior policy. Returns it together
    /// with the fraction of decisions taken by the exploration actor.
    pub fn collect_episode(&mut self) -> Result<(Episode, f64)> {
        let n = self.spec.n_agents;
        let u_dim = self.spec.n_actions;
        let (state, obs) = self.env.reset(&mut self.rng);
        let mut episode = Episode::new(state, obs);
        let mut runner = Runner::new(self.exploit.dims);
        let mut explored = 0usize;
        let mut decisions = 0usize;
        loop {
            let t = self.t_env;
            let alpha = if self.explore.is_some() { self.schedules.alpha(t) } else { 0.0 };
            let epsilon = self.schedules.epsilon(t);
            let explore = if alpha > 0.0 { self.explore.as_ref() } else { None };
            let s = episode.states.last().expect("episode has a state").clone();
            let o = episode.obs.last().expect("episode has observations").clone();
            let (q, logits) = runner.step_networks(&self.exploit, explore, &o, &s)?;
            let mut u = Vec::with_capacity(n);
            for i in 0..n {
                let dist = logits.as_ref().map(|l| CategoricalDist::new(l[i * u_dim..(i + 1) * u_dim].to_vec()));
                let avail = self.env.avail_actions(i);
                let c = behavior_action(dist.as_ref(), &q[i * u_dim..(i + 1) * u_dim], alpha, epsilon, avail.as_deref(), &mut self.rng)?;
                explored += c.explored as usize;
                decisions += 1;
                u.push(c.action);
            }
            runner.prev = u.iter().map(|a| Some(*a)).collect();
            let step = self.env.step(&u, &mut self.rng)?;
            self.t_env += 1;
            episode.push(u, step.reward_ext, step.next_state, step.next_obs);
            if step.done {
                episode.terminated = !step.truncated;
                episode.won = step.won;
                break;
            }
        }
        Ok((episode, explored as f64 / decisions.max(1) as f64))
    }

    /// Per-row intrinsic scaffolds `[(t * B + b) * n + i]`, clipped to
    /// `[0, scaffold_reward_clip]`; zero on padding.
    pub fn intrinsic_rewards(&self, batch: &EpisodeBatch) -> Result<Vec<f64>> {
        let n = batch.n_agents;
        let mut out = vec![0.0; batch.steps * batch.batch * n];
        let Some(sc) = &self.scaffolds else { return Ok(out) };
        let (transitions, index) = batch.transitions();
        let r = sc.intrinsic_batch(&transitions)?;
        let hi = self.cfg.algo.scaffold_reward_clip;
        for (k, row) in index.iter().enumerate() {
            for i in 0..n {
                let v = r[k * n + i];
                if !v.is_finite() {
                    return Err(IcesError::Numeric("non-finite intrinsic scaffold".into()));
                }
                out[row * n + i] = v.clamp(0.0, hi);
            }
        }
        Ok(out)
    }

    /// One sampled batch: a TD step on ζ, then (when the variant has an
    /// exploration actor) one actor step on ξ and one value step on η.
    pub fn train_policies(&mut self) -> Result<Option<PolicyStats>> {
        let a = self.cfg.algo.clone();
        let Some(eps) = self.buffer.sample(a.batch_size, &mut self.rng) else { return Ok(None) };
        let batch = EpisodeBatch::from_episodes(&eps, self.spec.n_actions)?;
        let r_int = self.intrinsic_rewards(&batch)?;
        let n = batch.n_agents;
        let valid: Vec<f64> = r_int.iter().enumerate().filter(|(k, _)| batch.mask[k / n] > 0.0).map(|(_, v)| *v).collect();
        let mut stats = PolicyStats { mean_r_int: window_mean(&valid), entropy: f64::NAN, loss_actor: f64::NAN, loss_value: f64::NAN, ..Default::default() };

        let rewards = variant_int_ext(&batch, &r_int, self.cfg.variant, a.int_ext_weight);
        let targets = self.exploit.td_targets(&self.exploit.target, &batch, &rewards, a.gamma)?;
        let mut tape = Tape::new();
        let loss = self.exploit.td_loss_on_tape(&mut tape, &self.exploit.store, &batch, &targets)?;
        stats.loss_td = tape.scalar(loss);
        if !stats.loss_td.is_finite() {
            return Err(IcesError::Numeric(format!("non-finite TD loss at step {}", self.t_env)));
        }
        tape.backward(loss);
        self.exploit.store.zero_grad();
        tape.accumulate_grads(&mut self.exploit.store);
        clip_grad_norm(&mut self.exploit.store, a.grad_clip)?;
        adam_step(&mut self.exploit.store, &mut self.opt_exploit, a.lr_exploit)?;

        if let Some(x) = self.explore.as_mut() {
            let targets = ExploreTargets { r_int, beta: a.beta };
            let mut tape = Tape::new();
            let (actor, value, ls) = x.losses_on_tape(&mut tape, &x.store, &x.value_store, &batch, &targets, a.advantage_mode, None)?;
            if !ls.actor.is_finite() || !ls.value.is_finite() {
                return Err(IcesError::Numeric(format!("non-finite exploration loss at step {}", self.t_env)));
            }
            let total = tape.add(actor, value);
            tape.backward(total);
            x.store.zero_grad();
            x.value_store.zero_grad();
            tape.accumulate_grads(&mut x.store);
            tape.accumulate_grads(&mut x.value_store);
            clip_grad_norm(&mut x.store, a.grad_clip)?;
            clip_grad_norm(&mut x.value_store, a.grad_clip)?;
            adam_step(&mut x.store, self.opt_actor.as_mut().expect("actor optimizer"), a.lr_explore)?;
            adam_step(&mut x.value_store, self.opt_value.as_mut().expect("value optimizer"), a.lr_value)?;
            stats.loss_actor = ls.actor;
            stats.loss_value = ls.value;
            stats.entropy = ls.entropy;
        }
        Ok(Some(stats))
    }

    /// One ELBO step on the transitions of a freshly sampled batch.
    pub fn train_scaffolds(&mut self) -> Result<Option<f64>> {
        let (Some(sc), Some(tr)) = (self.scaffolds.as_mut(), self.scaffold_trainer.as_mut()) else { return Ok(None) };
        let Some(eps) = self.buffer.sample(self.cfg.algo.batch_size, &mut self.rng) else { return Ok(None) };
        let batch = EpisodeBatch::from_episodes(&eps, self.spec.n_actions)?;
        let (transitions, _) = batch.transitions();
        let step = tr.step(sc, &transitions, &mut self.rng)?;
        if !step.parts.loss.is_finite() {
            return Err(IcesError::Numeric(format!("non-finite ELBO at step {}", self.t_env)));
        }
        Ok(Some(step.parts.loss))
    }

    fn evaluate_now(&mut self) -> Result<()> {
        let m = evaluate(&self.exploit, self.eval_env.as_mut(), self.cfg.algo.eval_episodes, &mut self.eval_rng)?;
        let w = std::mem::take(&mut self.window);
        self.metrics.push(MetricsRow {
            step: self.t_env,
            episodes: self.episodes,
            test_return_mean: m.return_mean,
            test_win_rate: m.win_rate,
            loss_td: window_mean(&w.td),
            loss_elbo: window_mean(&w.elbo),
            loss_actor: window_mean(&w.actor),
            loss_value: window_mean(&w.value),
            mean_r_int: window_mean(&w.r_int),
            actor_entropy: window_mean(&w.entropy),
            alpha: if self.explore.is_some() { self.schedules.alpha(self.t_env) } else { 0.0 },
            epsilon: self.schedules.epsilon(self.t_env),
        });
        Ok(())
    }

    /// Collects one episode and runs whatever training, target sync and
    /// evaluation falls due. Returns `false` once the step budget is spent.
    pub fn advance(&mut self) -> Result<bool> {
        if self.t_env >= self.cfg.step_max {
            return Ok(false);
        }
        if self.t_env >= self.next_eval {
            self.evaluate_now()?;
            self.next_eval = self.t_env + self.cfg.algo.eval_interval;
        }
        let (episode, _) = self.collect_episode()?;
        self.buffer.push(episode);
        self.episodes += 1;

        let due = self.last_train.map_or(true, |l| self.t_env - l >= self.cfg.algo.train_interval);
        if due && self.buffer.len() >= self.cfg.algo.batch_size {
            self.last_train = Some(self.t_env);
            self.train_events += 1;
            if let Some(s) = self.train_policies()? {
                self.window.td.push(s.loss_td);
                if s.mean_r_int.is_finite() && self.scaffolds.is_some() {
                    self.window.r_int.push(s.mean_r_int);
                }
                if self.explore.is_some() {
                    self.window.actor.push(s.loss_actor);
                    self.window.value.push(s.loss_value);
                    self.window.entropy.push(s.entropy);
                }
            }
            if let Some(l) = self.train_scaffolds()? {
                self.window.elbo.push(l);
            }
        }
        if self.t_env - self.last_target >= self.cfg.algo.target_update_interval {
            self.exploit.sync_target()?;
            self.last_target = self.t_env;
        }
        if self.t_env >= self.cfg.step_max {
            self.evaluate_now()?;
        }
        Ok(true)
    }

    /// Runs to `step_max`.
    pub fn run(&mut self) -> Result<()> {
        while self.advance()? {}
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }

    pub fn advantage_mode(&self) -> AdvantageMode {
        self.cfg.algo.advantage_mode
    }
}

/// TD rewards: `r_ext` per `(t, b)`, plus `weight · Σ_i r^i_int` for the
/// int+ext variant.
pub fn variant_int_ext(batch: &EpisodeBatch, r_int: &[f64], variant: Variant, weight: f64) -> Vec<f64> {
    let n = batch.n_agents;
    batch
        .rewards
        .iter()
        .enumerate()
        .map(|(k, r)| {
            if variant == Variant::IntExt {
                r + weight * r_int[k * n..(k + 1) * n].iter().sum::<f64>()
            } else {
                *r
            }
        })
        .collect()
}

/// Output of a finished run: the exploitation parameters and metrics.
pub struct TrainOutput {
    pub exploit: ExploitParams,
    pub metrics: Vec<MetricsRow>,
}

/// Builds a trainer from `cfg` and runs it to completion.
pub fn run_training(cfg: ExperimentConfig) -> Result<TrainOutput> {
    let mut t = Trainer::new(cfg)?;
    t.run()?;
    Ok(TrainOutput { exploit: t.exploit, metrics: t.metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnvConfig;

    fn small_config(variant: Variant, step_max: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(EnvConfig::corridor());
        c.variant = variant;
        c.step_max = step_max;
        c.algo.batch_size = 4;
        c.algo.hidden_dim = 8;
        c.algo.mixer_embed_dim = 4;
        c.algo.scaffold_hidden = 8;
        c.algo.decoder_hidden = 8;
        c.algo.eval_interval = 200;
        c.algo.eval_episodes = 2;
        c.algo.target_update_interval = 100;
        c
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let mut b = ReplayBuffer::new(3);
        for k in 0..5 {
            let mut e = Episode::new(vec![k as f64], vec![vec![0.0]]);
            e.push(vec![0], 0.0, vec![0.0], vec![vec![0.0]]);
            b.push(e);
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.inserted(), 5);
        let firsts: Vec<f64> = (0..3).map(|k| b.get(k).unwrap().states[0][0]).collect();
        assert_eq!(firsts, vec![2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample(4, &mut rng).is_none());
        assert_eq!(b.sample(3, &mut rng).unwrap().len(), 3);
    }

    #[test]
    fn schedules_are_monotone_and_drop_epsilon() {
        let s = Schedules {
            alpha_start: 0.2,
            alpha_end: 0.05,
            step_max: 100,
            epsilon_start: 1.0,
            epsilon_finish: 0.05,
            epsilon_anneal_steps: 50,
            drop_epsilon: true,
        };
        let mut last = f64::INFINITY;
        for t in 0..150 {
            assert!(s.alpha(t) <= last);
            last = s.alpha(t);
        }
        assert!((s.alpha(100) - 0.05).abs() < 1e-15);
        assert!((s.epsilon(25) - 0.525).abs() < 1e-12);
        assert_eq!(s.epsilon(50), 0.0);
        let kept = Schedules { drop_epsilon: false, ..s };
        assert_eq!(kept.epsilon(80), 0.05);
    }

    #[test]
    fn zero_budget_writes_only_the_header() {
        let out = run_training(small_config(Variant::Ices, 0)).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(metrics_csv(&out.metrics), format!("{}\n", METRICS_COLUMNS.join(",")));
    }

    #[test]
    fn evaluation_rejects_zero_episodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Trainer::new(small_config(Variant::Ices, 0)).unwrap();
        let mut env = EnvConfig::corridor().build().unwrap();
        assert!(matches!(evaluate(&t.exploit, env.as_mut(), 0, &mut rng), Err(IcesError::EmptyMetrics(_))));
    }

    #[test]
    fn int_ext_rewards_reduce_to_extrinsic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Trainer::new(small_config(Variant::IntExt, 400)).unwrap();
        for _ in 0..4 {
            let (e, _) = t.collect_episode().unwrap();
            t.buffer.push(e);
        }
        let eps = t.buffer.sample(4, &mut rng).unwrap();
        let batch = EpisodeBatch::from_episodes(&eps, 5).unwrap();
        let r_int = t.intrinsic_rewards(&batch).unwrap();
        assert!(r_int.iter().all(|v| (0.0..=10.0).contains(v)));
        assert_eq!(variant_int_ext(&batch, &r_int, Variant::IntExt, 0.0), batch.rewards);
        assert_eq!(variant_int_ext(&batch, &vec![0.0; r_int.len()], Variant::IntExt, 3.0), batch.rewards);
        assert_eq!(variant_int_ext(&batch, &r_int, Variant::Ices, 3.0), batch.rewards);
    }

    #[test]
    fn train_policies_leaves_scaffolds_alone_and_zero_lr_freezes() {
        let mut c = small_config(Variant::Ices, 400);
        c.algo.lr_exploit = 0.0;
        c.algo.lr_explore = 0.0;
        c.algo.lr_value = 0.0;
        let mut t = Trainer::new(c).unwrap();
        for _ in 0..4 {
            let (e, _) = t.collect_episode().unwrap();
            t.buffer.push(e);
        }
        let scaffold = t.scaffolds.as_ref().unwrap().store.fingerprint();
        let zeta = t.exploit.store.fingerprint();
        let xi = t.explore.as_ref().unwrap().store.fingerprint();
        let eta = t.explore.as_ref().unwrap().value_store.fingerprint();
        assert!(t.train_policies().unwrap().is_some());
        assert_eq!(t.scaffolds.as_ref().unwrap().store.fingerprint(), scaffold);
        assert_eq!(t.exploit.store.fingerprint(), zeta);
        assert_eq!(t.explore.as_ref().unwrap().store.fingerprint(), xi);
        assert_eq!(t.explore.as_ref().unwrap().value_store.fingerprint(), eta);
    }

    #[test]
    fn same_seed_gives_identical_metrics() {
        let a = run_training(small_config(Variant::Ices, 600)).unwrap();
        let b = run_training(small_config(Variant::Ices, 600)).unwrap();
        assert!(!a.metrics.is_empty());
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    }

    #[test]
    fn every_variant_trains() {
        for v in Variant::ALL {
            let out = run_training(small_config(v, 300)).unwrap();
            assert!(out.metrics.iter().all(|m| m.loss_td.is_nan() || m.loss_td.is_finite()), "{v}");
        }
    }
}
