//! Scaffold quality checks against ground truth: rank agreement with the
//! exact matrix-game oracle and the noisy-TV contrast on the corridor, plus
//! the finite-difference gradient suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::AdvantageMode;
use crate::envs::{oracle_scaffold, Cell, CorridorConfig, Environment, MatrixGameTable, NoisyCorridor};
use crate::episode::{Episode, EpisodeBatch};
use crate::nn::dist::{categorical_sample, CategoricalDist};
use crate::error::Result;
use crate::nn::layers::{Activation, GruCell, Mlp};
use crate::nn::params::ParamStore;
use crate::nn::optim::{adam_step, clip_grad_norm, OptimizerState};
use crate::nn::tape::Tape;
use crate::nn::{check_gradients, GradCheck};
use crate::policies::{agent_input_row, ExploitParams, ExploreParams, ExploreTargets, PolicyDims};
use crate::scaffolds::{ScaffoldBatch, ScaffoldDims, ScaffoldMode, ScaffoldParams, ScaffoldTrainer};
use crate::stats::{mean, spearman};

#[derive(Clone, Debug)]
pub struct CvaeFitConfig {
    pub steps: usize,
    /// Rows per step for sampled data; for the matrix game, the number of
    /// copies of each `(s, u)` pair spread over its next states.
    pub batch: usize,
    pub lr: f64,
    pub clip: f64,
    pub hidden: usize,
    pub decoder_hidden: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl CvaeFitConfig {
    /// Exhaustive matrix-game fit. The affine decoder pins each expected
    /// next state to a single latent code, so both encoders agree on where
    /// action-irrelevant transitions live.
    pub fn matrix_oracle() -> Self {
        Self { steps: 15_000, batch: 6, lr: 1e-3, clip: 1.0, hidden: 32, decoder_hidden: 0, latent_dim: 8, embed_dim: 4, seed: 0 }
    }

    /// Corridor fit on random-policy data; positions need a nonlinear decoder.
    pub fn corridor_contrast() -> Self {
        Self { steps: 3000, batch: 64, lr: 1e-3, clip: 1.0, hidden: 32, decoder_hidden: 32, latent_dim: 8, embed_dim: 4, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct OracleAgreement {
    pub spearman: f64,
    /// One entry per `(state, joint action, agent)`, same order in both.
    pub learned: Vec<f64>,
    pub oracle: Vec<f64>,
    pub losses: Vec<f64>,
    pub params: ScaffoldParams,
}

/// Trains a CVAE on the exhaustive transition set of `table`, then ranks the
/// learned scaffold against the exact oracle over all triples.
pub fn matrix_oracle_agreement(table: &MatrixGameTable, cfg: &CvaeFitConfig) -> Result<OracleAgreement> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = ScaffoldDims {
        state_dim: table.n_states,
        n_agents: table.n_agents,
        n_actions: table.n_actions,
        embed_dim: cfg.embed_dim,
        hidden: cfg.hidden,
        latent_dim: cfg.latent_dim,
        decoder_hidden: cfg.decoder_hidden,
    };
    let mut params = ScaffoldParams::new(dims, ScaffoldMode::Individual, &mut rng);
    let mut trainer = ScaffoldTrainer::new(&params, cfg.lr, cfg.clip);
    let pairs: Vec<(usize, Vec<usize>)> = (0..table.n_states)
        .flat_map(|s| (0..table.n_joint()).map(move |j| (s, j)))
        .map(|(s, j)| (s, table.joint_from_index(j)))
        .collect();

    // Every (s, u, s') appears in proportion to its probability, so each
    // step sees the exact transition distribution.
    let mut data = ScaffoldBatch::default();
    let replicas = cfg.batch.max(1) as f64;
    for (s, u) in &pairs {
        for (next, p) in table.row(*s, u).iter().enumerate() {
            for _ in 0..(p * replicas).round() as usize {
                data.push(&table.one_hot(*s), u, &table.one_hot(next));
            }
        }
    }
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        losses.push(trainer.step(&mut params, &data, &mut rng)?.parts.loss);
    }

    let mut learned = Vec::new();
    let mut oracle = Vec::new();
    for (s, u) in &pairs {
        for i in 0..table.n_agents {
            learned.push(params.intrinsic_scaffold(&table.one_hot(*s), u, i)?);
            oracle.push(oracle_scaffold(table, *s, u, i)?);
        }
    }
    Ok(OracleAgreement { spearman: spearman(&learned, &oracle), learned, oracle, losses, params })
}

/// Corridor layout with two sealed single-cell pockets. An agent that starts
/// inside a pocket can never move, so its transitions change nothing but the
/// noisy cells. The main corridor stays connected.
pub fn pocket_corridor() -> (CorridorConfig, [Cell; 2]) {
    let pockets = [(2, 0), (5, 3)];
    let cfg = CorridorConfig {
        walls: vec![(1, 0), (3, 0), (2, 1), (4, 3), (6, 3), (5, 2)],
        ..CorridorConfig::default()
    };
    (cfg, pockets)
}

#[derive(Clone, Debug)]
pub struct NoisyTvContrast {
    pub mean_noise_only: f64,
    pub mean_controllable: f64,
    pub ratio: f64,
    pub n_noise_only: usize,
    pub n_controllable: usize,
    pub losses: Vec<f64>,
}

/// Fits a CVAE on random-policy corridor data (half the episodes start with
/// both agents sealed in pockets) and compares the mean scaffold on held-out
/// noise-only transitions with the mean on transitions where the agent's
/// action moved it.
pub fn noisy_tv_contrast(cfg: &CvaeFitConfig, episodes: usize) -> Result<NoisyTvContrast> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (layout, pockets) = pocket_corridor();
    let mut free = NoisyCorridor::new(layout.clone())?;
    let mut sealed = NoisyCorridor::new(CorridorConfig { starts: pockets.to_vec(), ..layout })?;
    let spec = free.spec();

    // (s, u, s', moved per agent, sealed)
    let collect = |env: &mut NoisyCorridor, sealed: bool, rng: &mut ChaCha8Rng, out: &mut Vec<(Vec<f64>, Vec<usize>, Vec<f64>, Vec<bool>, bool)>| -> Result<()> {
        let (mut s, _) = env.reset(rng);
        loop {
            let u: Vec<usize> = (0..spec.n_agents).map(|_| rng.gen_range(0..spec.n_actions)).collect();
            let before = env.positions().to_vec();
            let step = env.step(&u, rng)?;
            let moved = before.iter().zip(env.positions()).map(|(a, b)| a != b).collect();
            out.push((s, u, step.next_state.clone(), moved, sealed));
            s = step.next_state;
            if step.done {
                return Ok(());
            }
        }
    };
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for e in 0..episodes {
        collect(&mut free, false, &mut rng, &mut train)?;
        collect(&mut sealed, true, &mut rng, &mut train)?;
        if e % 4 == 0 {
            collect(&mut free, false, &mut rng, &mut held_out)?;
            collect(&mut sealed, true, &mut rng, &mut held_out)?;
        }
    }

    let dims = ScaffoldDims {
        state_dim: spec.state_dim,
        n_agents: spec.n_agents,
        n_actions: spec.n_actions,
        embed_dim: cfg.embed_dim,
        hidden: cfg.hidden,
        latent_dim: cfg.latent_dim,
        decoder_hidden: cfg.decoder_hidden,
    };
    let mut params = ScaffoldParams::new(dims, ScaffoldMode::Individual, &mut rng);
    let mut trainer = ScaffoldTrainer::new(&params, cfg.lr, cfg.clip);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = ScaffoldBatch::default();
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (s, u, n, _, _) = &train[order[cursor]];
            cursor += 1;
            batch.push(s, u, n);
        }
        losses.push(trainer.step(&mut params, &batch, &mut rng)?.parts.loss);
    }

    let mut eval = ScaffoldBatch::default();
    for (s, u, n, _, _) in &held_out {
        eval.push(s, u, n);
    }
    let r = params.intrinsic_batch(&eval)?;
    let mut noise_only = Vec::new();
    let mut controllable = Vec::new();
    for (row, (_, _, _, moved, sealed)) in held_out.iter().enumerate() {
        for i in 0..spec.n_agents {
            let v = r[row * spec.n_agents + i];
            if *sealed {
                noise_only.push(v);
            } else if moved[i] {
                controllable.push(v);
            }
        }
    }
    let (a, b) = (mean(&noise_only), mean(&controllable));
    Ok(NoisyTvContrast {
        mean_noise_only: a,
        mean_controllable: b,
        ratio: a / b,
        n_noise_only: noise_only.len(),
        n_controllable: controllable.len(),
        losses,
    })
}

/// Maximum relative gradient error of one network component.
#[derive(Clone, Debug)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub report: GradCheck,
}

/// Component names in report order.
pub const GRADCHECK_COMPONENTS: [&str; 8] = ["mlp", "gru", "mixer", "td", "elbo", "actor", "actor_literal", "value"];

/// Finite-difference check of every differentiable component on small
/// random instances drawn from `seed`. `fault` names a component whose
/// analytic gradient is deliberately corrupted.
pub fn gradcheck_suite(seed: u64, fault: Option<&str>) -> Result<Vec<ComponentCheck>> {
    if let Some(f) = fault {
        if !GRADCHECK_COMPONENTS.contains(&f) {
            return Err(crate::IcesError::config("inject-fault", format!("unknown component `{f}`")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corrupt = |c: &str| fault == Some(c);
    let mut out = Vec::new();
    let mut push = |component: &'static str, report: GradCheck| out.push(ComponentCheck { component, report });
    let rand_vec = |k: usize, rng: &mut ChaCha8Rng| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();

    {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[4, 6, 3], Activation::Tanh, &mut rng);
        let x = rand_vec(5 * 4, &mut rng);
        let w = rand_vec(5 * 3, &mut rng);
        let r = check_gradients(
            &store,
            |t, s| {
                let xv = t.constant_rows(5, 4, x.clone());
                let y = mlp.forward(t, s, xv)?;
                let wv = t.constant_rows(5, 3, w.clone());
                let y = t.mul(y, wv);
                Ok(t.sum_all(y))
            },
            corrupt("mlp"),
        )?;
        push("mlp", r);
    }
    {
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
        let x = rand_vec(2 * 3 * 3, &mut rng);
        let w = rand_vec(3 * 4, &mut rng);
        let r = check_gradients(
            &store,
            |t, s| {
                let mut h = t.zeros(3, 4);
                for k in 0..2 {
                    let xv = t.constant_rows(3, 3, x[k * 9..(k + 1) * 9].to_vec());
                    h = gru.forward(t, s, xv, h)?;
                }
                let wv = t.constant_rows(3, 4, w.clone());
                let y = t.mul(h, wv);
                Ok(t.sum_all(y))
            },
            corrupt("gru"),
        )?;
        push("gru", r);
    }

    let dims = PolicyDims { obs_dim: 3, state_dim: 4, n_agents: 2, n_actions: 3, hidden: 5, mixer_embed: 4 };
    let batch = random_episode_batch(&dims, &mut rng, 2)?;
    {
        let p = ExploitParams::new(dims, &mut rng);
        let q = rand_vec(6 * 2, &mut rng);
        let s = rand_vec(6 * 4, &mut rng);
        let c = rand_vec(6, &mut rng);
        let r = check_gradients(
            &p.store,
            |t, st| {
                let qv = t.constant_rows(6, 2, q.clone());
                let sv = t.constant_rows(6, 4, s.clone());
                let y = p.mixer.forward(t, st, qv, sv)?;
                let cv = t.constant_rows(6, 1, c.clone());
                let y = t.mul(y, cv);
                Ok(t.sum_all(y))
            },
            corrupt("mixer"),
        )?;
        push("mixer", r);

        let mut p = p;
        p.target.tensors_mut().iter_mut().for_each(|t| t.data.iter_mut().for_each(|x| *x *= 0.5));
        let targets = p.td_targets(&p.target, &batch, &batch.rewards, 0.99)?;
        let r = check_gradients(&p.store, |t, st| p.td_loss_on_tape(t, st, &batch, &targets), corrupt("td"))?;
        push("td", r);
    }
    {
        let sd = ScaffoldDims { state_dim: 4, n_agents: 2, n_actions: 3, embed_dim: 2, hidden: 5, latent_dim: 2, decoder_hidden: 4 };
        let p = ScaffoldParams::new(sd, ScaffoldMode::Individual, &mut rng);
        let (b, _) = batch.transitions();
        let noise = p.sample_noise(&b, &mut rng);
        let r = check_gradients(
            &p.store,
            |t, s| {
                let view = ScaffoldParams { store: s.clone(), ..p.clone() };
                Ok(view.elbo_loss_on_tape(t, &b, &noise)?.0)
            },
            corrupt("elbo"),
        )?;
        push("elbo", r);
    }
    {
        let e = ExploreParams::new(dims, true, &mut rng);
        let rows = batch.steps * batch.batch * dims.n_agents;
        let targets = ExploreTargets { r_int: (0..rows).map(|_| rng.gen_range(0.0..2.0)).collect(), beta: 0.1 };
        for (name, mode) in [("actor", AdvantageMode::ExactEntropy), ("actor_literal", AdvantageMode::PaperLiteral)] {
            let adv = e.advantages(&batch, &targets, mode)?;
            let r = check_gradients(
                &e.store,
                |t, s| Ok(e.losses_on_tape(t, s, &e.value_store, &batch, &targets, mode, Some(&adv))?.0),
                corrupt(name),
            )?;
            push(name, r);
        }
        let r = check_gradients(
            &e.value_store,
            |t, s| Ok(e.losses_on_tape(t, &e.store, s, &batch, &targets, AdvantageMode::ExactEntropy, None)?.1),
            corrupt("value"),
        )?;
        push("value", r);
    }
    Ok(out)
}

/// Random padded batch of `episodes` episodes with lengths 2, 3, ...
pub fn random_episode_batch(dims: &PolicyDims, rng: &mut ChaCha8Rng, episodes: usize) -> Result<EpisodeBatch> {
    let rand_vec = |k: usize, rng: &mut ChaCha8Rng| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let eps: Vec<Episode> = (0..episodes)
        .map(|e| {
            let obs0 = (0..dims.n_agents).map(|_| rand_vec(dims.obs_dim, rng)).collect();
            let mut ep = Episode::new(rand_vec(dims.state_dim, rng), obs0);
            for _ in 0..(2 + e) {
                let u = (0..dims.n_agents).map(|_| rng.gen_range(0..dims.n_actions)).collect();
                let obs = (0..dims.n_agents).map(|_| rand_vec(dims.obs_dim, rng)).collect();
                ep.push(u, rng.gen_range(-1.0..1.0), rand_vec(dims.state_dim, rng), obs);
            }
            ep.terminated = e % 2 == 0;
            ep
        })
        .collect();
    let refs: Vec<&Episode> = eps.iter().collect();
    EpisodeBatch::from_episodes(&refs, dims.n_actions)
}

/// Means of consecutive `window`-sized blocks of `xs` (a trailing partial
/// block is dropped).
pub fn block_means(xs: &[f64], window: usize) -> Vec<f64> {
    xs.chunks_exact(window.max(1)).map(mean).collect()
}

/// ELBO losses of `updates` scaffold steps on one fixed set of random-policy
/// corridor transitions.
pub fn elbo_trace(seed: u64, updates: usize) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = NoisyCorridor::new(CorridorConfig::default())?;
    let spec = env.spec();
    let mut data = ScaffoldBatch::default();
    while data.len < 256 {
        let (mut s, _) = env.reset(&mut rng);
        loop {
            let u: Vec<usize> = (0..spec.n_agents).map(|_| rng.gen_range(0..spec.n_actions)).collect();
            let step = env.step(&u, &mut rng)?;
            data.push(&s, &u, &step.next_state);
            s = step.next_state;
            if step.done || data.len == 256 {
                break;
            }
        }
    }
    let dims = ScaffoldDims {
        state_dim: spec.state_dim,
        n_agents: spec.n_agents,
        n_actions: spec.n_actions,
        embed_dim: 4,
        hidden: 32,
        latent_dim: 8,
        decoder_hidden: 32,
    };
    let mut params = ScaffoldParams::new(dims, ScaffoldMode::Individual, &mut rng);
    let mut trainer = ScaffoldTrainer::new(&params, 1e-3, 1.0);
    (0..updates).map(|_| Ok(trainer.step(&mut params, &data, &mut rng)?.parts.loss)).collect()
}

#[derive(Clone, Debug)]
pub struct EntropyRise {
    pub initial: f64,
    pub last: f64,
    pub max_entropy: f64,
}

/// Trains the exploration actor on-policy in a corridor where every
/// intrinsic reward is zero, starting from sharply peaked logits. `initial`
/// is the entropy of the first batch; `last` averages the final 50 batches.
pub fn entropy_rise(seed: u64, updates: usize, beta: f64, lr: f64) -> Result<EntropyRise> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = NoisyCorridor::new(CorridorConfig { episode_limit: 8, ..CorridorConfig::default() })?;
    let spec = env.spec();
    let dims = PolicyDims {
        obs_dim: spec.obs_dim,
        state_dim: spec.state_dim,
        n_agents: spec.n_agents,
        n_actions: spec.n_actions,
        hidden: 16,
        mixer_embed: 8,
    };
    let mut x = ExploreParams::new(dims, true, &mut rng);
    let head = x.actor.layers.last().expect("actor head").bias;
    let mut peaked = vec![0.0; dims.n_actions];
    peaked[0] = 6.0;
    x.store.get_mut(head).data = peaked;
    let mut opt_actor = OptimizerState::for_store(&x.store);
    let mut opt_value = OptimizerState::for_store(&x.value_store);
    let mut entropies = Vec::with_capacity(updates);
    for _ in 0..updates.max(1) {
        let mut episodes = Vec::new();
        for _ in 0..2 {
            let (s, obs) = env.reset(&mut rng);
            let mut ep = Episode::new(s, obs);
            let mut h = vec![0.0; dims.n_agents * dims.hidden];
            let mut prev: Vec<Option<usize>> = vec![None; dims.n_agents];
            loop {
                let t = ep.len();
                let inputs: Vec<f64> = (0..dims.n_agents)
                    .flat_map(|i| agent_input_row(&dims, &ep.obs[t][i], prev[i], i))
                    .collect();
                let (logits, h_next) = x.step(&inputs, &h, &ep.states[t])?;
                h = h_next;
                let u = logits
                    .chunks(dims.n_actions)
                    .map(|l| categorical_sample(&CategoricalDist::new(l.to_vec()), &mut rng))
                    .collect::<Result<Vec<usize>>>()?;
                let step = env.step(&u, &mut rng)?;
                prev = u.iter().map(|a| Some(*a)).collect();
                ep.push(u, 0.0, step.next_state, step.next_obs);
                if step.done {
                    break;
                }
            }
            episodes.push(ep);
        }
        let refs: Vec<&Episode> = episodes.iter().collect();
        let batch = EpisodeBatch::from_episodes(&refs, dims.n_actions)?;
        let targets = ExploreTargets { r_int: vec![0.0; batch.steps * batch.batch * dims.n_agents], beta };
        let mut tape = Tape::new();
        let (actor, value, ls) =
            x.losses_on_tape(&mut tape, &x.store, &x.value_store, &batch, &targets, AdvantageMode::ExactEntropy, None)?;
        entropies.push(ls.entropy);
        let total = tape.add(actor, value);
        tape.backward(total);
        x.store.zero_grad();
        x.value_store.zero_grad();
        tape.accumulate_grads(&mut x.store);
        tape.accumulate_grads(&mut x.value_store);
        clip_grad_norm(&mut x.store, 10.0)?;
        clip_grad_norm(&mut x.value_store, 10.0)?;
        adam_step(&mut x.store, &mut opt_actor, lr)?;
        adam_step(&mut x.value_store, &mut opt_value, lr)?;
    }
    let tail = &entropies[entropies.len().saturating_sub(50)..];
    Ok(EntropyRise { initial: entropies[0], last: mean(tail), max_entropy: (dims.n_actions as f64).ln() })
}

/// TD loss on a two-state chain whose joint values are exactly
/// `Q_tot(s0) = 2`, `Q_tot(s1) = 1`: agent utilities are zero, the mixer's
/// state value reads the one-hot state, and rewards satisfy the Bellman
/// equation at discount `gamma` (`s1` is terminal).
pub fn td_fixture_loss(gamma: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dims = PolicyDims { obs_dim: 2, state_dim: 2, n_agents: 2, n_actions: 3, hidden: 4, mixer_embed: 2 };
    let mut p = ExploitParams::new(dims, &mut rng);
    p.store.fill_zero();
    let v = &p.mixer.state_value.layers;
    let (w0, w1, b1) = (v[0].weight, v[1].weight, v[1].bias);
    p.store.get_mut(w0).data = vec![1.0, 0.0, 0.0, 1.0];
    p.store.get_mut(w1).data = vec![2.0, 1.0];
    p.store.get_mut(b1).data = vec![0.0];
    p.sync_target()?;

    let (s0, s1) = (vec![1.0, 0.0], vec![0.0, 1.0]);
    let obs = |s: &Vec<f64>| vec![s.clone(); 2];
    let mut ep = Episode::new(s0.clone(), obs(&s0));
    ep.push(vec![0, 1], 2.0 - gamma * 1.0, s1.clone(), obs(&s1));
    ep.push(vec![2, 0], 1.0, s0.clone(), obs(&s0));
    ep.terminated = true;
    let batch = EpisodeBatch::from_episodes(&[&ep], dims.n_actions)?;
    p.td_loss(&batch, &batch.rewards, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes_and_flags_faults() {
        let report = gradcheck_suite(3, None).unwrap();
        let names: Vec<&str> = report.iter().map(|c| c.component).collect();
        assert_eq!(names, GRADCHECK_COMPONENTS);
        for c in &report {
            assert!(c.report.max_rel_error <= 1e-4, "{} {:?}", c.component, c.report);
        }
        let faulty = gradcheck_suite(3, Some("mixer")).unwrap();
        let bad: Vec<&str> = faulty.iter().filter(|c| c.report.max_rel_error > 1e-4).map(|c| c.component).collect();
        assert_eq!(bad, vec!["mixer"]);
        assert!(gradcheck_suite(3, Some("nope")).is_err());
    }

    #[test]
    fn td_fixture_is_self_consistent() {
        assert!(td_fixture_loss(0.9).unwrap().abs() <= 1e-10);
    }

    #[test]
    fn zero_reward_actor_flattens() {
        let r = entropy_rise(1, 300, 0.05, 1e-2).unwrap();
        assert!(r.last > r.initial, "{r:?}");
    }

    #[test]
    fn block_means_drop_partial_tail() {
        assert_eq!(block_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }
}
