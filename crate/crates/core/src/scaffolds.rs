//! Dual-encoder CVAE over next global states and the per-agent intrinsic
//! scaffold derived from it.
//!
//! Two encoders share one decoder. The full encoder ψ conditions on the state
//! and the complete joint action; the counterfactual encoder φ sees the same
//! joint action with agent `i`'s embedding replaced by a learned mask token.
//! Each encoder has a trunk, a prior head on the trunk and a posterior head
//! on `[trunk, s']`. The scaffold for agent `i` is the KL divergence between
//! the two priors.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{IcesError, Result};
use crate::nn::dist::{kl_diag_gaussian, kl_diag_gaussian_rows, reparameterize_rows, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::nn::{
    adam_step, clip_grad_norm, Activation, Embedding, LatentGaussian, Linear, Mat, Mlp, OptimizerState,
    ParamStore, Tape, Var,
};

/// How the intrinsic signal is computed (and which counterfactual the φ
/// branch is trained on).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaffoldMode {
    /// Per-agent latent KL with a shared decoder.
    Individual,
    /// KL against the prior with every action masked; one value per team.
    GlobalCon,
    /// Distance between `s'` and the decoded counterfactual prior mean.
    Euclidean,
    /// Per-agent latent KL, but φ has its own embedding and decoder.
    TwoCvaes,
}

impl FromStr for ScaffoldMode {
    type Err = IcesError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(Self::Individual),
            "global_con" => Ok(Self::GlobalCon),
            "euclidean" => Ok(Self::Euclidean),
            "two_cvaes" => Ok(Self::TwoCvaes),
            other => Err(IcesError::config("algo.scaffold_mode", format!("unknown scaffold mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaffoldDims {
    pub state_dim: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Hidden width of the decoder; 0 makes it a single affine map.
    pub decoder_hidden: usize,
}

impl ScaffoldDims {
    fn decoder_widths(&self) -> Vec<usize> {
        if self.decoder_hidden == 0 {
            vec![self.latent_dim, self.state_dim]
        } else {
            vec![self.latent_dim, self.decoder_hidden, self.state_dim]
        }
    }
}

/// Which action slots the counterfactual encoder masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    Agent(usize),
    All,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub trunk: Mlp,
    pub prior_head: Linear,
    pub posterior: Mlp,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: &ScaffoldDims, rng: &mut R) -> Self {
        let input = d.state_dim + d.n_agents * d.embed_dim;
        Self {
            trunk: Mlp::new(store, &format!("{name}.trunk"), &[input, d.hidden, d.hidden], Activation::Tanh, rng),
            prior_head: Linear::new(store, &format!("{name}.prior"), d.hidden, 2 * d.latent_dim, rng),
            posterior: Mlp::new(
                store,
                &format!("{name}.posterior"),
                &[d.hidden + d.state_dim, d.hidden, 2 * d.latent_dim],
                Activation::Tanh,
                rng,
            ),
        }
    }
}

/// ψ, φ, θ and the action embeddings, all in one store.
#[derive(Clone, Debug)]
pub struct ScaffoldParams {
    pub store: ParamStore,
    pub dims: ScaffoldDims,
    pub mode: ScaffoldMode,
    /// `|U| + 1` rows; the last row is the mask token.
    pub embed: Embedding,
    pub psi: Encoder,
    pub phi: Encoder,
    pub theta: Mlp,
    /// Same ids as `embed` / `theta` unless the mode is [`ScaffoldMode::TwoCvaes`].
    pub phi_embed: Embedding,
    pub phi_theta: Mlp,
}

/// Aligned transitions `(s, u, s')`, row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaffoldBatch {
    pub states: Vec<f64>,
    pub actions: Vec<usize>,
    pub next_states: Vec<f64>,
    pub len: usize,
}

impl ScaffoldBatch {
    pub fn new(states: Vec<f64>, actions: Vec<usize>, next_states: Vec<f64>, n_agents: usize) -> Result<Self> {
        let len = actions.len() / n_agents.max(1);
        if len == 0 || actions.len() != len * n_agents {
            return Err(IcesError::Dimension(format!("{} actions for {n_agents} agents", actions.len())));
        }
        if states.len() % len != 0 || states.len() != next_states.len() {
            return Err(IcesError::Dimension("states and next states are misaligned".into()));
        }
        Ok(Self { states, actions, next_states, len })
    }

    pub fn push(&mut self, s: &[f64], u: &[usize], s_next: &[f64]) {
        self.states.extend_from_slice(s);
        self.actions.extend_from_slice(u);
        self.next_states.extend_from_slice(s_next);
        self.len += 1;
    }

    /// Rows `idx` of this batch, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let sd = self.states.len() / self.len.max(1);
        let n = self.actions.len() / self.len.max(1);
        let mut out = Self::default();
        for &r in idx {
            out.push(
                &self.states[r * sd..(r + 1) * sd],
                &self.actions[r * n..(r + 1) * n],
                &self.next_states[r * sd..(r + 1) * sd],
            );
        }
        out
    }
}

/// Mean and clamped log-variance vars of a batch of latent Gaussians.
#[derive(Clone, Copy, Debug)]
pub struct LatentRows {
    pub mean: Var,
    pub log_var: Var,
}

impl LatentRows {
    pub fn to_gaussians(&self, tape: &Tape) -> Vec<LatentGaussian> {
        let m = tape.value(self.mean);
        let lv = tape.value(self.log_var);
        (0..m.rows)
            .map(|r| LatentGaussian { mean: m.row(r).to_vec(), log_var: lv.row(r).to_vec() })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Full,
    Counterfactual,
}

/// Scalar pieces of one ELBO evaluation, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboParts {
    pub loss: f64,
    pub kl_full: f64,
    pub kl_cf: f64,
    pub recon_full: f64,
    pub recon_cf: f64,
}

/// Standard-normal noise for one ELBO evaluation.
#[derive(Clone, Debug)]
pub struct ElboNoise {
    pub full: Mat,
    pub cf: Mat,
}

impl ScaffoldParams {
    pub fn new<R: Rng + ?Sized>(dims: ScaffoldDims, mode: ScaffoldMode, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let embed = Embedding::new(&mut store, "embed", dims.n_actions + 1, dims.embed_dim, rng);
        let psi = Encoder::new(&mut store, "psi", &dims, rng);
        let phi = Encoder::new(&mut store, "phi", &dims, rng);
        let theta = Mlp::new(&mut store, "theta", &dims.decoder_widths(), Activation::Tanh, rng);
        let (phi_embed, phi_theta) = if mode == ScaffoldMode::TwoCvaes {
            (
                Embedding::new(&mut store, "phi_embed", dims.n_actions + 1, dims.embed_dim, rng),
                Mlp::new(&mut store, "phi_theta", &dims.decoder_widths(), Activation::Tanh, rng),
            )
        } else {
            (embed.clone(), theta.clone())
        };
        Self { store, dims, mode, embed, psi, phi, theta, phi_embed, phi_theta }
    }

    pub fn mask_token(&self) -> usize {
        self.dims.n_actions
    }

    /// Copies every ψ tensor onto its φ counterpart, so both encoders start
    /// out computing the same function of their (differently masked) inputs.
    pub fn tie_counterfactual_to_full(&mut self) {
        let names: Vec<String> = self.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names.iter().filter(|n| n.starts_with("psi.")) {
            let src = self.store.find(name).expect("listed name");
            let dst = self.store.find(&format!("phi.{}", &name[4..])).expect("phi mirrors psi");
            let data = self.store.get(src).data.clone();
            self.store.get_mut(dst).data = data;
        }
    }

    fn check_rows(&self, batch: &ScaffoldBatch) -> Result<()> {
        let d = &self.dims;
        if batch.len == 0 {
            return Err(IcesError::Dimension("empty scaffold batch".into()));
        }
        if batch.states.len() != batch.len * d.state_dim
            || batch.next_states.len() != batch.len * d.state_dim
            || batch.actions.len() != batch.len * d.n_agents
        {
            return Err(IcesError::Dimension(format!(
                "scaffold batch of {} rows does not match state_dim {} and {} agents",
                batch.len, d.state_dim, d.n_agents
            )));
        }
        if let Some(a) = batch.actions.iter().find(|&&a| a >= d.n_actions) {
            return Err(IcesError::Dimension(format!("action {a} outside [0, {})", d.n_actions)));
        }
        Ok(())
    }

    /// Encoder trunk over `[s, E(u_0), …, E(u_{n−1})]`. `slots[j]` holds the
    /// embedding index of agent `j` for every row.
    fn trunk(
        &self,
        tape: &mut Tape,
        branch: Branch,
        states: Var,
        slots: &[Vec<usize>],
    ) -> Result<Var> {
        let (enc, emb) = match branch {
            Branch::Full => (&self.psi, &self.embed),
            Branch::Counterfactual => (&self.phi, &self.phi_embed),
        };
        let mut parts = vec![states];
        for idx in slots {
            parts.push(emb.lookup(tape, &self.store, idx)?);
        }
        let x = tape.concat_cols(&parts);
        let h = enc.trunk.forward(tape, &self.store, x)?;
        Ok(tape.tanh(h))
    }

    fn split_gaussian(&self, tape: &mut Tape, out: Var) -> LatentRows {
        let l = self.dims.latent_dim;
        let mean = tape.slice_cols(out, 0, l);
        let raw = tape.slice_cols(out, l, l);
        let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        LatentRows { mean, log_var }
    }

    fn prior_head(&self, tape: &mut Tape, branch: Branch, trunk: Var) -> Result<LatentRows> {
        let enc = if branch == Branch::Full { &self.psi } else { &self.phi };
        let out = enc.prior_head.forward(tape, &self.store, trunk)?;
        Ok(self.split_gaussian(tape, out))
    }

    fn posterior_head(&self, tape: &mut Tape, branch: Branch, trunk: Var, next: Var) -> Result<LatentRows> {
        let enc = if branch == Branch::Full { &self.psi } else { &self.phi };
        let x = tape.concat_cols(&[trunk, next]);
        let out = enc.posterior.forward(tape, &self.store, x)?;
        Ok(self.split_gaussian(tape, out))
    }

    /// Decoder mean for latents `z`; `branch` picks θ or φ's own decoder.
    pub fn decode_rows(&self, tape: &mut Tape, branch: Branch, z: Var) -> Result<Var> {
        let dec = if branch == Branch::Full { &self.theta } else { &self.phi_theta };
        dec.forward(tape, &self.store, z)
    }

    fn full_slots(&self, batch: &ScaffoldBatch) -> Vec<Vec<usize>> {
        let n = self.dims.n_agents;
        (0..n).map(|j| (0..batch.len).map(|b| batch.actions[b * n + j]).collect()).collect()
    }

    /// Slots with `mask` applied, row `b` of the batch only.
    fn masked_slots(&self, batch: &ScaffoldBatch, mask: Mask) -> Vec<Vec<usize>> {
        let n = self.dims.n_agents;
        (0..n)
            .map(|j| {
                (0..batch.len)
                    .map(|b| match mask {
                        Mask::All => self.mask_token(),
                        Mask::Agent(i) if i == j => self.mask_token(),
                        Mask::Agent(_) => batch.actions[b * n + j],
                    })
                    .collect()
            })
            .collect()
    }

    /// The counterfactual rows the φ branch is trained and queried on:
    /// `n` stacked copies (agent-major) for per-agent modes, one copy with
    /// all actions masked for the global mode.
    fn counterfactual_masks(&self) -> Vec<Mask> {
        match self.mode {
            ScaffoldMode::GlobalCon => vec![Mask::All],
            _ => (0..self.dims.n_agents).map(Mask::Agent).collect(),
        }
    }

    fn stacked_counterfactual(&self, batch: &ScaffoldBatch, masks: &[Mask]) -> (Vec<f64>, Vec<f64>, Vec<Vec<usize>>) {
        let n = self.dims.n_agents;
        let mut states = Vec::with_capacity(batch.states.len() * masks.len());
        let mut next = Vec::with_capacity(batch.states.len() * masks.len());
        let mut slots = vec![Vec::with_capacity(batch.len * masks.len()); n];
        for &m in masks {
            states.extend_from_slice(&batch.states);
            next.extend_from_slice(&batch.next_states);
            for (j, s) in self.masked_slots(batch, m).into_iter().enumerate() {
                slots[j].extend(s);
            }
        }
        (states, next, slots)
    }

    /// `p_ψ(z' | s, u)` for every row of `batch`.
    pub fn prior_full_rows(&self, tape: &mut Tape, batch: &ScaffoldBatch) -> Result<LatentRows> {
        self.check_rows(batch)?;
        let s = tape.constant_rows(batch.len, self.dims.state_dim, batch.states.clone());
        let h = self.trunk(tape, Branch::Full, s, &self.full_slots(batch))?;
        self.prior_head(tape, Branch::Full, h)
    }

    /// `p_φ(z' | s, u^{−i})` for every row of `batch`.
    pub fn prior_counterfactual_rows(&self, tape: &mut Tape, batch: &ScaffoldBatch, mask: Mask) -> Result<LatentRows> {
        self.check_rows(batch)?;
        if let Mask::Agent(i) = mask {
            if i >= self.dims.n_agents {
                return Err(IcesError::Dimension(format!("agent {i} of {}", self.dims.n_agents)));
            }
        }
        let s = tape.constant_rows(batch.len, self.dims.state_dim, batch.states.clone());
        let h = self.trunk(tape, Branch::Counterfactual, s, &self.masked_slots(batch, mask))?;
        self.prior_head(tape, Branch::Counterfactual, h)
    }

    fn single(&self, s: &[f64], u: &[usize], s_next: Option<&[f64]>) -> Result<ScaffoldBatch> {
        let next = s_next.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; s.len()]);
        let b = ScaffoldBatch::new(s.to_vec(), u.to_vec(), next, self.dims.n_agents)?;
        self.check_rows(&b)?;
        Ok(b)
    }

    pub fn prior_full(&self, s: &[f64], u: &[usize]) -> Result<LatentGaussian> {
        let b = self.single(s, u, None)?;
        let mut tape = Tape::new();
        let rows = self.prior_full_rows(&mut tape, &b)?;
        Ok(rows.to_gaussians(&tape).remove(0))
    }

    pub fn prior_counterfactual(&self, s: &[f64], u: &[usize], i: usize) -> Result<LatentGaussian> {
        let b = self.single(s, u, None)?;
        let mut tape = Tape::new();
        let rows = self.prior_counterfactual_rows(&mut tape, &b, Mask::Agent(i))?;
        Ok(rows.to_gaussians(&tape).remove(0))
    }

    /// `q(z' | s, u or u^{−i}, s')`; `i` is ignored for the full branch.
    pub fn posterior(&self, branch: Branch, s: &[f64], u: &[usize], s_next: &[f64], i: usize) -> Result<LatentGaussian> {
        let b = self.single(s, u, Some(s_next))?;
        let mut tape = Tape::new();
        let st = tape.constant_rows(1, self.dims.state_dim, b.states.clone());
        let nx = tape.constant_rows(1, self.dims.state_dim, b.next_states.clone());
        let slots = match branch {
            Branch::Full => self.full_slots(&b),
            Branch::Counterfactual => {
                if i >= self.dims.n_agents {
                    return Err(IcesError::Dimension(format!("agent {i} of {}", self.dims.n_agents)));
                }
                self.masked_slots(&b, Mask::Agent(i))
            }
        };
        let h = self.trunk(&mut tape, branch, st, &slots)?;
        let rows = self.posterior_head(&mut tape, branch, h, nx)?;
        Ok(rows.to_gaussians(&tape).remove(0))
    }

    /// Mean of the unit-variance Gaussian `p_θ(s' | z)`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dims.latent_dim {
            return Err(IcesError::Dimension(format!("latent of length {} for dim {}", z.len(), self.dims.latent_dim)));
        }
        let mut tape = Tape::new();
        let zv = tape.constant_rows(1, z.len(), z.to_vec());
        let out = self.decode_rows(&mut tape, Branch::Full, zv)?;
        Ok(tape.value(out).data.clone())
    }

    /// Fresh standard-normal noise sized for `batch`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: &ScaffoldBatch, rng: &mut R) -> ElboNoise {
        let l = self.dims.latent_dim;
        let cf_rows = batch.len * self.counterfactual_masks().len();
        let mut draw = |rows: usize| Mat::new(rows, l, (0..rows * l).map(|_| rng.sample(StandardNormal)).collect());
        let full = draw(batch.len);
        let cf = draw(cf_rows);
        ElboNoise { full, cf }
    }

    /// Negative ELBO on the tape:
    /// `mean_b[KL(q_ψ‖p_ψ) − log p_θ(s'|z_ψ)] + mean_{b,i}[KL(q_φ‖p_φ) − log p_θ(s'|z_φ)]`.
    pub fn elbo_loss_on_tape(&self, tape: &mut Tape, batch: &ScaffoldBatch, noise: &ElboNoise) -> Result<(Var, ElboParts)> {
        self.check_rows(batch)?;
        let d = self.dims;
        let masks = self.counterfactual_masks();
        let cf_rows = batch.len * masks.len();
        if noise.full.rows != batch.len || noise.cf.rows != cf_rows {
            return Err(IcesError::Dimension("ELBO noise does not match the batch".into()));
        }

        let s = tape.constant_rows(batch.len, d.state_dim, batch.states.clone());
        let nx = tape.constant_rows(batch.len, d.state_dim, batch.next_states.clone());
        let h = self.trunk(tape, Branch::Full, s, &self.full_slots(batch))?;
        let (kl_f, rec_f) = self.branch_terms(tape, Branch::Full, h, nx, noise.full.clone())?;

        let (cs, cn, slots) = self.stacked_counterfactual(batch, &masks);
        let s = tape.constant_rows(cf_rows, d.state_dim, cs);
        let nx = tape.constant_rows(cf_rows, d.state_dim, cn);
        let h = self.trunk(tape, Branch::Counterfactual, s, &slots)?;
        let (kl_c, rec_c) = self.branch_terms(tape, Branch::Counterfactual, h, nx, noise.cf.clone())?;

        let a = tape.sub(kl_f, rec_f);
        let b = tape.sub(kl_c, rec_c);
        let loss = tape.add(a, b);
        let parts = ElboParts {
            loss: tape.scalar(loss),
            kl_full: tape.scalar(kl_f),
            kl_cf: tape.scalar(kl_c),
            recon_full: tape.scalar(rec_f),
            recon_cf: tape.scalar(rec_c),
        };
        if !parts.loss.is_finite() {
            return Err(IcesError::Numeric("non-finite ELBO loss".into()));
        }
        Ok((loss, parts))
    }

    /// Batch-mean KL(posterior ‖ prior) and reconstruction log-likelihood.
    fn branch_terms(&self, tape: &mut Tape, branch: Branch, trunk: Var, next: Var, noise: Mat) -> Result<(Var, Var)> {
        let prior = self.prior_head(tape, branch, trunk)?;
        let post = self.posterior_head(tape, branch, trunk, next)?;
        let kl = kl_diag_gaussian_rows(tape, post.mean, post.log_var, prior.mean, prior.log_var);
        let kl = tape.mean_all(kl);
        let eps = tape.constant(noise);
        let z = reparameterize_rows(tape, post.mean, post.log_var, eps);
        let mu = self.decode_rows(tape, branch, z)?;
        let ll = gaussian_log_likelihood_rows(tape, mu, next);
        let ll = tape.mean_all(ll);
        Ok((kl, ll))
    }

    pub fn elbo_loss<R: Rng + ?Sized>(&self, batch: &ScaffoldBatch, rng: &mut R) -> Result<ElboParts> {
        let noise = self.sample_noise(batch, rng);
        let mut tape = Tape::new();
        Ok(self.elbo_loss_on_tape(&mut tape, batch, &noise)?.1)
    }

    /// `r^i_int = KL(p_ψ(z'|s,u) ‖ p_φ(z'|s,u^{−i}))` for a single transition.
    pub fn intrinsic_scaffold(&self, s: &[f64], u: &[usize], i: usize) -> Result<f64> {
        kl_diag_gaussian(&self.prior_full(s, u)?, &self.prior_counterfactual(s, u, i)?)
    }

    /// Intrinsic values for every row and agent of `batch`, laid out
    /// `[row * n_agents + i]`, according to the configured mode.
    pub fn intrinsic_batch(&self, batch: &ScaffoldBatch) -> Result<Vec<f64>> {
        self.check_rows(batch)?;
        let n = self.dims.n_agents;
        let mut out = vec![0.0; batch.len * n];
        let mut tape = Tape::new();
        match self.mode {
            ScaffoldMode::Individual | ScaffoldMode::TwoCvaes => {
                let full = self.prior_full_rows(&mut tape, batch)?;
                let full = full.to_gaussians(&tape);
                for i in 0..n {
                    let cf = self.prior_counterfactual_rows(&mut tape, batch, Mask::Agent(i))?;
                    for (b, q) in cf.to_gaussians(&tape).iter().enumerate() {
                        out[b * n + i] = kl_diag_gaussian(&full[b], q)?;
                    }
                }
            }
            ScaffoldMode::GlobalCon => {
                let full = self.prior_full_rows(&mut tape, batch)?;
                let full = full.to_gaussians(&tape);
                let cf = self.prior_counterfactual_rows(&mut tape, batch, Mask::All)?;
                for (b, q) in cf.to_gaussians(&tape).iter().enumerate() {
                    let v = kl_diag_gaussian(&full[b], q)?;
                    out[b * n..(b + 1) * n].iter_mut().for_each(|x| *x = v);
                }
            }
            ScaffoldMode::Euclidean => {
                let sd = self.dims.state_dim;
                for i in 0..n {
                    let cf = self.prior_counterfactual_rows(&mut tape, batch, Mask::Agent(i))?;
                    let pred = self.decode_rows(&mut tape, Branch::Counterfactual, cf.mean)?;
                    let pred = tape.value(pred);
                    for b in 0..batch.len {
                        out[b * n + i] = euclidean(pred.row(b), &batch.next_states[b * sd..(b + 1) * sd]);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Single-transition scaffold under an explicit mode name, for callers that
/// select the ablation at run time.
pub fn variant_scaffold(params: &ScaffoldParams, mode: &str, s: &[f64], u: &[usize], s_next: &[f64], i: usize) -> Result<f64> {
    let mode: ScaffoldMode = mode.parse()?;
    if mode != params.mode && (mode == ScaffoldMode::TwoCvaes || params.mode == ScaffoldMode::TwoCvaes) {
        return Err(IcesError::config(
            "algo.scaffold_mode",
            format!("parameters were built for {:?}, not {:?}", params.mode, mode),
        ));
    }
    let mut view = params.clone();
    view.mode = mode;
    let b = view.single(s, u, Some(s_next))?;
    let all = view.intrinsic_batch(&b)?;
    all.get(i)
        .copied()
        .ok_or_else(|| IcesError::Dimension(format!("agent {i} of {}", params.dims.n_agents)))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `log N(x; μ, I)` per row: `−½‖x − μ‖² − (d/2) log 2π`, shape `[B, 1]`.
pub fn gaussian_log_likelihood_rows(tape: &mut Tape, mean: Var, target: Var) -> Var {
    let (_, d) = tape.shape(mean);
    let diff = tape.sub(target, mean);
    let sq = tape.square(diff);
    let s = tape.sum_cols(sq);
    let s = tape.scale(s, -0.5);
    tape.add_scalar(s, -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Adam state plus the step hyperparameters for scaffold training.
#[derive(Clone, Debug)]
pub struct ScaffoldTrainer {
    pub opt: OptimizerState,
    pub lr: f64,
    pub clip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaffoldStep {
    pub parts: ElboParts,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

impl ScaffoldTrainer {
    pub fn new(params: &ScaffoldParams, lr: f64, clip: f64) -> Self {
        Self { opt: OptimizerState::for_store(&params.store), lr, clip }
    }

    /// One clipped Adam step on the negative ELBO of `batch`.
    pub fn step<R: Rng + ?Sized>(&mut self, params: &mut ScaffoldParams, batch: &ScaffoldBatch, rng: &mut R) -> Result<ScaffoldStep> {
        let noise = params.sample_noise(batch, rng);
        let mut tape = Tape::new();
        let (loss, parts) = params.elbo_loss_on_tape(&mut tape, batch, &noise)?;
        tape.backward(loss);
        params.store.zero_grad();
        tape.accumulate_grads(&mut params.store);
        let grad_norm = clip_grad_norm(&mut params.store, self.clip)?;
        let clipped_norm = crate::nn::optim::grad_norm(&params.store);
        adam_step(&mut params.store, &mut self.opt, self.lr)?;
        Ok(ScaffoldStep { parts, grad_norm, clipped_norm })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::check_gradients;

    fn dims(n_agents: usize) -> ScaffoldDims {
        ScaffoldDims { state_dim: 3, n_agents, n_actions: 3, embed_dim: 2, hidden: 5, latent_dim: 2, decoder_hidden: 4 }
    }

    fn batch(n_agents: usize) -> ScaffoldBatch {
        let mut b = ScaffoldBatch::default();
        b.push(&[1.0, 0.0, 0.5], &vec![1; n_agents], &[0.0, 1.0, -0.5]);
        b.push(&[0.0, 1.0, -0.2], &(0..n_agents).map(|j| j % 3).collect::<Vec<_>>(), &[0.3, 0.0, 1.0]);
        b
    }

    #[test]
    fn zero_network_gives_standard_normal_priors_and_posteriors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ScaffoldParams::new(dims(2), ScaffoldMode::Individual, &mut rng);
        p.store.fill_zero();
        let std = LatentGaussian::standard(2);
        assert_eq!(p.prior_full(&[1.0, 2.0, 3.0], &[0, 2]).unwrap(), std);
        assert_eq!(p.prior_counterfactual(&[1.0, 2.0, 3.0], &[0, 2], 1).unwrap(), std);
        assert_eq!(p.posterior(Branch::Full, &[1.0, 2.0, 3.0], &[0, 2], &[0.0; 3], 0).unwrap(), std);
        assert_eq!(p.decode(&[0.4, -1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn zero_decoder_log_likelihood_is_closed_form() {
        let mut tape = Tape::new();
        let mu = tape.zeros(1, 3);
        let x = tape.constant_rows(1, 3, vec![1.0, -2.0, 0.5]);
        let ll = gaussian_log_likelihood_rows(&mut tape, mu, x);
        let expected = -0.5 * (1.0 + 4.0 + 0.25) - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((tape.scalar(ll) - expected).abs() < 1e-12);
    }

    #[test]
    fn priors_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ScaffoldParams::new(dims(2), ScaffoldMode::Individual, &mut rng);
        let s = [0.1, 0.2, 0.3];
        assert_eq!(p.prior_full(&s, &[1, 2]).unwrap(), p.prior_full(&s, &[1, 2]).unwrap());
        assert_eq!(p.prior_counterfactual(&s, &[1, 2], 0).unwrap(), p.prior_counterfactual(&s, &[1, 2], 0).unwrap());
        let a = p.posterior(Branch::Counterfactual, &s, &[1, 2], &s, 1).unwrap();
        assert_eq!(a, p.posterior(Branch::Counterfactual, &s, &[1, 2], &s, 1).unwrap());
    }

    #[test]
    fn single_agent_masked_prior_ignores_the_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ScaffoldParams::new(dims(1), ScaffoldMode::Individual, &mut rng);
        let s = [0.5, -0.5, 1.0];
        let a = p.prior_counterfactual(&s, &[0], 0).unwrap();
        for u in 1..3 {
            assert_eq!(a, p.prior_counterfactual(&s, &[u], 0).unwrap());
        }
        assert_ne!(a, p.prior_counterfactual(&[0.0, 0.0, 0.0], &[0], 0).unwrap());
    }

    #[test]
    fn tied_encoders_with_matching_mask_give_zero_scaffold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ScaffoldParams::new(dims(2), ScaffoldMode::Individual, &mut rng);
        p.tie_counterfactual_to_full();
        let u = [2, 1];
        let table = p.embed.table;
        let row = p.store.get(table).row_slice(u[0]).to_vec();
        let mask = p.mask_token();
        let e = p.dims.embed_dim;
        p.store.get_mut(table).data[mask * e..(mask + 1) * e].copy_from_slice(&row);
        let r = p.intrinsic_scaffold(&[0.3, 0.1, -0.4], &u, 0).unwrap();
        assert!(r.abs() < 1e-12, "{r}");
        assert!(p.intrinsic_scaffold(&[0.3, 0.1, -0.4], &u, 1).unwrap() > 0.0);
    }

    #[test]
    fn scaffold_batch_agrees_with_single_evaluation_and_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ScaffoldParams::new(dims(2), ScaffoldMode::Individual, &mut rng);
        let b = batch(2);
        let all = p.intrinsic_batch(&b).unwrap();
        for r in 0..b.len {
            for i in 0..2 {
                let single = p.intrinsic_scaffold(&b.states[r * 3..r * 3 + 3], &b.actions[r * 2..r * 2 + 2], i).unwrap();
                assert!((single - all[r * 2 + i]).abs() < 1e-12);
                assert!(single >= 0.0);
            }
        }
    }

    #[test]
    fn global_mode_assigns_one_value_per_transition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ScaffoldParams::new(dims(3), ScaffoldMode::GlobalCon, &mut rng);
        let all = p.intrinsic_batch(&batch(3)).unwrap();
        for row in all.chunks(3) {
            assert!(row.iter().all(|v| *v == row[0]));
        }
    }

    #[test]
    fn euclidean_mode_with_perfect_predictor_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ScaffoldParams::new(dims(2), ScaffoldMode::Euclidean, &mut rng);
        // zero decoder weights with the output bias set to the target
        let target = [0.25, -0.5, 1.0];
        for id in p.store.ids().collect::<Vec<_>>() {
            if p.store.name(id).starts_with("theta.") {
                p.store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let bias = p.store.find("theta.1.bias").unwrap();
        p.store.get_mut(bias).data.copy_from_slice(&target);
        let v = variant_scaffold(&p, "euclidean", &[0.0, 1.0, 0.0], &[0, 1], &target, 1).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn unknown_mode_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ScaffoldParams::new(dims(2), ScaffoldMode::Individual, &mut rng);
        let err = variant_scaffold(&p, "mutual_info", &[0.0; 3], &[0, 0], &[0.0; 3], 0).unwrap_err();
        assert!(matches!(err, IcesError::Config { .. }));
    }

    #[test]
    fn two_cvaes_disagree_on_action_irrelevant_transitions() {
        // Both sets start random; with no shared decoder nothing aligns the
        // latent spaces, so the KL is far from zero even when actions do not
        // matter. The shared-decoder model with tied encoders reads zero.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let two = ScaffoldParams::new(dims(2), ScaffoldMode::TwoCvaes, &mut rng);
        assert_ne!(two.embed.table, two.phi_embed.table);
        let s = [0.2, 0.2, 0.2];
        let v = variant_scaffold(&two, "two_cvaes", &s, &[1, 1], &s, 0).unwrap();
        assert!(v > 1e-3, "{v}");
    }

    #[test]
    fn elbo_with_posteriors_equal_to_priors_is_reconstruction_only() {
        // Posterior heads that ignore s' and copy the prior head make both KL
        // terms vanish.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = ScaffoldParams::new(dims(2), ScaffoldMode::Individual, &mut rng);
        for enc in ["psi", "phi"] {
            for id in p.store.ids().collect::<Vec<_>>() {
                if p.store.name(id).starts_with(&format!("{enc}.prior")) || p.store.name(id).starts_with(&format!("{enc}.posterior")) {
                    p.store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        let b = batch(2);
        let parts = p.elbo_loss(&b, &mut rng).unwrap();
        assert!(parts.kl_full.abs() < 1e-12 && parts.kl_cf.abs() < 1e-12);
        assert!((parts.loss + parts.recon_full + parts.recon_cf).abs() < 1e-12);
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        for mode in [ScaffoldMode::Individual, ScaffoldMode::GlobalCon, ScaffoldMode::TwoCvaes] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let p = ScaffoldParams::new(dims(2), mode, &mut rng);
            let b = batch(2);
            let noise = p.sample_noise(&b, &mut rng);
            let report = check_gradients(
                &p.store,
                |t, s| {
                    let view = ScaffoldParams { store: s.clone(), ..p.clone() };
                    Ok(view.elbo_loss_on_tape(t, &b, &noise)?.0)
                },
                false,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{mode:?} {report:?}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_and_clip_bounds_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = ScaffoldParams::new(dims(2), ScaffoldMode::Individual, &mut rng);
        let before = p.store.fingerprint();
        let mut tr = ScaffoldTrainer::new(&p, 0.0, 0.1);
        let step = tr.step(&mut p, &batch(2), &mut rng).unwrap();
        assert_eq!(before, p.store.fingerprint());
        assert!(step.clipped_norm <= 0.1 + 1e-12);
    }

    #[test]
    fn training_reduces_loss_on_fixed_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = ScaffoldParams::new(dims(2), ScaffoldMode::Individual, &mut rng);
        let b = batch(2);
        let mut tr = ScaffoldTrainer::new(&p, 1e-2, 1.0);
        let mut losses = Vec::new();
        for _ in 0..400 {
            losses.push(tr.step(&mut p, &b, &mut rng).unwrap().parts.loss);
        }
        let head: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = losses[350..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
