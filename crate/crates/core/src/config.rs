//! Experiment configuration: a sectioned key/value document (TOML syntax)
//! with an `[env]` and an `[algo]` section plus a few top-level keys.
//!
//! ```toml
//! variant = "ices"
//! seed = 7
//! step_max = 200000
//! out_dir = "runs/corridor"
//!
//! [env]
//! name = "noisy_corridor"
//! episode_limit = 30
//!
//! [algo]
//! alpha_start = 0.2
//! alpha_end = 0.05
//! beta = 0.05
//! ```
//!
//! `train_interval`, `target_update_interval` and `eval_interval` count
//! environment steps. Training runs at most once per finished episode, as
//! soon as at least `train_interval` steps have elapsed since the last
//! training event; target syncs and evaluations fire whenever the step
//! counter crosses a multiple of their interval.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{Cell, CorridorConfig, Environment, MatrixGame, MatrixGameTable, NoisyCorridor};
use crate::error::{IcesError, Result};

/// Training-algorithm variant, including the ablations and the plain
/// value-decomposition baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Ices,
    /// One scaffold for the whole team: every action masked in the
    /// counterfactual prior, the same value for all agents.
    GlobalCon,
    /// Scaffolds summed into the TD reward; no exploration actor.
    IntExt,
    /// Exploration actor without the global state input.
    NoS,
    /// No entropy regularisation (`beta = 0`).
    NoMaxent,
    /// Euclidean next-state error instead of latent KL.
    NoCvae,
    /// Two independent CVAEs with separate decoders.
    TwoCvaes,
    /// Pure epsilon-greedy value decomposition, `alpha = 0` throughout.
    QmixBaseline,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Ices,
        Variant::GlobalCon,
        Variant::IntExt,
        Variant::NoS,
        Variant::NoMaxent,
        Variant::NoCvae,
        Variant::TwoCvaes,
        Variant::QmixBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ices => "ices",
            Variant::GlobalCon => "global_con",
            Variant::IntExt => "int_ext",
            Variant::NoS => "no_s",
            Variant::NoMaxent => "no_maxent",
            Variant::NoCvae => "no_cvae",
            Variant::TwoCvaes => "two_cvaes",
            Variant::QmixBaseline => "qmix_baseline",
        }
    }

    /// Whether the exploration actor takes part in action selection.
    pub fn uses_explorer(self) -> bool {
        !matches!(self, Variant::IntExt | Variant::QmixBaseline)
    }

    /// Whether scaffold networks are trained at all.
    pub fn uses_scaffolds(self) -> bool {
        !matches!(self, Variant::QmixBaseline)
    }

    /// Epsilon-greedy is dropped after annealing only when the exploration
    /// actor supplies the randomness.
    pub fn removes_epsilon_after_anneal(self) -> bool {
        self.uses_explorer()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = IcesError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| IcesError::config("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `r − V − β(1 + log ν(u))`: the exact gradient of reward plus entropy.
    #[default]
    ExactEntropy,
    /// `r − V − β`, the constant-offset form.
    PaperLiteral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: String,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_height")]
    pub height: usize,
    #[serde(default = "d_agents")]
    pub n_agents: usize,
    #[serde(default = "d_noisy")]
    pub noisy_cells: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noisy_positions: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub walls: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub starts: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<[usize; 2]>,
    #[serde(default = "d_limit")]
    pub episode_limit: usize,
    #[serde(default)]
    pub step_penalty: f64,
}

fn d_width() -> usize { 8 }
fn d_height() -> usize { 4 }
fn d_agents() -> usize { 2 }
fn d_noisy() -> usize { 3 }
fn d_limit() -> usize { 30 }

impl EnvConfig {
    pub fn corridor() -> Self {
        Self {
            name: "noisy_corridor".into(),
            width: d_width(),
            height: d_height(),
            n_agents: d_agents(),
            noisy_cells: d_noisy(),
            noisy_positions: Vec::new(),
            walls: Vec::new(),
            starts: Vec::new(),
            goal: None,
            episode_limit: d_limit(),
            step_penalty: 0.0,
        }
    }

    pub fn matrix_game() -> Self {
        Self { name: "matrix_game".into(), episode_limit: 10, ..Self::corridor() }
    }

    pub fn corridor_config(&self) -> CorridorConfig {
        let cells = |v: &[[usize; 2]]| v.iter().map(|c| (c[0], c[1])).collect::<Vec<Cell>>();
        CorridorConfig {
            width: self.width,
            height: self.height,
            n_agents: self.n_agents,
            noisy_cells: self.noisy_cells,
            noisy_positions: cells(&self.noisy_positions),
            walls: cells(&self.walls),
            starts: cells(&self.starts),
            goal: self.goal.map(|g| (g[0], g[1])),
            episode_limit: self.episode_limit,
            step_penalty: self.step_penalty,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        match self.name.as_str() {
            "noisy_corridor" => Ok(Box::new(NoisyCorridor::new(self.corridor_config())?)),
            "matrix_game" => Ok(Box::new(MatrixGame::new(MatrixGameTable::shipped(), self.episode_limit)?)),
            other => Err(IcesError::config("env.name", format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    pub gamma: f64,
    pub lr_exploit: f64,
    pub lr_explore: f64,
    pub lr_value: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub beta: f64,
    pub epsilon_start: f64,
    pub epsilon_finish: f64,
    pub epsilon_anneal_steps: u64,
    pub advantage_mode: AdvantageMode,
    pub train_interval: u64,
    pub target_update_interval: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub hidden_dim: usize,
    pub mixer_embed_dim: usize,
    pub grad_clip: f64,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub scaffold_hidden: usize,
    /// Decoder hidden width; 0 gives an affine decoder.
    pub decoder_hidden: usize,
    pub scaffold_lr: f64,
    pub scaffold_clip: f64,
    pub scaffold_reward_clip: f64,
    pub int_ext_weight: f64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr_exploit: 5e-4,
            lr_explore: 1e-3,
            lr_value: 1e-3,
            alpha_start: 0.2,
            alpha_end: 0.05,
            beta: 0.05,
            epsilon_start: 1.0,
            epsilon_finish: 0.05,
            epsilon_anneal_steps: 50_000,
            advantage_mode: AdvantageMode::ExactEntropy,
            train_interval: 1,
            target_update_interval: 2_000,
            batch_size: 32,
            buffer_capacity: 5_000,
            hidden_dim: 64,
            mixer_embed_dim: 32,
            grad_clip: 10.0,
            latent_dim: 8,
            embed_dim: 4,
            scaffold_hidden: 64,
            decoder_hidden: 64,
            scaffold_lr: 1e-4,
            scaffold_clip: 0.1,
            scaffold_reward_clip: 10.0,
            int_ext_weight: 1.0,
            eval_interval: 2_000,
            eval_episodes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_step_max")]
    pub step_max: u64,
    #[serde(default = "d_out_dir")]
    pub out_dir: String,
    pub env: EnvConfig,
    #[serde(default)]
    pub algo: AlgoConfig,
}

fn d_seed() -> u64 { 1 }
fn d_step_max() -> u64 { 200_000 }
fn d_out_dir() -> String { "runs/default".into() }

const TOP_KEYS: &[&str] = &["variant", "seed", "step_max", "out_dir", "env", "algo"];
const ENV_KEYS: &[&str] = &[
    "name", "width", "height", "n_agents", "noisy_cells", "noisy_positions", "walls", "starts",
    "goal", "episode_limit", "step_penalty",
];
const ALGO_KEYS: &[&str] = &[
    "gamma", "lr_exploit", "lr_explore", "lr_value", "alpha_start", "alpha_end", "beta",
    "epsilon_start", "epsilon_finish", "epsilon_anneal_steps", "advantage_mode", "train_interval",
    "target_update_interval", "batch_size", "buffer_capacity", "hidden_dim", "mixer_embed_dim",
    "grad_clip", "latent_dim", "embed_dim", "scaffold_hidden", "decoder_hidden", "scaffold_lr", "scaffold_clip",
    "scaffold_reward_clip", "int_ext_weight", "eval_interval", "eval_episodes",
];

impl ExperimentConfig {
    pub fn new(env: EnvConfig) -> Self {
        Self {
            variant: Variant::default(),
            seed: d_seed(),
            step_max: d_step_max(),
            out_dir: d_out_dir(),
            env,
            algo: AlgoConfig::default(),
        }
    }

    /// Parses and validates a configuration document.
    pub fn parse_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| IcesError::config("<document>", e.message().to_string()))?;
        check_keys(&table, "", TOP_KEYS)?;
        match table.get("env") {
            Some(toml::Value::Table(env)) => check_keys(env, "env.", ENV_KEYS)?,
            Some(_) => return Err(IcesError::config("env", "must be a section")),
            None => return Err(IcesError::config("env.name", "missing [env] section")),
        }
        if let Some(env) = table.get("env").and_then(|v| v.as_table()) {
            if !env.contains_key("name") {
                return Err(IcesError::config("env.name", "missing environment name"));
            }
        }
        match table.get("algo") {
            Some(toml::Value::Table(algo)) => check_keys(algo, "algo.", ALGO_KEYS)?,
            Some(_) => return Err(IcesError::config("algo", "must be a section")),
            None => {}
        }
        let mut cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| IcesError::config(error_key(&e), e.message().to_string()))?;
        cfg.apply_variant_overrides();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// Settings implied by the variant that override user values.
    pub fn apply_variant_overrides(&mut self) {
        match self.variant {
            Variant::NoMaxent => self.algo.beta = 0.0,
            Variant::IntExt | Variant::QmixBaseline => {
                self.algo.alpha_start = 0.0;
                self.algo.alpha_end = 0.0;
            }
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.algo;
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(IcesError::config(key, format!("{v} outside [0, 1]")))
            }
        };
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(IcesError::config(key, format!("{v} must be positive")))
            }
        };
        let non_negative = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(IcesError::config(key, format!("{v} must be non-negative")))
            }
        };
        unit("algo.alpha_start", a.alpha_start)?;
        unit("algo.alpha_end", a.alpha_end)?;
        unit("algo.epsilon_start", a.epsilon_start)?;
        unit("algo.epsilon_finish", a.epsilon_finish)?;
        if a.alpha_end > a.alpha_start {
            return Err(IcesError::config("algo.alpha_end", "must not exceed alpha_start (alpha only anneals down)"));
        }
        if !(a.gamma > 0.0 && a.gamma <= 1.0) {
            return Err(IcesError::config("algo.gamma", format!("{} outside (0, 1]", a.gamma)));
        }
        non_negative("algo.beta", a.beta)?;
        non_negative("algo.lr_exploit", a.lr_exploit)?;
        non_negative("algo.lr_explore", a.lr_explore)?;
        non_negative("algo.lr_value", a.lr_value)?;
        non_negative("algo.scaffold_lr", a.scaffold_lr)?;
        non_negative("algo.int_ext_weight", a.int_ext_weight)?;
        positive("algo.scaffold_clip", a.scaffold_clip)?;
        positive("algo.scaffold_reward_clip", a.scaffold_reward_clip)?;
        positive("algo.grad_clip", a.grad_clip)?;
        for (key, v) in [
            ("algo.train_interval", a.train_interval as usize),
            ("algo.target_update_interval", a.target_update_interval as usize),
            ("algo.batch_size", a.batch_size),
            ("algo.buffer_capacity", a.buffer_capacity),
            ("algo.hidden_dim", a.hidden_dim),
            ("algo.mixer_embed_dim", a.mixer_embed_dim),
            ("algo.latent_dim", a.latent_dim),
            ("algo.embed_dim", a.embed_dim),
            ("algo.scaffold_hidden", a.scaffold_hidden),
            ("algo.eval_interval", a.eval_interval as usize),
        ] {
            if v == 0 {
                return Err(IcesError::config(key, "must be positive"));
            }
        }
        if a.batch_size > a.buffer_capacity {
            return Err(IcesError::config("algo.batch_size", "exceeds buffer_capacity"));
        }
        let e = &self.env;
        if !matches!(e.name.as_str(), "noisy_corridor" | "matrix_game") {
            return Err(IcesError::config("env.name", format!("unknown environment `{}`", e.name)));
        }
        if e.episode_limit == 0 {
            return Err(IcesError::config("env.episode_limit", "must be positive"));
        }
        if e.n_agents == 0 {
            return Err(IcesError::config("env.n_agents", "must be positive"));
        }
        if !e.step_penalty.is_finite() {
            return Err(IcesError::config("env.step_penalty", "must be finite"));
        }
        // layout problems surface as config errors from the constructor
        e.build().map(|_| ())
    }

    /// FNV-1a digest of the canonical serialisation, as 16 hex digits.
    pub fn content_hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml_string().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

fn check_keys(table: &toml::Table, prefix: &str, allowed: &[&str]) -> Result<()> {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(IcesError::config(format!("{prefix}{key}"), "unknown key"));
        }
    }
    Ok(())
}

fn error_key(e: &toml::de::Error) -> String {
    // serde reports the failing field in the message, e.g. "invalid type ... for key `algo.beta`"
    let msg = e.message();
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "<document>".into()
}
