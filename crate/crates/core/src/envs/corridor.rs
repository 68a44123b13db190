use rand::{Rng, RngCore};

use super::{check_joint_action, EnvSpec, Environment, StepResult};
use crate::error::{IcesError, Result};

/// Grid cell `(x, y)`; `x` runs along the corridor, `y` across it.
pub type Cell = (usize, usize);

/// Action names in index order.
pub const CORRIDOR_ACTIONS: [&str; 5] = ["up", "down", "left", "right", "stay"];

#[derive(Clone, Debug, PartialEq)]
pub struct CorridorConfig {
    pub width: usize,
    pub height: usize,
    pub n_agents: usize,
    /// Number of noisy-TV cells, placed deterministically when
    /// `noisy_positions` is empty.
    pub noisy_cells: usize,
    pub noisy_positions: Vec<Cell>,
    pub walls: Vec<Cell>,
    /// Start cell per agent; empty means spread along the left edge.
    pub starts: Vec<Cell>,
    /// Goal cell; `None` means the middle of the right edge.
    pub goal: Option<Cell>,
    pub episode_limit: usize,
    pub step_penalty: f64,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 4,
            n_agents: 2,
            noisy_cells: 3,
            noisy_positions: Vec::new(),
            walls: Vec::new(),
            starts: Vec::new(),
            goal: None,
            episode_limit: 30,
            step_penalty: 0.0,
        }
    }
}

/// Sparse-reward gridworld: the team earns +1 only when every agent stands on
/// the goal cell in the same step. A few cells carry a "noisy TV" channel whose
/// value is redrawn uniformly every step regardless of what the agents do.
///
/// Global state: for each cell (row-major over `y`, then `x`), one occupancy
/// channel per agent followed by the noise channel. Observation of agent `i`:
/// the 3×3 window around it with channels (blocked, other agent, noise),
/// followed by its own normalised `(x, y)`.
#[derive(Clone, Debug)]
pub struct NoisyCorridor {
    cfg: CorridorConfig,
    goal: Cell,
    starts: Vec<Cell>,
    noisy: Vec<Cell>,
    blocked: Vec<bool>,
    noisy_mask: Vec<bool>,
    positions: Vec<Cell>,
    noise: Vec<f64>,
    t: usize,
    done: bool,
}

impl NoisyCorridor {
    pub fn new(cfg: CorridorConfig) -> Result<Self> {
        let (w, h) = (cfg.width, cfg.height);
        if w < 2 || h < 1 {
            return Err(IcesError::config("env.width", "grid must be at least 2x1"));
        }
        if cfg.n_agents == 0 {
            return Err(IcesError::config("env.n_agents", "need at least one agent"));
        }
        if cfg.episode_limit == 0 {
            return Err(IcesError::config("env.episode_limit", "must be positive"));
        }
        let inside = |c: &Cell| c.0 < w && c.1 < h;
        let goal = cfg.goal.unwrap_or((w - 1, h / 2));
        let starts = if cfg.starts.is_empty() {
            (0..cfg.n_agents)
                .map(|i| (0, if cfg.n_agents == 1 { 0 } else { i * (h - 1) / (cfg.n_agents - 1) }))
                .collect()
        } else {
            cfg.starts.clone()
        };
        if starts.len() != cfg.n_agents {
            return Err(IcesError::config("env.starts", "need one start cell per agent"));
        }
        for c in starts.iter().chain(cfg.walls.iter()).chain(std::iter::once(&goal)) {
            if !inside(c) {
                return Err(IcesError::config("env", format!("cell {c:?} lies outside the grid")));
            }
        }
        if cfg.walls.contains(&goal) || starts.iter().any(|s| cfg.walls.contains(s)) {
            return Err(IcesError::config("env.walls", "walls may not cover the goal or a start"));
        }
        let noisy = if cfg.noisy_positions.is_empty() {
            default_noisy_cells(w, h, cfg.noisy_cells, goal, &starts, &cfg.walls)
        } else {
            if let Some(c) = cfg.noisy_positions.iter().find(|c| !inside(c)) {
                return Err(IcesError::config("env.noisy_positions", format!("{c:?} outside the grid")));
            }
            cfg.noisy_positions.clone()
        };
        let mut blocked = vec![false; w * h];
        for &(x, y) in &cfg.walls {
            blocked[y * w + x] = true;
        }
        let mut noisy_mask = vec![false; w * h];
        for &(x, y) in &noisy {
            noisy_mask[y * w + x] = true;
        }
        let n_noise = noisy.len();
        Ok(Self {
            positions: starts.clone(),
            cfg,
            goal,
            starts,
            noisy,
            blocked,
            noisy_mask,
            noise: vec![0.0; n_noise],
            t: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &CorridorConfig {
        &self.cfg
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn positions(&self) -> &[Cell] {
        &self.positions
    }

    pub fn noisy_cells(&self) -> &[Cell] {
        &self.noisy
    }

    pub fn noise_values(&self) -> &[f64] {
        &self.noise
    }

    /// Places agents at arbitrary cells mid-episode (for constructing
    /// contrast sets and tests).
    pub fn set_positions(&mut self, positions: &[Cell]) -> Result<()> {
        if positions.len() != self.cfg.n_agents {
            return Err(IcesError::Dimension("one position per agent".into()));
        }
        if positions.iter().any(|c| self.is_blocked(c.0 as i64, c.1 as i64)) {
            return Err(IcesError::Dimension("position is blocked".into()));
        }
        self.positions = positions.to_vec();
        Ok(())
    }

    /// Which cells re-randomise every step independently of all actions.
    /// The state argument is accepted for interface symmetry; the mask is a
    /// property of the layout.
    pub fn noisy_tv_mask(&self, _state: &[f64]) -> Vec<bool> {
        self.noisy_mask.clone()
    }

    fn is_blocked(&self, x: i64, y: i64) -> bool {
        let (w, h) = (self.cfg.width as i64, self.cfg.height as i64);
        x < 0 || y < 0 || x >= w || y >= h || self.blocked[(y * w + x) as usize]
    }

    fn resample_noise(&mut self, rng: &mut dyn RngCore) {
        for v in &mut self.noise {
            *v = rng.gen::<f64>();
        }
    }

    fn noise_at(&self, x: usize, y: usize) -> f64 {
        self.noisy
            .iter()
            .position(|c| *c == (x, y))
            .map(|k| self.noise[k])
            .unwrap_or(0.0)
    }

    pub fn state(&self) -> Vec<f64> {
        let (w, h, n) = (self.cfg.width, self.cfg.height, self.cfg.n_agents);
        let ch = n + 1;
        let mut s = vec![0.0; w * h * ch];
        for (i, &(x, y)) in self.positions.iter().enumerate() {
            s[(y * w + x) * ch + i] = 1.0;
        }
        for (k, &(x, y)) in self.noisy.iter().enumerate() {
            s[(y * w + x) * ch + n] = self.noise[k];
        }
        s
    }

    pub fn observation(&self, agent: usize) -> Vec<f64> {
        let (ax, ay) = self.positions[agent];
        let mut o = Vec::with_capacity(29);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y) = (ax as i64 + dx, ay as i64 + dy);
                if self.is_blocked(x, y) {
                    o.extend_from_slice(&[1.0, 0.0, 0.0]);
                    continue;
                }
                let c = (x as usize, y as usize);
                let other = self
                    .positions
                    .iter()
                    .enumerate()
                    .any(|(j, p)| j != agent && *p == c);
                o.push(0.0);
                o.push(if other { 1.0 } else { 0.0 });
                o.push(self.noise_at(c.0, c.1));
            }
        }
        o.push(ax as f64 / (self.cfg.width - 1).max(1) as f64);
        o.push(ay as f64 / (self.cfg.height - 1).max(1) as f64);
        o
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.cfg.n_agents).map(|i| self.observation(i)).collect()
    }

    /// Cell reached from `from` under `action` (walls and edges block).
    pub fn move_target(&self, from: Cell, action: usize) -> Cell {
        let (dx, dy): (i64, i64) = match action {
            0 => (0, -1),
            1 => (0, 1),
            2 => (-1, 0),
            3 => (1, 0),
            _ => (0, 0),
        };
        let (x, y) = (from.0 as i64 + dx, from.1 as i64 + dy);
        if self.is_blocked(x, y) {
            from
        } else {
            (x as usize, y as usize)
        }
    }
}

fn default_noisy_cells(
    w: usize,
    h: usize,
    k: usize,
    goal: Cell,
    starts: &[Cell],
    walls: &[Cell],
) -> Vec<Cell> {
    let candidates: Vec<Cell> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|c| *c != goal && !starts.contains(c) && !walls.contains(c))
        .collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    // spread evenly, offset so cells land mid-corridor rather than on edges
    (0..k.min(candidates.len()))
        .map(|j| candidates[((2 * j + 1) * candidates.len()) / (2 * k.max(1))])
        .collect()
}

impl Environment for NoisyCorridor {
    fn spec(&self) -> EnvSpec {
        let cells = self.cfg.width * self.cfg.height;
        EnvSpec {
            n_agents: self.cfg.n_agents,
            n_actions: CORRIDOR_ACTIONS.len(),
            obs_dim: 9 * 3 + 2,
            state_dim: cells * (self.cfg.n_agents + 1),
            episode_limit: self.cfg.episode_limit,
        }
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> (Vec<f64>, Vec<Vec<f64>>) {
        self.positions = self.starts.clone();
        self.t = 0;
        self.done = false;
        self.resample_noise(rng);
        (self.state(), self.observations())
    }

    fn step(&mut self, joint_action: &[usize], rng: &mut dyn RngCore) -> Result<StepResult> {
        if self.done {
            return Err(IcesError::Protocol("step called after episode end".into()));
        }
        check_joint_action(&self.spec(), joint_action)?;
        let next: Vec<Cell> = self
            .positions
            .iter()
            .zip(joint_action)
            .map(|(p, a)| self.move_target(*p, *a))
            .collect();
        self.positions = next;
        self.resample_noise(rng);
        self.t += 1;
        let won = self.positions.iter().all(|p| *p == self.goal);
        let truncated = !won && self.t >= self.cfg.episode_limit;
        self.done = won || truncated;
        let reward_ext = if won { 1.0 } else { 0.0 } + self.cfg.step_penalty;
        Ok(StepResult {
            next_state: self.state(),
            next_obs: self.observations(),
            reward_ext,
            done: self.done,
            won,
            truncated,
        })
    }

    fn render(&self) -> String {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let mut out = String::new();
        for y in 0..h {
            for x in 0..w {
                let c = (x, y);
                let ch = if let Some(i) = self.positions.iter().position(|p| *p == c) {
                    char::from_digit(i as u32 % 10, 10).unwrap_or('A')
                } else if self.blocked[y * w + x] {
                    '#'
                } else if c == self.goal {
                    'G'
                } else if self.noisy_mask[y * w + x] {
                    '~'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}
