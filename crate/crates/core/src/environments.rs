//! The grid world and the 2-D landmark navigation task.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("step called on a terminated episode; call reset first")]
    Terminated,
    #[error("action {0:?} does not fit the action space")]
    BadAction(String),
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvSpec {
    pub observation_dim: usize,
    pub action_space: ActionSpace,
    pub horizon: usize,
    /// Width of the state snapshot used by diversity measures.
    pub state_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_observation: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub state_snapshot: Vec<f64>,
}

/// Common episode interface of both environments.
pub trait Environment {
    fn spec(&self) -> EnvSpec;
    /// Starts a new episode and returns the first observation.
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError>;
    /// Global state of the current timestep, as used by diversity measures.
    fn snapshot(&self) -> Vec<f64>;
    /// Discrete outcome of a finished episode, if the environment has one
    /// (the landmark touched in the navigation task).
    fn outcome(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GridAction {
    Up,
    Down,
    Left,
    Right,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            GridAction::Up => (-1, 0),
            GridAction::Down => (1, 0),
            GridAction::Left => (0, -1),
            GridAction::Right => (0, 1),
        }
    }
}

/// Row/column position, 0-indexed from the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridWorldState {
    pub row: usize,
    pub col: usize,
}

/// Move by one cell; moves off the grid leave the agent in place.
pub fn grid_move(size: usize, state: GridWorldState, action: GridAction) -> GridWorldState {
    let (dr, dc) = action.delta();
    let row = state.row as isize + dr;
    let col = state.col as isize + dc;
    if row < 0 || col < 0 || row >= size as isize || col >= size as isize {
        state
    } else {
        GridWorldState { row: row as usize, col: col as usize }
    }
}

/// Single-agent grid world: start top-left, reward 1 on reaching the
/// bottom-right corner. Horizon is `4 * size`.
#[derive(Debug, Clone)]
pub struct GridWorld {
    size: usize,
    horizon: usize,
    state: GridWorldState,
    steps: usize,
    done: bool,
}

impl GridWorld {
    pub fn new(size: usize) -> Result<Self, EnvError> {
        if size < 2 {
            return Err(EnvError::Config(format!("grid size must be at least 2, got {size}")));
        }
        Ok(GridWorld { size, horizon: 4 * size, state: GridWorldState { row: 0, col: 0 }, steps: 0, done: false })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn state(&self) -> GridWorldState {
        self.state
    }

    pub fn goal(&self) -> GridWorldState {
        GridWorldState { row: self.size - 1, col: self.size - 1 }
    }

    /// Places the agent anywhere; used to probe single transitions.
    pub fn set_state(&mut self, state: GridWorldState) {
        self.state = state;
        self.done = false;
    }

    pub fn observation_of(&self, s: GridWorldState) -> Vec<f64> {
        let mut obs = vec![0.0; self.size * self.size];
        obs[s.row * self.size + s.col] = 1.0;
        obs
    }

    /// Normalized coordinates `(row, col) / (size - 1)`.
    pub fn snapshot_of(&self, s: GridWorldState) -> Vec<f64> {
        let d = (self.size - 1) as f64;
        vec![s.row as f64 / d, s.col as f64 / d]
    }

    pub fn grid_step(&mut self, action: GridAction) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::Terminated);
        }
        self.state = grid_move(self.size, self.state, action);
        self.steps += 1;
        let at_goal = self.state == self.goal();
        self.done = at_goal || self.steps >= self.horizon;
        Ok(StepResult {
            next_observation: self.observation_of(self.state),
            reward: if at_goal { 1.0 } else { 0.0 },
            terminated: self.done,
            state_snapshot: self.snapshot_of(self.state),
        })
    }
}

impl Environment for GridWorld {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            observation_dim: self.size * self.size,
            action_space: ActionSpace::Discrete(4),
            horizon: self.horizon,
            state_dim: 2,
        }
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = GridWorldState { row: 0, col: 0 };
        self.steps = 0;
        self.done = false;
        self.observation_of(self.state)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        match action {
            Action::Discrete(i) => {
                let a = GridAction::from_index(*i).ok_or_else(|| EnvError::BadAction(format!("{action:?}")))?;
                self.grid_step(a)
            }
            Action::Continuous(_) => Err(EnvError::BadAction(format!("{action:?}"))),
        }
    }

    fn snapshot(&self) -> Vec<f64> {
        self.snapshot_of(self.state)
    }
}

/// Geometry of the navigation task. `agent_radius` is `a`, `landmark_radius`
/// is `b`, `separation` is `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavConfig {
    pub agent_radius: f64,
    pub landmark_radius: f64,
    pub separation: f64,
    pub n_landmarks: usize,
    /// Square arena `[-half_width, half_width]²`.
    pub half_width: f64,
    pub dt: f64,
    pub max_steps: usize,
    pub max_speed: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            agent_radius: 0.05,
            landmark_radius: 0.05,
            separation: 0.4,
            n_landmarks: 4,
            half_width: 1.0,
            dt: 0.1,
            max_steps: 1000,
            max_speed: 1.0,
        }
    }
}

impl NavConfig {
    pub fn touch_distance(&self) -> f64 {
        self.agent_radius + self.landmark_radius
    }

    /// Minimum distance between two landmark centers.
    pub fn min_center_distance(&self) -> f64 {
        self.separation + 2.0 * self.touch_distance()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavState {
    pub agent_position: [f64; 2],
    pub landmark_centers: Vec<[f64; 2]>,
    pub step_count: usize,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Rejection-samples a landmark layout with pairwise center distances above
/// `c + 2(a + b)`. Landmarks keep their whole circle inside the arena and do
/// not cover the agent's start at the center.
pub fn nav_reset<R: Rng + ?Sized>(rng: &mut R, config: &NavConfig) -> Result<NavState, EnvError> {
    let lo = -config.half_width + config.landmark_radius;
    let hi = config.half_width - config.landmark_radius;
    if hi <= lo {
        return Err(EnvError::Config("arena narrower than a landmark".into()));
    }
    let start = [0.0, 0.0];
    let min_pair = config.min_center_distance();
    let clearance = config.touch_distance() + config.dt * config.max_speed;
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(config.n_landmarks);
    let mut attempts = 0;
    while centers.len() < config.n_landmarks {
        if attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(EnvError::Config(format!(
                "no valid placement of {} landmarks after {MAX_PLACEMENT_ATTEMPTS} attempts",
                config.n_landmarks
            )));
        }
        attempts += 1;
        let p = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
        if dist(p, start) <= clearance {
            continue;
        }
        if centers.iter().all(|&q| dist(p, q) > min_pair) {
            centers.push(p);
        }
    }
    Ok(NavState { agent_position: start, landmark_centers: centers, step_count: 0 })
}

/// Navigation to one of `N_L` landmarks. The layout is drawn once from the
/// environment seed; every episode starts from the arena center.
#[derive(Debug, Clone)]
pub struct NavEnv {
    config: NavConfig,
    layout: Vec<[f64; 2]>,
    state: NavState,
    done: bool,
    touched: Option<usize>,
}

impl NavEnv {
    pub fn new<R: Rng + ?Sized>(config: NavConfig, rng: &mut R) -> Result<Self, EnvError> {
        let state = nav_reset(rng, &config)?;
        Ok(NavEnv { config, layout: state.landmark_centers.clone(), state, done: false, touched: None })
    }

    pub fn with_layout(config: NavConfig, layout: Vec<[f64; 2]>) -> Self {
        let state = NavState { agent_position: [0.0, 0.0], landmark_centers: layout.clone(), step_count: 0 };
        NavEnv { config, layout, state, done: false, touched: None }
    }

    pub fn config(&self) -> &NavConfig {
        &self.config
    }

    pub fn state(&self) -> &NavState {
        &self.state
    }

    pub fn landmarks(&self) -> &[[f64; 2]] {
        &self.layout
    }

    pub fn set_agent_position(&mut self, p: [f64; 2]) {
        self.state.agent_position = p;
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(2 + 2 * self.layout.len());
        obs.extend_from_slice(&self.state.agent_position);
        for c in &self.layout {
            obs.extend_from_slice(c);
        }
        obs
    }

    /// Velocity components are clamped to `±max_speed`; the agent stays
    /// inside the arena.
    pub fn nav_step(&mut self, velocity: &[f64]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::Terminated);
        }
        if velocity.len() != 2 || velocity.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::BadAction(format!("{velocity:?}")));
        }
        let hw = self.config.half_width;
        for k in 0..2 {
            let v = velocity[k].clamp(-self.config.max_speed, self.config.max_speed);
            self.state.agent_position[k] = (self.state.agent_position[k] + self.config.dt * v).clamp(-hw, hw);
        }
        self.state.step_count += 1;
        let reach = self.config.touch_distance();
        self.touched = self.layout.iter().position(|&c| dist(c, self.state.agent_position) < reach);
        let reward = if self.touched.is_some() { 1.0 } else { 0.0 };
        self.done = self.touched.is_some() || self.state.step_count >= self.config.max_steps;
        Ok(StepResult {
            next_observation: self.observation(),
            reward,
            terminated: self.done,
            state_snapshot: self.state.agent_position.to_vec(),
        })
    }
}

impl Environment for NavEnv {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            observation_dim: 2 + 2 * self.layout.len(),
            action_space: ActionSpace::Continuous(2),
            horizon: self.config.max_steps,
            state_dim: 2,
        }
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = NavState { agent_position: [0.0, 0.0], landmark_centers: self.layout.clone(), step_count: 0 };
        self.done = false;
        self.touched = None;
        self.observation()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        match action {
            Action::Continuous(v) => self.nav_step(v),
            Action::Discrete(_) => Err(EnvError::BadAction(format!("{action:?}"))),
        }
    }

    fn snapshot(&self) -> Vec<f64> {
        self.state.agent_position.to_vec()
    }

    fn outcome(&self) -> Option<usize> {
        self.touched
    }
}
