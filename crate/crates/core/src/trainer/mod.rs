//! PPO with per-stream value heads, Lagrangian multipliers for the diversity
//! constraints, and the iterative and population-based outer loops.

mod loops;
mod policy;

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::ApproxError;
use crate::environments::{EnvError, Environment, GridWorld, NavConfig, NavEnv};
use crate::intrinsic::IntrinsicError;
use crate::measures::MeasureError;

pub use loops::{
    calibrate, count_distinct_landmarks, evaluate, itr_run, pbt_run, CalibrationReport, CalibrationRow, EvalResult,
    MetricsRow, RunOutcome, RunStats,
};
pub use policy::{
    collect_batch, observation_matrix, ppo_update, run_episode, surrogate_slope, Critic, Episode, Policy,
    PolicyOptimizer, TrainBatch, UpdateStats,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("non-finite {what} in iteration {iteration}")]
    NonFinite { what: String, iteration: usize },
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Network(#[from] ApproxError),
    #[error(transparent)]
    Intrinsic(#[from] IntrinsicError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Gridworld,
    Nav,
}

impl FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gridworld" => Ok(EnvKind::Gridworld),
            "nav" => Ok(EnvKind::Nav),
            other => Err(format!("unknown environment {other:?}")),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Gridworld => "gridworld",
            EnvKind::Nav => "nav",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSettings {
    pub kind: EnvKind,
    pub grid_size: usize,
    pub nav: NavConfig,
}

impl EnvSettings {
    pub fn gridworld(size: usize) -> Self {
        EnvSettings { kind: EnvKind::Gridworld, grid_size: size, nav: NavConfig::default() }
    }

    pub fn nav(config: NavConfig) -> Self {
        EnvSettings { kind: EnvKind::Nav, grid_size: 5, nav: config }
    }

    /// The navigation layout depends only on `seed`.
    pub fn build(&self, seed: u64) -> Result<Box<dyn Environment>, EnvError> {
        match self.kind {
            EnvKind::Gridworld => Ok(Box::new(GridWorld::new(self.grid_size)?)),
            EnvKind::Nav => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(Box::new(NavEnv::new(self.nav, &mut rng)?))
            }
        }
    }
}

/// PPO and multiplier hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub lagrange_lr: f64,
    pub lambda_max: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub batch_size: usize,
    pub max_grad_norm: f64,
    pub hidden: usize,
    pub init_log_std: f64,
    pub population: usize,
    pub steps_per_iteration: usize,
    pub delta: f64,
    /// Hold every multiplier at this value instead of updating it.
    pub freeze_lambda: Option<f64>,
}

impl TrainerConfig {
    pub fn nav() -> Self {
        TrainerConfig {
            discount: 0.997,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.0,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            lagrange_lr: 0.5,
            lambda_max: 10.0,
            epochs: 10,
            minibatches: 4,
            batch_size: 4000,
            max_grad_norm: 10.0,
            hidden: 64,
            init_log_std: -0.5,
            population: 4,
            steps_per_iteration: 400_000,
            delta: 0.5,
            freeze_lambda: None,
        }
    }

    pub fn gridworld() -> Self {
        TrainerConfig {
            discount: 0.99,
            entropy_coef: 0.01,
            steps_per_iteration: 100_000,
            delta: -0.3,
            ..TrainerConfig::nav()
        }
    }

    pub fn for_env(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Gridworld => TrainerConfig::gridworld(),
            EnvKind::Nav => TrainerConfig::nav(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("lagrange_lr", self.lagrange_lr),
            ("lambda_max", self.lambda_max),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(TrainError::Config(format!("discount must lie in (0, 1], got {}", self.discount)));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(TrainError::Config(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(TrainError::Config(format!("clip must lie in (0, 1), got {}", self.clip)));
        }
        if !(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0) {
            return Err(TrainError::Config(format!("entropy_coef must be non-negative, got {}", self.entropy_coef)));
        }
        if !self.delta.is_finite() || !self.init_log_std.is_finite() {
            return Err(TrainError::Config("delta and init_log_std must be finite".into()));
        }
        let counts = [
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("population", self.population),
            ("steps_per_iteration", self.steps_per_iteration),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.minibatches > self.batch_size {
            return Err(TrainError::Config("more minibatches than samples per batch".into()));
        }
        if let Some(l) = self.freeze_lambda {
            if !(0.0..=self.lambda_max).contains(&l) {
                return Err(TrainError::Config(format!("freeze_lambda {l} outside [0, lambda_max]")));
            }
        }
        Ok(())
    }
}

/// Multipliers `λ ∈ [0, λ_max]^k` updated by projected ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeState {
    pub lambda: Vec<f64>,
    pub lambda_max: f64,
    pub lr: f64,
}

impl LagrangeState {
    pub fn new(constraints: usize, lambda_max: f64, lr: f64) -> Self {
        LagrangeState { lambda: vec![0.0; constraints], lambda_max, lr }
    }

    pub fn in_bounds(&self) -> bool {
        self.lambda.iter().all(|l| (0.0..=self.lambda_max).contains(l))
    }
}

/// `λ_j ← clip(λ_j + η (δ - R_int^j), 0, λ_max)` for every constraint.
pub fn lagrange_update(
    state: &LagrangeState,
    intrinsic_returns: &[f64],
    delta: f64,
) -> Result<LagrangeState, TrainError> {
    if intrinsic_returns.len() != state.lambda.len() {
        return Err(TrainError::Length(format!(
            "{} multipliers, {} intrinsic returns",
            state.lambda.len(),
            intrinsic_returns.len()
        )));
    }
    let lambda = state
        .lambda
        .iter()
        .zip(intrinsic_returns)
        .map(|(l, r)| (l + state.lr * (delta - r)).clamp(0.0, state.lambda_max))
        .collect();
    Ok(LagrangeState { lambda, ..state.clone() })
}

/// GAE over one episode that ends in a terminal state (bootstrap value 0).
/// Returns `(advantages, return targets)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    discount: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    if rewards.len() != values.len() {
        return Err(TrainError::Length(format!("{} rewards, {} values", rewards.len(), values.len())));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let td = rewards[t] + discount * next - values[t];
        acc = td + discount * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// [`compute_gae`] applied to every head independently.
pub fn compute_gae_heads(
    rewards: &[Vec<f64>],
    values: &[Vec<f64>],
    discount: f64,
    lambda: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), TrainError> {
    if rewards.len() != values.len() {
        return Err(TrainError::Length(format!("{} reward streams, {} value heads", rewards.len(), values.len())));
    }
    let mut advs = Vec::with_capacity(rewards.len());
    let mut rets = Vec::with_capacity(rewards.len());
    for (r, v) in rewards.iter().zip(values) {
        let (a, t) = compute_gae(r, v, discount, lambda)?;
        advs.push(a);
        rets.push(t);
    }
    Ok((advs, rets))
}

/// `A_env + α Σ_j λ_j A_j`.
pub fn combine_advantages(env: &[f64], intrinsic: &[Vec<f64>], lambda: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = env.to_vec();
    for (t, o) in out.iter_mut().enumerate() {
        let bonus: f64 = intrinsic.iter().zip(lambda).map(|(a, l)| l * a[t]).sum();
        *o += alpha * bonus;
    }
    out
}

/// Shift to mean 0 and scale to std 1 (population std, plus 1e-8).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env,
    Actor,
    Critic,
    WdCritic,
    Sampling,
    Evaluation,
    Subsample,
}

/// Independent sub-seed for one random stream of one iteration.
pub fn derive_seed(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut x = master;
    for v in [stream as u64 + 1, a, b] {
        x = splitmix(x ^ splitmix(v));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(master: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, a, b))
}
