//! Intrinsic rewards measuring how far the current policy's states are from
//! earlier policies' archived states: the RBF-kernel reward, the
//! Wasserstein-critic reward, and the final-state distance used by the
//! navigation task.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{ApproxError, DenseNet};
use crate::measures::{squared_distance, MeasureError, StateCloud};

pub const STACK_DEPTH: usize = 4;
pub const CRITIC_CLIP: f64 = 0.01;
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum IntrinsicError {
    #[error("archive entry {0} is empty")]
    EmptyEntry(usize),
    #[error("state dimension {got} does not match archive dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite critic gradient")]
    NonFiniteGradient,
    #[error("invalid intrinsic configuration: {0}")]
    Config(String),
    #[error("archive file: {0}")]
    Format(String),
    #[error(transparent)]
    Network(#[from] ApproxError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The last [`STACK_DEPTH`] global states, oldest first. A fresh stack holds
/// copies of the first state.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    frames: VecDeque<Vec<f64>>,
}

impl FrameStack {
    pub fn new(first: &[f64]) -> Self {
        FrameStack { frames: (0..STACK_DEPTH).map(|_| first.to_vec()).collect() }
    }

    pub fn push(&mut self, state: &[f64]) {
        self.frames.pop_front();
        self.frames.push_back(state.to_vec());
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }

    /// The most recent raw state.
    pub fn latest(&self) -> &[f64] {
        self.frames.back().expect("stack is never empty")
    }
}

/// Which intrinsic reward drives the diversity constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntrinsicKind {
    Rbf,
    Wd,
    /// Squared distance between final positions, paid at the last step.
    FinalState,
}

impl std::str::FromStr for IntrinsicKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rbf" => Ok(IntrinsicKind::Rbf),
            "wd" => Ok(IntrinsicKind::Wd),
            "final-state" => Ok(IntrinsicKind::FinalState),
            other => Err(format!("unknown intrinsic kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicConfig {
    pub kind: IntrinsicKind,
    pub sigma2: f64,
    pub alpha: f64,
    /// Divide each constraint's reward by the running std of its discounted
    /// return.
    pub normalize: bool,
    pub norm_discount: f64,
    pub critic_lr: f64,
    pub critic_hidden: usize,
    pub archive_episodes: usize,
    pub archive_max_points: usize,
}

impl Default for IntrinsicConfig {
    fn default() -> Self {
        IntrinsicConfig {
            kind: IntrinsicKind::Rbf,
            sigma2: 0.02,
            alpha: 1.0,
            normalize: true,
            norm_discount: 0.99,
            critic_lr: 4e-4,
            critic_hidden: 64,
            archive_episodes: 64,
            archive_max_points: 4096,
        }
    }
}

impl IntrinsicConfig {
    pub fn validate(&self) -> Result<(), IntrinsicError> {
        let positive = [("sigma2", self.sigma2), ("critic_lr", self.critic_lr)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(IntrinsicError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(IntrinsicError::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.norm_discount) {
            return Err(IntrinsicError::Config(format!(
                "norm_discount must lie in [0, 1), got {}",
                self.norm_discount
            )));
        }
        if self.archive_episodes == 0 || self.archive_max_points == 0 || self.critic_hidden == 0 {
            return Err(IntrinsicError::Config("archive sizes and critic width must be positive".into()));
        }
        Ok(())
    }
}

fn check_dim(state: &[f64], cloud: &StateCloud) -> Result<(), IntrinsicError> {
    if state.len() != cloud.dim() {
        return Err(IntrinsicError::Dimension { expected: cloud.dim(), got: state.len() });
    }
    Ok(())
}

/// `-(1/(H |χ|)) Σ_{s' ∈ χ} exp(-‖s - s'‖² / (2σ²))`, in `[-1/H, 0]`.
pub fn rbf_reward(state: &[f64], archive: &StateCloud, sigma2: f64, horizon: usize) -> Result<f64, IntrinsicError> {
    check_dim(state, archive)?;
    let k: f64 = archive.points().iter().map(|p| (-squared_distance(state, p) / (2.0 * sigma2)).exp()).sum();
    Ok(-k / (horizon as f64 * archive.len() as f64))
}

/// `(1/H) (f(s) - mean_{s' ∈ χ} f(s'))`.
pub fn wd_reward(
    state: &[f64],
    archive: &StateCloud,
    critic: &DenseNet,
    horizon: usize,
) -> Result<f64, IntrinsicError> {
    check_dim(state, archive)?;
    let mean = critic_mean(critic, archive)?;
    Ok(wd_reward_with_mean(state, mean, critic, horizon)?)
}

/// [`wd_reward`] with the archive mean of `f` precomputed.
pub fn wd_reward_with_mean(
    state: &[f64],
    archive_mean: f64,
    critic: &DenseNet,
    horizon: usize,
) -> Result<f64, ApproxError> {
    Ok((critic.forward(state)?[0] - archive_mean) / horizon as f64)
}

fn cloud_matrix(cloud: &StateCloud) -> Array2<f64> {
    let flat: Vec<f64> = cloud.points().iter().flatten().copied().collect();
    Array2::from_shape_vec((cloud.len(), cloud.dim()), flat).expect("cloud rows share a dimension")
}

pub fn critic_mean(critic: &DenseNet, cloud: &StateCloud) -> Result<f64, ApproxError> {
    let (out, _) = critic.forward_batch(cloud_matrix(cloud).view())?;
    Ok(out.mean().unwrap_or(0.0))
}

/// Small tanh critic with every parameter drawn inside the clip box.
pub fn new_critic<R: rand::Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Result<DenseNet, ApproxError> {
    let mut net = DenseNet::mlp(input, &[hidden, hidden], 1, 1.0, 1.0, rng)?;
    net.clip_params(-CRITIC_CLIP, CRITIC_CLIP);
    Ok(net)
}

/// One ascent step on `mean f(current) - mean f(χ)`, then clip every
/// parameter to `[-0.01, 0.01]`.
pub fn critic_update(
    critic: &DenseNet,
    current: &StateCloud,
    archive: &StateCloud,
    lr: f64,
) -> Result<DenseNet, IntrinsicError> {
    if current.dim() != critic.input_dim() {
        return Err(IntrinsicError::Dimension { expected: critic.input_dim(), got: current.dim() });
    }
    if archive.dim() != critic.input_dim() {
        return Err(IntrinsicError::Dimension { expected: critic.input_dim(), got: archive.dim() });
    }
    let (_, cache_a) = critic.forward_batch(cloud_matrix(current).view())?;
    let (_, cache_b) = critic.forward_batch(cloud_matrix(archive).view())?;
    let up_a = Array2::from_elem((current.len(), 1), 1.0 / current.len() as f64);
    let up_b = Array2::from_elem((archive.len(), 1), -1.0 / archive.len() as f64);
    let mut grads = critic.backward_batch(&cache_a, up_a.view())?;
    grads.add_assign(&critic.backward_batch(&cache_b, up_b.view())?);
    if !grads.is_finite() {
        return Err(IntrinsicError::NonFiniteGradient);
    }
    let mut next = critic.clone();
    next.add_scaled(&grads, lr);
    next.clip_params(-CRITIC_CLIP, CRITIC_CLIP);
    Ok(next)
}

/// Mean squared distance from `final_state` to the archived final states,
/// paid once at the end of an episode.
pub fn final_state_reward(final_state: &[f64], archived_finals: &[Vec<f64>]) -> Result<f64, IntrinsicError> {
    if archived_finals.is_empty() {
        return Err(IntrinsicError::EmptyEntry(0));
    }
    if let Some(p) = archived_finals.iter().find(|p| p.len() != final_state.len()) {
        return Err(IntrinsicError::Dimension { expected: p.len(), got: final_state.len() });
    }
    Ok(archived_finals.iter().map(|p| squared_distance(final_state, p)).sum::<f64>() / archived_finals.len() as f64)
}

/// `r_env + α Σ_j λ_j r_j`.
pub fn combine_rewards(r_env: f64, intrinsics: &[(f64, f64)], alpha: f64) -> f64 {
    r_env + alpha * intrinsics.iter().map(|(l, r)| l * r).sum::<f64>()
}

/// Welford mean/variance over a growing sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStat {
    count: f64,
    mean: f64,
    m2: f64,
}

impl RunningStat {
    pub fn push(&mut self, x: f64) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2.0 {
            0.0
        } else {
            self.m2 / self.count
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// Per-constraint scaling of intrinsic rewards by the running standard
/// deviation of their discounted return.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicNormalizer {
    discount: f64,
    stats: Vec<RunningStat>,
    frozen: bool,
}

impl IntrinsicNormalizer {
    pub fn new(constraints: usize, discount: f64) -> Self {
        IntrinsicNormalizer { discount, stats: vec![RunningStat::default(); constraints], frozen: false }
    }

    /// Frozen statistics are used but not updated.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn std(&self, j: usize) -> f64 {
        self.stats[j].std()
    }

    /// `episodes[e][j][h]`: reward for constraint `j` at step `h` of episode
    /// `e`. Statistics absorb the whole batch first, then every reward is
    /// divided by `max(std, 1e-8)`.
    pub fn normalize(&mut self, episodes: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
        if !self.frozen {
            for ep in episodes {
                for (j, stream) in ep.iter().enumerate() {
                    let mut ret = 0.0;
                    for &r in stream {
                        ret = self.discount * ret + r;
                        self.stats[j].push(ret);
                    }
                }
            }
        }
        episodes
            .iter()
            .map(|ep| {
                ep.iter()
                    .enumerate()
                    .map(|(j, stream)| {
                        let s = self.stats[j].std().max(NORM_FLOOR);
                        stream.iter().map(|r| r / s).collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// One archived stacked state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub policy_index: usize,
    pub episode: usize,
    pub timestep: usize,
    pub stacked_state: Vec<f64>,
}

/// States visited by one earlier policy.
#[derive(Debug, Clone)]
pub struct ArchiveEntry {
    records: Vec<ArchiveRecord>,
    cloud: StateCloud,
    finals: Vec<Vec<f64>>,
    pub critic: Option<DenseNet>,
}

impl ArchiveEntry {
    pub fn records(&self) -> &[ArchiveRecord] {
        &self.records
    }

    /// Uniform subsample of the records used for reward computation.
    pub fn cloud(&self) -> &StateCloud {
        &self.cloud
    }

    /// Last raw state of every archived episode.
    pub fn final_states(&self) -> &[Vec<f64>] {
        &self.finals
    }
}

/// Entries in discovery order; every stored state has dimension
/// `STACK_DEPTH · raw_dim`.
#[derive(Debug, Clone)]
pub struct Archive {
    raw_dim: usize,
    max_points: usize,
    entries: Vec<ArchiveEntry>,
}

const ARCHIVE_FILE: &str = "archive.jsonl";

impl Archive {
    pub fn new(raw_dim: usize, max_points: usize) -> Self {
        Archive { raw_dim, max_points, entries: Vec::new() }
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn stacked_dim(&self) -> usize {
        STACK_DEPTH * self.raw_dim
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ArchiveEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends the next policy's states; `policy_index` must equal the
    /// current number of entries.
    pub fn push(&mut self, records: Vec<ArchiveRecord>, critic: Option<DenseNet>) -> Result<(), IntrinsicError> {
        let index = self.entries.len();
        if records.is_empty() {
            return Err(IntrinsicError::EmptyEntry(index));
        }
        for r in &records {
            if r.policy_index != index {
                return Err(IntrinsicError::Format(format!(
                    "record for policy {} pushed as entry {index}",
                    r.policy_index
                )));
            }
            if r.stacked_state.len() != self.stacked_dim() {
                return Err(IntrinsicError::Dimension { expected: self.stacked_dim(), got: r.stacked_state.len() });
            }
        }
        let all = StateCloud::new(records.iter().map(|r| r.stacked_state.clone()).collect())?;
        let mut rng = ChaCha8Rng::seed_from_u64(index as u64);
        let cloud = all.subsample(self.max_points, &mut rng);
        let mut finals: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for r in &records {
            let latest = r.stacked_state[self.stacked_dim() - self.raw_dim..].to_vec();
            match finals.iter_mut().find(|(e, _, _)| *e == r.episode) {
                Some(slot) if slot.1 < r.timestep => *slot = (r.episode, r.timestep, latest),
                Some(_) => {}
                None => finals.push((r.episode, r.timestep, latest)),
            }
        }
        let finals = finals.into_iter().map(|(_, _, s)| s).collect();
        self.entries.push(ArchiveEntry { records, cloud, finals, critic });
        Ok(())
    }

    /// Writes `archive.jsonl` and one `critic_<j>.bin` per entry with a critic.
    pub fn save(&self, dir: &Path) -> Result<(), IntrinsicError> {
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!("{ARCHIVE_FILE}.tmp"));
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            for entry in &self.entries {
                for r in &entry.records {
                    serde_json::to_writer(&mut w, r).map_err(|e| IntrinsicError::Format(e.to_string()))?;
                    w.write_all(b"\n")?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, dir.join(ARCHIVE_FILE))?;
        for (j, entry) in self.entries.iter().enumerate() {
            if let Some(critic) = &entry.critic {
                let path = dir.join(format!("critic_{j}.bin"));
                let tmp = path.with_extension("bin.tmp");
                fs::write(&tmp, critic.to_bytes())?;
                fs::rename(&tmp, &path)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path, raw_dim: usize, max_points: usize) -> Result<Self, IntrinsicError> {
        let reader = BufReader::new(fs::File::open(dir.join(ARCHIVE_FILE))?);
        let mut grouped: Vec<Vec<ArchiveRecord>> = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ArchiveRecord =
                serde_json::from_str(&line).map_err(|e| IntrinsicError::Format(format!("line {}: {e}", n + 1)))?;
            if r.policy_index > grouped.len() {
                return Err(IntrinsicError::Format(format!("line {}: policy {} out of order", n + 1, r.policy_index)));
            }
            if r.policy_index == grouped.len() {
                grouped.push(Vec::new());
            }
            grouped[r.policy_index].push(r);
        }
        let mut archive = Archive::new(raw_dim, max_points);
        for (j, records) in grouped.into_iter().enumerate() {
            let path = dir.join(format!("critic_{j}.bin"));
            let critic = if path.exists() { Some(DenseNet::read_checkpoint(fs::File::open(path)?)?) } else { None };
            archive.push(records, critic)?;
        }
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rbf_identical_singleton_is_minus_one_over_h() {
        let cloud = StateCloud::new(vec![vec![0.2, 0.4]]).unwrap();
        for sigma2 in [0.02, 1.0, 7.5] {
            assert_eq!(rbf_reward(&[0.2, 0.4], &cloud, sigma2, 10).unwrap(), -0.1);
        }
    }

    #[test]
    fn rbf_far_state_vanishes() {
        let cloud = StateCloud::new(vec![vec![0.0, 0.0]]).unwrap();
        let r = rbf_reward(&[100.0, 0.0], &cloud, 0.02, 10).unwrap();
        assert!(r <= 0.0 && r > -1e-300);
    }

    #[test]
    fn rbf_direct_formula() {
        let cloud = StateCloud::new(vec![vec![1.0, 0.0]]).unwrap();
        let r = rbf_reward(&[0.0, 0.0], &cloud, 0.02, 10).unwrap();
        let expected = -0.1 * (-1.0f64 / 0.04).exp();
        assert!((r - expected).abs() < 1e-25);
        assert!((r + 1.39e-12).abs() < 0.01e-12);
    }

    #[test]
    fn rbf_dimension_checked() {
        let cloud = StateCloud::new(vec![vec![1.0, 0.0]]).unwrap();
        assert!(matches!(rbf_reward(&[0.0], &cloud, 0.02, 10), Err(IntrinsicError::Dimension { .. })));
    }

    #[test]
    fn wd_constant_critic_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut critic = new_critic(2, 8, &mut rng).unwrap();
        let last = critic.layers().len() - 1;
        critic.layers_mut()[last].weight.fill(0.0);
        let cloud = StateCloud::new(vec![vec![0.3, 0.1], vec![0.9, -0.4]]).unwrap();
        assert_eq!(wd_reward(&[5.0, 5.0], &cloud, &critic, 10).unwrap(), 0.0);
    }

    #[test]
    fn wd_singleton_self_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let critic = new_critic(2, 8, &mut rng).unwrap();
        let cloud = StateCloud::new(vec![vec![0.3, 0.1]]).unwrap();
        assert_eq!(wd_reward(&[0.3, 0.1], &cloud, &critic, 10).unwrap(), 0.0);
    }

    #[test]
    fn wd_matches_forward_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let critic = new_critic(3, 5, &mut rng).unwrap();
        let pts = vec![vec![0.1, 0.2, 0.3], vec![-0.5, 0.0, 0.4], vec![1.0, 1.0, -1.0]];
        let cloud = StateCloud::new(pts.clone()).unwrap();
        let s = [0.7, -0.2, 0.05];
        let f = |x: &[f64]| critic.forward(x).unwrap()[0];
        let expected = (f(&s) - pts.iter().map(|p| f(p)).sum::<f64>() / 3.0) / 20.0;
        assert!((wd_reward(&s, &cloud, &critic, 20).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn critic_zero_step_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let critic = new_critic(2, 4, &mut rng).unwrap();
        let a = StateCloud::new(vec![vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let b = StateCloud::new(vec![vec![0.5, 0.0]]).unwrap();
        let next = critic_update(&critic, &a, &b, 0.0).unwrap();
        assert_eq!(next.params(), critic.params());
    }

    #[test]
    fn critic_linear_step_is_mean_difference() {
        use crate::approximator::{Activation, Layer};
        use ndarray::{arr1, arr2};
        let layer = Layer { weight: arr2(&[[0.001, -0.002]]), bias: arr1(&[0.0]), activation: Activation::Identity };
        let critic = DenseNet::from_layers(vec![layer]).unwrap();
        let a = StateCloud::new(vec![vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        let b = StateCloud::new(vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 4.0]]).unwrap();
        let eta = 1e-3;
        let next = critic_update(&critic, &a, &b, eta).unwrap();
        let mu1 = [2.0, 1.0];
        let mu2 = [1.0, 2.0];
        for k in 0..2 {
            let dw = next.layers()[0].weight[[0, k]] - critic.layers()[0].weight[[0, k]];
            assert!((dw - eta * (mu1[k] - mu2[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn critic_stays_in_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut critic = new_critic(2, 16, &mut rng).unwrap();
        let a = StateCloud::new((0..20).map(|_| vec![rng.random::<f64>() * 10.0, 3.0]).collect()).unwrap();
        let b = StateCloud::new((0..20).map(|_| vec![-rng.random::<f64>() * 10.0, -3.0]).collect()).unwrap();
        for _ in 0..50 {
            critic = critic_update(&critic, &a, &b, 0.5).unwrap();
            assert!(critic.max_abs_param() <= CRITIC_CLIP);
        }
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_rewards(0.3, &[(1.0, 5.0)], 0.0), 0.3);
        assert_eq!(combine_rewards(0.3, &[(0.0, 5.0), (0.0, -2.0)], 2.0), 0.3);
        assert!((combine_rewards(1.0, &[(2.0, -0.1), (1.0, 0.2)], 0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frame_stack_repeats_first_state() {
        let mut fs = FrameStack::new(&[1.0, 2.0]);
        assert_eq!(fs.stacked(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        fs.push(&[3.0, 4.0]);
        assert_eq!(fs.stacked(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fs.latest(), &[3.0, 4.0]);
    }

    #[test]
    fn normalizer_zero_stream() {
        let mut n = IntrinsicNormalizer::new(1, 0.99);
        let out = n.normalize(&[vec![vec![0.0; 50]]]);
        assert!(out[0][0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalizer_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stream: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() - 0.3).collect();
        let scaled: Vec<f64> = stream.iter().map(|v| v * 37.0).collect();
        let mut a = IntrinsicNormalizer::new(1, 0.99);
        let mut b = IntrinsicNormalizer::new(1, 0.99);
        let oa = a.normalize(&[vec![stream]]);
        let ob = b.normalize(&[vec![scaled]]);
        for (x, y) in oa[0][0].iter().zip(&ob[0][0]) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_normalizer_keeps_statistics() {
        let mut n = IntrinsicNormalizer::new(1, 0.9);
        n.normalize(&[vec![vec![1.0, -1.0, 2.0]]]);
        let before = n.std(0);
        n.set_frozen(true);
        n.normalize(&[vec![vec![100.0; 10]]]);
        assert_eq!(n.std(0), before);
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut archive = Archive::new(2, 3);
        for j in 0..2 {
            let records = (0..5)
                .map(|t| ArchiveRecord {
                    policy_index: j,
                    episode: t / 3,
                    timestep: t % 3 + 1,
                    stacked_state: (0..8).map(|_| rng.random::<f64>()).collect(),
                })
                .collect();
            let critic = if j == 1 { Some(new_critic(8, 4, &mut rng).unwrap()) } else { None };
            archive.push(records, critic).unwrap();
        }
        assert_eq!(archive.entries()[0].cloud().len(), 3);
        assert_eq!(archive.entries()[0].final_states().len(), 2);
        archive.save(dir.path()).unwrap();
        let loaded = Archive::load(dir.path(), 2, 3).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in archive.entries().iter().zip(loaded.entries()) {
            assert_eq!(a.records(), b.records());
            assert_eq!(a.cloud(), b.cloud());
            assert_eq!(a.final_states(), b.final_states());
            assert_eq!(a.critic.as_ref().map(DenseNet::params), b.critic.as_ref().map(DenseNet::params));
        }
    }

    #[test]
    fn archive_rejects_wrong_dimension() {
        let mut archive = Archive::new(2, 10);
        let bad = vec![ArchiveRecord { policy_index: 0, episode: 0, timestep: 1, stacked_state: vec![0.0; 3] }];
        assert!(matches!(archive.push(bad, None), Err(IntrinsicError::Dimension { expected: 8, got: 3 })));
    }

    #[test]
    fn final_state_reward_is_mean_squared_distance() {
        let finals = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert_eq!(final_state_reward(&[1.0, 0.0], &finals).unwrap(), 1.0);
    }
}
