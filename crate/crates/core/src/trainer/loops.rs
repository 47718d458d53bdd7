use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{observation_matrix, run_episode};
use super::{
    collect_batch, combine_advantages, compute_gae_heads, lagrange_update, normalize_advantages, ppo_update,
    stream_rng, Critic, EnvSettings, Episode, LagrangeState, Policy, PolicyOptimizer, Stream, TrainBatch, TrainError,
    TrainerConfig, UpdateStats,
};
use crate::approximator::DenseNet;
use crate::environments::Environment;
use crate::intrinsic::{
    critic_mean, critic_update, final_state_reward, new_critic, rbf_reward, Archive, ArchiveRecord, IntrinsicConfig,
    IntrinsicKind, IntrinsicNormalizer, CRITIC_CLIP, STACK_DEPTH,
};
use crate::measures::StateCloud;

/// One row per rollout batch. `r_int[j]` and `lambda[j]` are `None` for
/// constraints that do not exist in this iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub step: usize,
    pub j_hat: f64,
    pub r_int: Vec<Option<f64>>,
    pub lambda: Vec<Option<f64>>,
    /// Seconds since the run started; kept out of the reproducible metrics.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub batches: usize,
    pub lambda_steps: usize,
    pub minibatch_steps: usize,
    /// Policy-gradient steps per multiplier step, as configured.
    pub steps_per_lambda_step: usize,
    pub lambda_min_seen: f64,
    pub lambda_max_seen: f64,
    pub critic_updates: usize,
    pub critic_max_abs_param: f64,
}

impl RunStats {
    fn new(cfg: &TrainerConfig) -> Self {
        RunStats {
            steps_per_lambda_step: cfg.epochs * cfg.minibatches,
            lambda_min_seen: f64::INFINITY,
            lambda_max_seen: f64::NEG_INFINITY,
            ..RunStats::default()
        }
    }

    fn record_lambda(&mut self, state: &LagrangeState) {
        assert!(state.in_bounds(), "multiplier left [0, {}]: {:?}", state.lambda_max, state.lambda);
        for &l in &state.lambda {
            self.lambda_min_seen = self.lambda_min_seen.min(l);
            self.lambda_max_seen = self.lambda_max_seen.max(l);
        }
    }

    fn record_critic(&mut self, critic: &DenseNet) {
        let m = critic.max_abs_param();
        assert!(m <= CRITIC_CLIP, "critic parameter {m} outside the clip box");
        self.critic_updates += 1;
        self.critic_max_abs_param = self.critic_max_abs_param.max(m);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub episodes: Vec<Episode>,
}

impl EvalResult {
    pub fn mean_return(&self) -> f64 {
        self.episodes.iter().map(Episode::total_reward).sum::<f64>() / self.episodes.len().max(1) as f64
    }

    /// Most frequent outcome when at least half of the episodes have one.
    pub fn dominant_outcome(&self) -> Option<usize> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for o in self.episodes.iter().filter_map(|e| e.outcome) {
            *counts.entry(o).or_default() += 1;
        }
        let hits: usize = counts.values().sum();
        if 2 * hits < self.episodes.len() || hits == 0 {
            return None;
        }
        counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(o, _)| o)
    }
}

pub fn evaluate<R: Rng + ?Sized>(
    policy: &Policy,
    env: &mut dyn Environment,
    episodes: usize,
    greedy: bool,
    rng: &mut R,
) -> Result<EvalResult, TrainError> {
    let episodes = (0..episodes).map(|_| run_episode(policy, env, greedy, rng)).collect::<Result<_, _>>()?;
    Ok(EvalResult { episodes })
}

/// Number of different landmarks that some policy reliably reaches.
pub fn count_distinct_landmarks(evals: &[EvalResult]) -> usize {
    let mut seen: Vec<usize> = evals.iter().filter_map(EvalResult::dominant_outcome).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub policies: Vec<Policy>,
    pub archive: Archive,
    pub rows: Vec<MetricsRow>,
    pub stats: RunStats,
    /// Stochastic evaluation of every final policy.
    pub evals: Vec<EvalResult>,
}

/// What an intrinsic reward stream is measured against.
enum Target<'a> {
    Cloud(&'a StateCloud),
    Critic { net: &'a DenseNet, mean: f64 },
    Finals(&'a [Vec<f64>]),
}

fn stacked_matrix(episodes: &[Episode]) -> Array2<f64> {
    let dim = episodes[0].stacked[0].len();
    let flat: Vec<f64> = episodes.iter().flat_map(|e| e.stacked.iter().flatten()).copied().collect();
    Array2::from_shape_vec((flat.len() / dim, dim), flat).expect("stacked states share a dimension")
}

/// Raw intrinsic rewards `[episode][constraint][step]`.
fn intrinsic_rewards(
    episodes: &[Episode],
    targets: &[Target<'_>],
    sigma2: f64,
    horizon: usize,
) -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
    let mut out: Vec<Vec<Vec<f64>>> = episodes.iter().map(|_| Vec::with_capacity(targets.len())).collect();
    for target in targets {
        match target {
            Target::Cloud(cloud) => {
                for (e, ep) in episodes.iter().enumerate() {
                    let r =
                        ep.stacked.iter().map(|s| rbf_reward(s, cloud, sigma2, horizon)).collect::<Result<_, _>>()?;
                    out[e].push(r);
                }
            }
            Target::Critic { net, mean } => {
                let (f, _) = net.forward_batch(stacked_matrix(episodes).view())?;
                let mut k = 0;
                for (e, ep) in episodes.iter().enumerate() {
                    let r = (0..ep.len()).map(|h| (f[[k + h, 0]] - mean) / horizon as f64).collect();
                    k += ep.len();
                    out[e].push(r);
                }
            }
            Target::Finals(finals) => {
                for (e, ep) in episodes.iter().enumerate() {
                    let mut r = vec![0.0; ep.len()];
                    *r.last_mut().expect("episodes are non-empty") = final_state_reward(ep.final_state(), finals)?;
                    out[e].push(r);
                }
            }
        }
    }
    Ok(out)
}

/// Mean over episodes of each constraint's intrinsic return.
fn mean_intrinsic_returns(raw: &[Vec<Vec<f64>>], constraints: usize) -> Vec<f64> {
    (0..constraints).map(|j| raw.iter().map(|ep| ep[j].iter().sum::<f64>()).sum::<f64>() / raw.len() as f64).collect()
}

fn mean_return(episodes: &[Episode]) -> f64 {
    episodes.iter().map(Episode::total_reward).sum::<f64>() / episodes.len() as f64
}

/// Learner state for one policy: actor, optimizer and one critic per stream.
struct Learner {
    policy: Policy,
    opt: PolicyOptimizer,
    critics: Vec<Critic>,
}

impl Learner {
    fn new(
        env: &dyn Environment,
        cfg: &TrainerConfig,
        heads: usize,
        seed: u64,
        index: u64,
    ) -> Result<Self, TrainError> {
        let spec = env.spec();
        let mut rng = stream_rng(seed, Stream::Actor, index, 0);
        let policy = Policy::new(spec.observation_dim, spec.action_space, cfg.hidden, cfg.init_log_std, &mut rng)?;
        let opt = PolicyOptimizer::new(&policy, cfg.actor_lr);
        let critics = (0..heads)
            .map(|h| {
                Critic::new(
                    spec.observation_dim,
                    cfg.hidden,
                    cfg.critic_lr,
                    &mut stream_rng(seed, Stream::Critic, index, h as u64),
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Learner { policy, opt, critics })
    }

    /// GAE per head, advantage combination with the given multipliers, PPO.
    fn update<R: Rng + ?Sized>(
        &mut self,
        episodes: &[Episode],
        intrinsic: &[Vec<Vec<f64>>],
        lambda: &[f64],
        alpha: f64,
        cfg: &TrainerConfig,
        rng: &mut R,
    ) -> Result<UpdateStats, TrainError> {
        let obs = observation_matrix(episodes);
        let heads = self.critics.len();
        let values: Vec<Vec<f64>> = self.critics.iter().map(|c| c.values(&obs)).collect::<Result<_, _>>()?;
        let mut advs: Vec<Vec<f64>> = vec![Vec::with_capacity(obs.nrows()); heads];
        let mut rets: Vec<Vec<f64>> = vec![Vec::with_capacity(obs.nrows()); heads];
        let mut offset = 0;
        for (e, ep) in episodes.iter().enumerate() {
            let len = ep.len();
            let mut rewards = vec![ep.rewards.clone()];
            rewards.extend(intrinsic[e].iter().cloned());
            let vals: Vec<Vec<f64>> = values.iter().map(|v| v[offset..offset + len].to_vec()).collect();
            let (a, r) = compute_gae_heads(&rewards, &vals, cfg.discount, cfg.gae_lambda)?;
            for h in 0..heads {
                advs[h].extend_from_slice(&a[h]);
                rets[h].extend_from_slice(&r[h]);
            }
            offset += len;
        }
        let mut adv = combine_advantages(&advs[0], &advs[1..], lambda, alpha);
        normalize_advantages(&mut adv);
        let batch = TrainBatch {
            observations: obs,
            actions: episodes.iter().flat_map(|e| e.actions.iter().cloned()).collect(),
            old_log_probs: episodes.iter().flat_map(|e| e.log_probs.iter().copied()).collect(),
            advantages: adv,
            returns: rets,
        };
        ppo_update(&mut self.policy, &mut self.opt, &mut self.critics, &batch, cfg, rng)
    }
}

fn normalized(normalizer: &mut Option<IntrinsicNormalizer>, raw: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    match normalizer {
        Some(n) => n.normalize(raw),
        None => raw.to_vec(),
    }
}

fn archive_records(eval: &EvalResult, index: usize) -> Vec<ArchiveRecord> {
    eval.episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| {
            ep.stacked.iter().enumerate().map(move |(h, s)| ArchiveRecord {
                policy_index: index,
                episode: e,
                timestep: h + 1,
                stacked_state: s.clone(),
            })
        })
        .collect()
}

fn padded(values: &[f64], width: usize, skip: Option<usize>) -> Vec<Option<f64>> {
    let mut out = vec![None; width];
    let mut it = values.iter();
    for (k, slot) in out.iter_mut().enumerate() {
        if Some(k) == skip {
            continue;
        }
        match it.next() {
            Some(v) => *slot = Some(*v),
            None => break,
        }
    }
    out
}

fn wd_fresh_critics(
    env: &dyn Environment,
    intr: &IntrinsicConfig,
    seed: u64,
    i: usize,
    count: usize,
) -> Result<Vec<DenseNet>, TrainError> {
    let dim = STACK_DEPTH * env.spec().state_dim;
    (0..count)
        .map(|j| Ok(new_critic(dim, intr.critic_hidden, &mut stream_rng(seed, Stream::WdCritic, i as u64, j as u64))?))
        .collect()
}

fn batch_cloud<R: Rng + ?Sized>(
    episodes: &[Episode],
    max_points: usize,
    rng: &mut R,
) -> Result<StateCloud, TrainError> {
    let all = StateCloud::new(episodes.iter().flat_map(|e| e.stacked.iter().cloned()).collect())?;
    Ok(all.subsample(max_points, rng))
}

/// Iterative training: policy `i` is trained under constraints against the
/// archived states of policies `0..i`. With `intrinsic = None` the
/// iterations are independent plain PPO runs.
pub fn itr_run(
    cfg: &TrainerConfig,
    intrinsic: Option<&IntrinsicConfig>,
    env_settings: &EnvSettings,
    seed: u64,
    on_row: &mut dyn FnMut(&MetricsRow),
) -> Result<RunOutcome, TrainError> {
    cfg.validate()?;
    if let Some(intr) = intrinsic {
        intr.validate()?;
    }
    let start = Instant::now();
    let mut env = env_settings.build(super::derive_seed(seed, Stream::Env, 0, 0))?;
    let spec = env.spec();
    let max_points = intrinsic.map_or(4096, |c| c.archive_max_points);
    let eval_episodes = intrinsic.map_or(64, |c| c.archive_episodes);
    let mut archive = Archive::new(spec.state_dim, max_points);
    let mut stats = RunStats::new(cfg);
    let mut rows = Vec::new();
    let mut policies = Vec::new();
    let mut evals = Vec::new();
    let mut global_step = 0;
    for i in 0..cfg.population {
        let constraints = if intrinsic.is_some() { i } else { 0 };
        let mut learner = Learner::new(env.as_ref(), cfg, 1 + constraints, seed, i as u64)?;
        let mut sample_rng = stream_rng(seed, Stream::Sampling, i as u64, 0);
        let mut lagrange = LagrangeState::new(constraints, cfg.lambda_max, cfg.lagrange_lr);
        if let Some(l) = cfg.freeze_lambda {
            lagrange.lambda.iter_mut().for_each(|v| *v = l);
        }
        let mut critics = match intrinsic {
            Some(intr) if intr.kind == IntrinsicKind::Wd => wd_fresh_critics(env.as_ref(), intr, seed, i, constraints)?,
            _ => Vec::new(),
        };
        let mut normalizer = intrinsic
            .filter(|c| c.normalize && constraints > 0)
            .map(|c| IntrinsicNormalizer::new(constraints, c.norm_discount));
        let mut steps = 0;
        while steps < cfg.steps_per_iteration {
            let episodes = collect_batch(&learner.policy, env.as_mut(), cfg.batch_size, &mut sample_rng)?;
            let n_steps: usize = episodes.iter().map(Episode::len).sum();
            let raw = match intrinsic {
                Some(intr) if constraints > 0 => {
                    let means: Vec<f64> = match intr.kind {
                        IntrinsicKind::Wd => archive.entries()[..constraints]
                            .iter()
                            .zip(&critics)
                            .map(|(e, c)| critic_mean(c, e.cloud()))
                            .collect::<Result<_, _>>()?,
                        _ => Vec::new(),
                    };
                    let targets: Vec<Target<'_>> = archive.entries()[..constraints]
                        .iter()
                        .enumerate()
                        .map(|(j, e)| match intr.kind {
                            IntrinsicKind::Rbf => Target::Cloud(e.cloud()),
                            IntrinsicKind::Wd => Target::Critic { net: &critics[j], mean: means[j] },
                            IntrinsicKind::FinalState => Target::Finals(e.final_states()),
                        })
                        .collect();
                    intrinsic_rewards(&episodes, &targets, intr.sigma2, spec.horizon)?
                }
                _ => vec![Vec::new(); episodes.len()],
            };
            let r_int = mean_intrinsic_returns(&raw, constraints);
            if r_int.iter().any(|r| !r.is_finite()) {
                return Err(TrainError::NonFinite { what: "intrinsic return".into(), iteration: i });
            }
            let lambda_used = lagrange.lambda.clone();
            if cfg.freeze_lambda.is_none() && constraints > 0 {
                lagrange = lagrange_update(&lagrange, &r_int, cfg.delta)?;
                stats.lambda_steps += 1;
            }
            stats.record_lambda(&lagrange);
            if let Some(intr) = intrinsic.filter(|c| c.kind == IntrinsicKind::Wd && constraints > 0) {
                let mut sub_rng = stream_rng(seed, Stream::Subsample, i as u64, stats.batches as u64);
                let current = batch_cloud(&episodes, intr.archive_max_points, &mut sub_rng)?;
                for (j, critic) in critics.iter_mut().enumerate() {
                    *critic = critic_update(critic, &current, archive.entries()[j].cloud(), intr.critic_lr)?;
                    stats.record_critic(critic);
                }
            }
            let alpha = intrinsic.map_or(0.0, |c| c.alpha);
            let intr_norm = normalized(&mut normalizer, &raw);
            let upd = learner
                .update(&episodes, &intr_norm, &lambda_used, alpha, cfg, &mut sample_rng)
                .map_err(|e| tag_iteration(e, i))?;
            stats.minibatch_steps += upd.minibatch_steps;
            stats.batches += 1;
            steps += n_steps;
            global_step += n_steps;
            let row = MetricsRow {
                iteration: i,
                step: global_step,
                j_hat: mean_return(&episodes),
                r_int: padded(&r_int, cfg.population, None),
                lambda: padded(&lagrange.lambda, cfg.population, None),
                wall_time: start.elapsed().as_secs_f64(),
            };
            on_row(&row);
            rows.push(row);
        }
        let mut eval_rng = stream_rng(seed, Stream::Evaluation, i as u64, 0);
        let eval = evaluate(&learner.policy, env.as_mut(), eval_episodes, false, &mut eval_rng)?;
        archive.push(archive_records(&eval, i), None)?;
        for (j, c) in critics.into_iter().enumerate() {
            archive.entries_mut()[j].critic = Some(c);
        }
        evals.push(eval);
        policies.push(learner.policy);
    }
    Ok(RunOutcome { policies, archive, rows, stats, evals })
}

fn tag_iteration(e: TrainError, iteration: usize) -> TrainError {
    match e {
        TrainError::NonFinite { what, .. } => TrainError::NonFinite { what, iteration },
        other => other,
    }
}

fn pair_index(a: usize, b: usize, m: usize) -> usize {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    lo * m + hi
}

/// Population training: all policies learn together, with one multiplier per
/// unordered pair and intrinsic rewards measured against the other policies'
/// latest rollout batches.
pub fn pbt_run(
    cfg: &TrainerConfig,
    intr: &IntrinsicConfig,
    env_settings: &EnvSettings,
    seed: u64,
    on_row: &mut dyn FnMut(&MetricsRow),
) -> Result<RunOutcome, TrainError> {
    cfg.validate()?;
    intr.validate()?;
    let start = Instant::now();
    let m = cfg.population;
    let mut env = env_settings.build(super::derive_seed(seed, Stream::Env, 0, 0))?;
    let spec = env.spec();
    let mut learners: Vec<Learner> =
        (0..m).map(|p| Learner::new(env.as_ref(), cfg, m, seed, p as u64)).collect::<Result<_, _>>()?;
    let mut rngs: Vec<_> = (0..m).map(|p| stream_rng(seed, Stream::Sampling, p as u64, 0)).collect();
    let mut pair_lambda = vec![cfg.freeze_lambda.unwrap_or(0.0); m * m];
    let mut critics: Vec<DenseNet> = match intr.kind {
        IntrinsicKind::Wd => (0..m * m)
            .map(|k| {
                let dim = STACK_DEPTH * spec.state_dim;
                Ok(new_critic(
                    dim,
                    intr.critic_hidden,
                    &mut stream_rng(seed, Stream::WdCritic, (k / m) as u64, (k % m) as u64),
                )?)
            })
            .collect::<Result<_, TrainError>>()?,
        _ => Vec::new(),
    };
    let mut normalizers: Vec<Option<IntrinsicNormalizer>> = (0..m)
        .map(|_| if intr.normalize && m > 1 { Some(IntrinsicNormalizer::new(m - 1, intr.norm_discount)) } else { None })
        .collect();
    let mut stats = RunStats::new(cfg);
    let mut rows = Vec::new();
    let mut steps = 0;
    let mut global_step = 0;
    let mut round = 0u64;
    while steps < cfg.steps_per_iteration {
        let batches: Vec<Vec<Episode>> = (0..m)
            .map(|p| collect_batch(&learners[p].policy, env.as_mut(), cfg.batch_size, &mut rngs[p]))
            .collect::<Result<_, _>>()?;
        let mut sub_rng = stream_rng(seed, Stream::Subsample, round, 0);
        let clouds: Vec<StateCloud> =
            batches.iter().map(|b| batch_cloud(b, intr.archive_max_points, &mut sub_rng)).collect::<Result<_, _>>()?;
        let finals: Vec<Vec<Vec<f64>>> =
            batches.iter().map(|b| b.iter().map(|e| e.final_state().to_vec()).collect()).collect();
        let means: Vec<f64> = match intr.kind {
            IntrinsicKind::Wd => {
                (0..m * m).map(|k| critic_mean(&critics[k], &clouds[k % m])).collect::<Result<_, _>>()?
            }
            _ => Vec::new(),
        };
        let mut raw: Vec<Vec<Vec<Vec<f64>>>> = Vec::with_capacity(m);
        let mut r_int = vec![0.0; m * m];
        for p in 0..m {
            let others: Vec<usize> = (0..m).filter(|&q| q != p).collect();
            let targets: Vec<Target<'_>> = others
                .iter()
                .map(|&q| match intr.kind {
                    IntrinsicKind::Rbf => Target::Cloud(&clouds[q]),
                    IntrinsicKind::Wd => Target::Critic { net: &critics[p * m + q], mean: means[p * m + q] },
                    IntrinsicKind::FinalState => Target::Finals(&finals[q]),
                })
                .collect();
            let r = intrinsic_rewards(&batches[p], &targets, intr.sigma2, spec.horizon)?;
            for (k, ret) in mean_intrinsic_returns(&r, others.len()).into_iter().enumerate() {
                if !ret.is_finite() {
                    return Err(TrainError::NonFinite { what: "intrinsic return".into(), iteration: p });
                }
                r_int[p * m + others[k]] = ret;
            }
            raw.push(r);
        }
        let lambda_used = pair_lambda.clone();
        if cfg.freeze_lambda.is_none() && m > 1 {
            for a in 0..m {
                for b in a + 1..m {
                    let k = pair_index(a, b, m);
                    let d = 0.5 * (r_int[a * m + b] + r_int[b * m + a]);
                    pair_lambda[k] = (pair_lambda[k] + cfg.lagrange_lr * (cfg.delta - d)).clamp(0.0, cfg.lambda_max);
                }
            }
            stats.lambda_steps += 1;
        }
        let view = LagrangeState { lambda: pair_lambda.clone(), lambda_max: cfg.lambda_max, lr: cfg.lagrange_lr };
        stats.record_lambda(&view);
        if intr.kind == IntrinsicKind::Wd {
            for p in 0..m {
                for q in (0..m).filter(|&q| q != p) {
                    let k = p * m + q;
                    critics[k] = critic_update(&critics[k], &clouds[p], &clouds[q], intr.critic_lr)?;
                    stats.record_critic(&critics[k]);
                }
            }
        }
        let mut batch_steps = 0;
        for p in 0..m {
            let lambda_p: Vec<f64> = (0..m).filter(|&q| q != p).map(|q| lambda_used[pair_index(p, q, m)]).collect();
            let intr_norm = normalized(&mut normalizers[p], &raw[p]);
            let upd = learners[p]
                .update(&batches[p], &intr_norm, &lambda_p, intr.alpha, cfg, &mut rngs[p])
                .map_err(|e| tag_iteration(e, p))?;
            stats.minibatch_steps += upd.minibatch_steps;
            stats.batches += 1;
            let n_steps: usize = batches[p].iter().map(Episode::len).sum();
            global_step += n_steps;
            batch_steps = batch_steps.max(n_steps);
            let r_row: Vec<f64> = (0..m).filter(|&q| q != p).map(|q| r_int[p * m + q]).collect();
            let l_row: Vec<f64> = (0..m).filter(|&q| q != p).map(|q| pair_lambda[pair_index(p, q, m)]).collect();
            let row = MetricsRow {
                iteration: p,
                step: global_step,
                j_hat: mean_return(&batches[p]),
                r_int: padded(&r_row, m, Some(p)),
                lambda: padded(&l_row, m, Some(p)),
                wall_time: start.elapsed().as_secs_f64(),
            };
            on_row(&row);
            rows.push(row);
        }
        steps += batch_steps;
        round += 1;
    }
    let mut archive = Archive::new(spec.state_dim, intr.archive_max_points);
    let mut evals = Vec::new();
    for (p, learner) in learners.iter().enumerate() {
        let mut eval_rng = stream_rng(seed, Stream::Evaluation, p as u64, 0);
        let eval = evaluate(&learner.policy, env.as_mut(), intr.archive_episodes, false, &mut eval_rng)?;
        archive.push(archive_records(&eval, p), None)?;
        evals.push(eval);
    }
    let policies = learners.into_iter().map(|l| l.policy).collect();
    Ok(RunOutcome { policies, archive, rows, stats, evals })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub c1: f64,
    pub delta: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Estimated `D(π₀, π₁)` under the configured intrinsic measure.
    pub diversity: f64,
    pub j_max: f64,
    pub c2: f64,
    pub lambda_max: f64,
    pub sweep: Vec<CalibrationRow>,
    pub delta: f64,
    pub alpha: f64,
}

pub const DEFAULT_C1: f64 = 1.2;
pub const C1_SWEEP: [f64; 6] = [1.0, 1.2, 1.4, 1.6, 1.8, 2.0];

/// Threshold and scale for one `c₁`. A positive diversity `D` gives
/// `δ = c₁ D`; a negative one (the RBF measure is never positive) gives
/// `δ = D / c₁`, which is again the stricter side of `D`.
pub fn calibration_row(diversity: f64, j_max: f64, c1: f64, c2: f64, lambda_max: f64) -> CalibrationRow {
    let delta = if diversity >= 0.0 { c1 * diversity } else { diversity / c1 };
    CalibrationRow { c1, delta, alpha: j_max / (c2 * lambda_max * delta.abs()) }
}

/// Trains two unconstrained policies, measures their diversity and derives
/// `δ` and `α` for every `c₁` in the sweep.
pub fn calibrate(
    cfg: &TrainerConfig,
    intr: &IntrinsicConfig,
    env_settings: &EnvSettings,
    seed: u64,
    c2: f64,
) -> Result<CalibrationReport, TrainError> {
    let two = TrainerConfig { population: 2, ..cfg.clone() };
    let run = itr_run(&two, None, env_settings, seed, &mut |_| {})?;
    let j_max = run.evals.iter().map(EvalResult::mean_return).fold(f64::NEG_INFINITY, f64::max);
    let env = env_settings.build(super::derive_seed(seed, Stream::Env, 0, 0))?;
    let horizon = env.spec().horizon;
    let entry = &run.archive.entries()[0];
    let episodes = &run.evals[1].episodes;
    let critic;
    let target = match intr.kind {
        IntrinsicKind::Rbf => Target::Cloud(entry.cloud()),
        IntrinsicKind::FinalState => Target::Finals(entry.final_states()),
        IntrinsicKind::Wd => {
            let mut f = wd_fresh_critics(env.as_ref(), intr, seed, 1, 1)?.remove(0);
            let mut rng = stream_rng(seed, Stream::Subsample, 1, 0);
            let current = batch_cloud(episodes, intr.archive_max_points, &mut rng)?;
            for _ in 0..200 {
                f = critic_update(&f, &current, entry.cloud(), intr.critic_lr)?;
            }
            critic = f;
            Target::Critic { net: &critic, mean: critic_mean(&critic, entry.cloud())? }
        }
    };
    let raw = intrinsic_rewards(episodes, &[target], intr.sigma2, horizon)?;
    let diversity = mean_intrinsic_returns(&raw, 1)[0];
    if diversity == 0.0 || !diversity.is_finite() {
        return Err(TrainError::Calibration(format!("degenerate diversity estimate {diversity}")));
    }
    let sweep: Vec<CalibrationRow> =
        C1_SWEEP.iter().map(|&c1| calibration_row(diversity, j_max, c1, c2, cfg.lambda_max)).collect();
    let chosen = calibration_row(diversity, j_max, DEFAULT_C1, c2, cfg.lambda_max);
    Ok(CalibrationReport {
        diversity,
        j_max,
        c2,
        lambda_max: cfg.lambda_max,
        sweep,
        delta: chosen.delta,
        alpha: chosen.alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_arithmetic() {
        let row = calibration_row(0.01, 1.0, 1.2, 1.0, 10.0);
        assert!((row.delta - 0.012).abs() < 1e-15);
        assert!((row.alpha - 1.0 / 0.12).abs() < 1e-9);
        let neg = calibration_row(-0.3, 1.0, 1.2, 1.0, 10.0);
        assert!((neg.delta + 0.25).abs() < 1e-15);
        assert!(neg.delta > -0.3);
    }

    #[test]
    fn padded_skips_own_slot() {
        assert_eq!(padded(&[1.0, 2.0], 3, Some(1)), vec![Some(1.0), None, Some(2.0)]);
        assert_eq!(padded(&[1.0], 3, None), vec![Some(1.0), None, None]);
    }

    #[test]
    fn dominant_outcome_needs_half_the_episodes() {
        let ep = |o| Episode {
            observations: vec![],
            actions: vec![],
            log_probs: vec![],
            rewards: vec![],
            stacked: vec![],
            states: vec![vec![0.0]],
            outcome: o,
        };
        let r = EvalResult { episodes: vec![ep(Some(2)), ep(Some(2)), ep(None), ep(Some(1))] };
        assert_eq!(r.dominant_outcome(), Some(2));
        let r = EvalResult { episodes: vec![ep(Some(2)), ep(None), ep(None), ep(None)] };
        assert_eq!(r.dominant_outcome(), None);
        let a = EvalResult { episodes: vec![ep(Some(0))] };
        let b = EvalResult { episodes: vec![ep(Some(0))] };
        let c = EvalResult { episodes: vec![ep(Some(3))] };
        assert_eq!(count_distinct_landmarks(&[a, b, c]), 2);
    }
}
