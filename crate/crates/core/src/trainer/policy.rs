use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{TrainError, TrainerConfig};
use crate::approximator::{log_softmax, Adam, CategoricalHead, DenseNet, GaussianHead, Gradients};
use crate::environments::{Action, ActionSpace, Environment};
use crate::intrinsic::FrameStack;

const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
const POLICY_GAIN: f64 = 0.01;

/// Actor network plus, for continuous actions, a state-independent log std.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub actor: DenseNet,
    pub log_std: Vec<f64>,
    pub action_space: ActionSpace,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(
        observation_dim: usize,
        action_space: ActionSpace,
        hidden: usize,
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let (out, log_std) = match action_space {
            ActionSpace::Discrete(n) => (n, Vec::new()),
            ActionSpace::Continuous(d) => (d, vec![init_log_std; d]),
        };
        let actor = DenseNet::mlp(observation_dim, &[hidden, hidden], out, HIDDEN_GAIN, POLICY_GAIN, rng)?;
        Ok(Policy { actor, log_std, action_space })
    }

    pub fn act<R: Rng + ?Sized>(&self, observation: &[f64], rng: &mut R) -> Result<(Action, f64), TrainError> {
        let out = self.actor.forward(observation)?;
        match self.action_space {
            ActionSpace::Discrete(_) => {
                let (a, lp) = CategoricalHead::new(out).sample(rng)?;
                Ok((Action::Discrete(a), lp))
            }
            ActionSpace::Continuous(_) => {
                let (a, lp) = GaussianHead { mean: out, log_std: self.log_std.clone() }.sample(rng);
                Ok((Action::Continuous(a), lp))
            }
        }
    }

    /// Most likely action.
    pub fn greedy(&self, observation: &[f64]) -> Result<Action, TrainError> {
        let out = self.actor.forward(observation)?;
        Ok(match self.action_space {
            ActionSpace::Discrete(_) => Action::Discrete(CategoricalHead::new(out).argmax()),
            ActionSpace::Continuous(_) => Action::Continuous(out),
        })
    }
}

/// Adam for a plain parameter vector.
#[derive(Debug, Clone)]
struct VecAdam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl VecAdam {
    fn new(n: usize, lr: f64) -> Self {
        VecAdam { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - 0.9f64.powi(self.t);
        let c2 = 1.0 - 0.999f64.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = 0.9 * self.m[k] + 0.1 * grads[k];
            self.v[k] = 0.999 * self.v[k] + 0.001 * grads[k] * grads[k];
            params[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-5);
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyOptimizer {
    actor: Adam,
    log_std: VecAdam,
}

impl PolicyOptimizer {
    pub fn new(policy: &Policy, lr: f64) -> Self {
        PolicyOptimizer { actor: Adam::new(&policy.actor, lr), log_std: VecAdam::new(policy.log_std.len(), lr) }
    }
}

/// One value head: its own network and optimizer.
#[derive(Debug, Clone)]
pub struct Critic {
    pub net: DenseNet,
    opt: Adam,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(
        observation_dim: usize,
        hidden: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let net = DenseNet::mlp(observation_dim, &[hidden, hidden], 1, HIDDEN_GAIN, 1.0, rng)?;
        let opt = Adam::new(&net, lr);
        Ok(Critic { net, opt })
    }

    pub fn values(&self, observations: &Array2<f64>) -> Result<Vec<f64>, TrainError> {
        let (out, _) = self.net.forward_batch(observations.view())?;
        Ok(out.column(0).to_vec())
    }
}

/// One finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `o_0 … o_{L-1}`.
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Stacked states after each transition, `L` of them.
    pub stacked: Vec<Vec<f64>>,
    /// Raw global states `s_0 … s_L`.
    pub states: Vec<Vec<f64>>,
    pub outcome: Option<usize>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("episodes hold their initial state")
    }
}

pub fn run_episode<R: Rng + ?Sized>(
    policy: &Policy,
    env: &mut dyn Environment,
    greedy: bool,
    rng: &mut R,
) -> Result<Episode, TrainError> {
    let mut obs = env.reset();
    let first = env.snapshot();
    let mut stack = FrameStack::new(&first);
    let mut ep = Episode {
        observations: Vec::new(),
        actions: Vec::new(),
        log_probs: Vec::new(),
        rewards: Vec::new(),
        stacked: Vec::new(),
        states: vec![first],
        outcome: None,
    };
    loop {
        let (action, lp) = if greedy { (policy.greedy(&obs)?, 0.0) } else { policy.act(&obs, rng)? };
        let step = env.step(&action)?;
        stack.push(&step.state_snapshot);
        ep.observations.push(std::mem::replace(&mut obs, step.next_observation));
        ep.actions.push(action);
        ep.log_probs.push(lp);
        ep.rewards.push(step.reward);
        ep.stacked.push(stack.stacked());
        ep.states.push(step.state_snapshot);
        if step.terminated {
            ep.outcome = env.outcome();
            return Ok(ep);
        }
    }
}

/// Whole episodes until at least `batch_size` transitions are collected.
pub fn collect_batch<R: Rng + ?Sized>(
    policy: &Policy,
    env: &mut dyn Environment,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Episode>, TrainError> {
    let mut episodes = Vec::new();
    let mut steps = 0;
    while steps < batch_size {
        let ep = run_episode(policy, env, false, rng)?;
        steps += ep.len();
        episodes.push(ep);
    }
    Ok(episodes)
}

/// Flattened samples for one PPO update.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub observations: Array2<f64>,
    pub actions: Vec<Action>,
    pub old_log_probs: Vec<f64>,
    /// Combined and normalized advantages.
    pub advantages: Vec<f64>,
    /// Return targets, one stream per value head.
    pub returns: Vec<Vec<f64>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

pub fn observation_matrix(episodes: &[Episode]) -> Array2<f64> {
    let rows: Vec<&Vec<f64>> = episodes.iter().flat_map(|e| &e.observations).collect();
    let dim = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.into_iter().flatten().copied().collect();
    Array2::from_shape_vec((flat.len() / dim.max(1), dim), flat).expect("observations share a dimension")
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub minibatch_steps: usize,
}

/// Surrogate-gradient factor `∂ min(rA, clip(r)A) / ∂ log π`: zero whenever
/// the clipped term is the active one (ties included).
pub fn surrogate_slope(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = (advantage > 0.0 && ratio >= 1.0 + clip) || (advantage < 0.0 && ratio <= 1.0 - clip);
    if clipped {
        0.0
    } else {
        ratio * advantage
    }
}

struct ActorGrads {
    actor: Gradients,
    log_std: Vec<f64>,
    loss: f64,
    entropy: f64,
    clipped: usize,
}

fn actor_minibatch(
    policy: &Policy,
    batch: &TrainBatch,
    idx: &[usize],
    cfg: &TrainerConfig,
) -> Result<ActorGrads, TrainError> {
    let obs = batch.observations.select(Axis(0), idx);
    let (out, cache) = policy.actor.forward_batch(obs.view())?;
    let n = idx.len() as f64;
    let mut upstream = Array2::<f64>::zeros(out.raw_dim());
    let mut log_std_grad = vec![0.0; policy.log_std.len()];
    let (mut loss, mut entropy, mut clipped) = (0.0, 0.0, 0);
    for (row, &i) in idx.iter().enumerate() {
        let adv = batch.advantages[i];
        let out_row = out.row(row);
        let (logp, ent) = match (&batch.actions[i], policy.action_space) {
            (Action::Discrete(a), ActionSpace::Discrete(_)) => {
                let lsm = log_softmax(out_row.as_slice().expect("row-major output"));
                let h: f64 = -lsm.iter().map(|lp| lp.exp() * lp).sum::<f64>();
                (lsm[*a], h)
            }
            (Action::Continuous(a), ActionSpace::Continuous(_)) => {
                let head = GaussianHead { mean: out_row.to_vec(), log_std: policy.log_std.clone() };
                (head.log_prob(a), head.entropy())
            }
            _ => return Err(TrainError::Length("action does not match the action space".into())),
        };
        let ratio = (logp - batch.old_log_probs[i]).exp();
        let surr = (ratio * adv).min(ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv);
        let slope = surrogate_slope(ratio, adv, cfg.clip);
        if slope == 0.0 && adv != 0.0 {
            clipped += 1;
        }
        loss += -(surr + cfg.entropy_coef * ent) / n;
        entropy += ent / n;
        let mut up = upstream.row_mut(row);
        match &batch.actions[i] {
            Action::Discrete(a) => {
                let lsm = log_softmax(out_row.as_slice().expect("row-major output"));
                for (k, &lp) in lsm.iter().enumerate() {
                    let p = lp.exp();
                    let dlogp = if k == *a { 1.0 - p } else { -p };
                    let dent = -p * (lp + ent);
                    up[k] = -(slope * dlogp + cfg.entropy_coef * dent) / n;
                }
            }
            Action::Continuous(a) => {
                for k in 0..a.len() {
                    let sigma = policy.log_std[k].exp();
                    let z = (a[k] - out_row[k]) / sigma;
                    up[k] = -(slope * z / sigma) / n;
                    log_std_grad[k] += -(slope * (z * z - 1.0) + cfg.entropy_coef) / n;
                }
            }
        }
    }
    let actor = policy.actor.backward_batch(&cache, upstream.view())?;
    Ok(ActorGrads { actor, log_std: log_std_grad, loss, entropy, clipped })
}

fn clip_norm(grads: &mut Gradients, extra: &mut [f64], max_norm: f64) {
    let norm = (grads.squared_norm() + extra.iter().map(|g| g * g).sum::<f64>()).sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.scale(k);
        extra.iter_mut().for_each(|g| *g *= k);
    }
}

fn critic_minibatch(
    critic: &Critic,
    obs: &Array2<f64>,
    targets: &[f64],
    idx: &[usize],
) -> Result<(Gradients, f64), TrainError> {
    let x = obs.select(Axis(0), idx);
    let (out, cache) = critic.net.forward_batch(x.view())?;
    let n = idx.len() as f64;
    let mut up = Array2::<f64>::zeros(out.raw_dim());
    let mut loss = 0.0;
    for (row, &i) in idx.iter().enumerate() {
        let err = out[[row, 0]] - targets[i];
        loss += 0.5 * err * err / n;
        up[[row, 0]] = err / n;
    }
    Ok((critic.net.backward_batch(&cache, up.view())?, loss))
}

/// Clipped-surrogate PPO with entropy bonus for the actor and a summed MSE
/// over the value heads, `epochs × minibatches` Adam steps in total.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Policy,
    opt: &mut PolicyOptimizer,
    critics: &mut [Critic],
    batch: &TrainBatch,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<UpdateStats, TrainError> {
    if batch.returns.len() != critics.len() {
        return Err(TrainError::Length(format!(
            "{} return streams, {} value heads",
            batch.returns.len(),
            critics.len()
        )));
    }
    let n = batch.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mb = n.div_ceil(cfg.minibatches);
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let mut g = actor_minibatch(policy, batch, idx, cfg)?;
            if !g.loss.is_finite() || !g.actor.is_finite() {
                return Err(TrainError::NonFinite { what: "policy loss".into(), iteration: 0 });
            }
            clip_norm(&mut g.actor, &mut g.log_std, cfg.max_grad_norm);
            opt.actor.step(&mut policy.actor, &g.actor);
            if !policy.log_std.is_empty() {
                opt.log_std.step(&mut policy.log_std, &g.log_std);
            }
            let mut vloss = 0.0;
            for (critic, targets) in critics.iter_mut().zip(&batch.returns) {
                let (mut cg, l) = critic_minibatch(critic, &batch.observations, targets, idx)?;
                if !l.is_finite() || !cg.is_finite() {
                    return Err(TrainError::NonFinite { what: "value loss".into(), iteration: 0 });
                }
                clip_norm(&mut cg, &mut [], cfg.max_grad_norm);
                critic.opt.step(&mut critic.net, &cg);
                vloss += l;
            }
            stats.policy_loss += g.loss;
            stats.entropy += g.entropy;
            stats.value_loss += vloss;
            stats.clip_fraction += g.clipped as f64 / idx.len() as f64;
            stats.minibatch_steps += 1;
            count += 1.0;
        }
    }
    stats.policy_loss /= count;
    stats.entropy /= count;
    stats.value_loss /= count;
    stats.clip_fraction /= count;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::GridWorld;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_policy(seed: u64) -> Policy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Policy::new(9, ActionSpace::Discrete(4), 8, 0.0, &mut rng).unwrap()
    }

    fn batch_from(policy: &Policy, adv: Vec<f64>) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut env = GridWorld::new(3).unwrap();
        let eps = collect_batch(policy, &mut env, 32, &mut rng).unwrap();
        let obs = observation_matrix(&eps);
        let actions: Vec<Action> = eps.iter().flat_map(|e| e.actions.clone()).collect();
        let lps: Vec<f64> = eps.iter().flat_map(|e| e.log_probs.clone()).collect();
        let n = actions.len();
        TrainBatch {
            observations: obs,
            actions,
            old_log_probs: lps,
            advantages: if adv.is_empty() { vec![0.0; n] } else { adv[..n].to_vec() },
            returns: vec![vec![0.0; n]],
        }
    }

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        let cfg = TrainerConfig { entropy_coef: 0.0, epochs: 2, minibatches: 2, ..TrainerConfig::gridworld() };
        let mut policy = grid_policy(1);
        let before = policy.actor.params();
        let batch = batch_from(&policy, vec![]);
        let mut opt = PolicyOptimizer::new(&policy, cfg.actor_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let critic = Critic::new(9, 8, cfg.critic_lr, &mut rng).unwrap();
        let mut critics = vec![critic];
        let stats = ppo_update(&mut policy, &mut opt, &mut critics, &batch, &cfg, &mut rng).unwrap();
        assert_eq!(policy.actor.params(), before);
        assert_eq!(stats.minibatch_steps, 4);
    }

    #[test]
    fn minibatch_step_count_is_epochs_times_minibatches() {
        let cfg = TrainerConfig { epochs: 3, minibatches: 4, ..TrainerConfig::gridworld() };
        let mut policy = grid_policy(2);
        let batch = batch_from(&policy, (0..200).map(|i| (i as f64).sin()).collect());
        let mut opt = PolicyOptimizer::new(&policy, cfg.actor_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut critics = vec![Critic::new(9, 8, cfg.critic_lr, &mut rng).unwrap()];
        let stats = ppo_update(&mut policy, &mut opt, &mut critics, &batch, &cfg, &mut rng).unwrap();
        assert_eq!(stats.minibatch_steps, 12);
    }

    #[test]
    fn surrogate_slope_branches() {
        assert_eq!(surrogate_slope(1.0, 2.0, 0.2), 2.0);
        assert_eq!(surrogate_slope(1.2, 2.0, 0.2), 0.0);
        assert_eq!(surrogate_slope(1.3, -1.0, 0.2), -1.3);
        assert_eq!(surrogate_slope(0.8, -1.0, 0.2), 0.0);
        assert_eq!(surrogate_slope(0.7, 1.0, 0.2), 0.7);
    }

    #[test]
    fn ratio_at_clip_boundary_gives_zero_actor_gradient() {
        let cfg = TrainerConfig { entropy_coef: 0.0, clip: 0.2, ..TrainerConfig::gridworld() };
        let policy = grid_policy(3);
        let obs = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let lp = CategoricalHead::new(policy.actor.forward(&obs).unwrap()).log_prob(1);
        // pick the old log-prob so that the recomputed ratio is exactly at 1 + clip or just above
        let mut old = lp - 1.2f64.ln();
        while (lp - old).exp() < 1.2 {
            old = f64::from_bits(old.to_bits() + if old < 0.0 { 1 } else { -1i64 as u64 });
        }
        let batch = TrainBatch {
            observations: Array2::from_shape_vec((1, 9), obs.clone()).unwrap(),
            actions: vec![Action::Discrete(1)],
            old_log_probs: vec![old],
            advantages: vec![1.5],
            returns: vec![vec![0.0]],
        };
        let g = actor_minibatch(&policy, &batch, &[0], &cfg).unwrap();
        assert!(g.actor.flat().iter().all(|v| *v == 0.0));
        assert_eq!(g.clipped, 1);
        // inside the trust region the analytic gradient is A·r·∂log π
        let inside = TrainBatch { old_log_probs: vec![lp], ..batch };
        let g = actor_minibatch(&policy, &inside, &[0], &cfg).unwrap();
        let probs = CategoricalHead::new(policy.actor.forward(&obs).unwrap()).probs();
        let up: Vec<f64> = (0..4).map(|k| -1.5 * (if k == 1 { 1.0 } else { 0.0 } - probs[k])).collect();
        let expected = policy.actor.backward(&obs, &up).unwrap();
        for (a, b) in g.actor.flat().iter().zip(expected.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn episodes_stack_post_transition_states() {
        let policy = grid_policy(4);
        let mut env = GridWorld::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = run_episode(&policy, &mut env, false, &mut rng).unwrap();
        assert_eq!(ep.states.len(), ep.len() + 1);
        assert_eq!(ep.stacked.len(), ep.len());
        assert_eq!(&ep.stacked[0][6..], ep.states[1].as_slice());
        assert_eq!(&ep.stacked[0][..6], [ep.states[0].clone(), ep.states[0].clone(), ep.states[0].clone()].concat());
    }
}
