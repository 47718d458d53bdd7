use sipo::environments::NavConfig;
use sipo::intrinsic::{IntrinsicConfig, IntrinsicKind, CRITIC_CLIP};
use sipo::trainer::{itr_run, pbt_run, EnvSettings, RunOutcome, TrainerConfig};

fn tiny_grid() -> (TrainerConfig, EnvSettings) {
    let cfg = TrainerConfig {
        batch_size: 400,
        steps_per_iteration: 800,
        epochs: 2,
        minibatches: 2,
        hidden: 16,
        population: 3,
        ..TrainerConfig::gridworld()
    };
    (cfg, EnvSettings::gridworld(4))
}

fn tiny_nav() -> (TrainerConfig, EnvSettings) {
    let cfg = TrainerConfig {
        batch_size: 300,
        steps_per_iteration: 600,
        epochs: 2,
        minibatches: 2,
        hidden: 16,
        population: 3,
        ..TrainerConfig::nav()
    };
    let nav = NavConfig { n_landmarks: 3, max_steps: 60, ..NavConfig::default() };
    (cfg, EnvSettings::nav(nav))
}

fn same_policies(a: &RunOutcome, b: &RunOutcome) {
    assert_eq!(a.policies.len(), b.policies.len());
    for (p, q) in a.policies.iter().zip(&b.policies) {
        assert_eq!(p.actor.params(), q.actor.params());
        assert_eq!(p.log_std, q.log_std);
    }
    let j = |o: &RunOutcome| o.rows.iter().map(|r| (r.iteration, r.step, r.j_hat.to_bits())).collect::<Vec<_>>();
    assert_eq!(j(a), j(b));
}

#[test]
fn zero_alpha_frozen_zero_lambda_is_plain_ppo() {
    let (cfg, env) = tiny_grid();
    let ppo = itr_run(&cfg, None, &env, 11, &mut |_| {}).unwrap();
    let frozen = TrainerConfig { freeze_lambda: Some(0.0), ..cfg.clone() };
    for kind in [IntrinsicKind::Rbf, IntrinsicKind::Wd] {
        let intr = IntrinsicConfig { kind, alpha: 0.0, ..IntrinsicConfig::default() };
        let sipo = itr_run(&frozen, Some(&intr), &env, 11, &mut |_| {}).unwrap();
        same_policies(&ppo, &sipo);
        assert_eq!(sipo.stats.lambda_steps, 0);
        assert_eq!(sipo.stats.lambda_max_seen, 0.0);
    }
}

#[test]
fn zero_alpha_alone_is_plain_ppo() {
    let (cfg, env) = tiny_grid();
    let ppo = itr_run(&cfg, None, &env, 5, &mut |_| {}).unwrap();
    let intr = IntrinsicConfig { alpha: 0.0, ..IntrinsicConfig::default() };
    let sipo = itr_run(&cfg, Some(&intr), &env, 5, &mut |_| {}).unwrap();
    same_policies(&ppo, &sipo);
}

#[test]
fn single_policy_has_no_constraints() {
    let (cfg, env) = tiny_grid();
    let one = TrainerConfig { population: 1, ..cfg };
    let ppo = itr_run(&one, None, &env, 2, &mut |_| {}).unwrap();
    let sipo = itr_run(&one, Some(&IntrinsicConfig::default()), &env, 2, &mut |_| {}).unwrap();
    same_policies(&ppo, &sipo);
    assert_eq!(sipo.archive.len(), 1);
    assert!(sipo.rows.iter().all(|r| r.lambda.iter().all(Option::is_none)));
    let pbt = pbt_run(&one, &IntrinsicConfig::default(), &env, 2, &mut |_| {}).unwrap();
    same_policies(&ppo, &pbt);
}

#[test]
fn same_seed_same_run() {
    let (cfg, env) = tiny_grid();
    let intr = IntrinsicConfig { kind: IntrinsicKind::Wd, ..IntrinsicConfig::default() };
    let a = itr_run(&cfg, Some(&intr), &env, 3, &mut |_| {}).unwrap();
    let b = itr_run(&cfg, Some(&intr), &env, 3, &mut |_| {}).unwrap();
    same_policies(&a, &b);
    let strip = |o: &RunOutcome| o.rows.iter().map(|r| (r.r_int.clone(), r.lambda.clone())).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn multipliers_stay_in_bounds_and_saturate() {
    let (cfg, env) = tiny_grid();
    // RBF returns are never positive, so a positive threshold is never met
    let cfg = TrainerConfig { delta: 3.0, steps_per_iteration: 4000, ..cfg };
    let out = itr_run(&cfg, Some(&IntrinsicConfig::default()), &env, 1, &mut |_| {}).unwrap();
    assert!(out.stats.lambda_min_seen >= 0.0);
    assert_eq!(out.stats.lambda_max_seen, cfg.lambda_max);
    for r in &out.rows {
        for l in r.lambda.iter().flatten() {
            assert!((0.0..=cfg.lambda_max).contains(l));
        }
    }
}

#[test]
fn wasserstein_critics_stay_clipped() {
    let (cfg, env) = tiny_grid();
    let intr = IntrinsicConfig { kind: IntrinsicKind::Wd, ..IntrinsicConfig::default() };
    let out = itr_run(&cfg, Some(&intr), &env, 4, &mut |_| {}).unwrap();
    assert!(out.stats.critic_updates > 0);
    assert!(out.stats.critic_max_abs_param <= CRITIC_CLIP);
    for e in out.archive.entries() {
        if let Some(c) = &e.critic {
            assert!(c.max_abs_param() <= CRITIC_CLIP);
        }
    }
    let pbt = pbt_run(&cfg, &intr, &env, 4, &mut |_| {}).unwrap();
    assert!(pbt.stats.critic_updates > 0);
    assert!(pbt.stats.critic_max_abs_param <= CRITIC_CLIP);
}

#[test]
fn two_timescale_ratio() {
    let (cfg, env) = tiny_grid();
    let out = itr_run(&cfg, Some(&IntrinsicConfig::default()), &env, 6, &mut |_| {}).unwrap();
    let per_batch = cfg.epochs * cfg.minibatches;
    assert_eq!(out.stats.steps_per_lambda_step, per_batch);
    assert_eq!(out.stats.minibatch_steps, out.stats.batches * per_batch);
    // iteration 0 has no constraints and takes no multiplier steps
    let constrained = out.rows.iter().filter(|r| r.iteration > 0).count();
    assert_eq!(out.stats.lambda_steps, constrained);
}

#[test]
fn pbt_zero_threshold_keeps_multipliers_at_zero() {
    let (cfg, env) = tiny_nav();
    let cfg = TrainerConfig { delta: 0.0, ..cfg };
    let intr = IntrinsicConfig { kind: IntrinsicKind::FinalState, ..IntrinsicConfig::default() };
    let out = pbt_run(&cfg, &intr, &env, 8, &mut |_| {}).unwrap();
    assert!(out.stats.lambda_steps > 0);
    assert_eq!(out.stats.lambda_max_seen, 0.0);
    assert!(out.rows.iter().all(|r| r.lambda.iter().flatten().all(|l| *l == 0.0)));
}

#[test]
fn metrics_steps_are_monotone() {
    let (cfg, env) = tiny_nav();
    let intr = IntrinsicConfig { kind: IntrinsicKind::FinalState, ..IntrinsicConfig::default() };
    for out in
        [itr_run(&cfg, Some(&intr), &env, 1, &mut |_| {}).unwrap(), pbt_run(&cfg, &intr, &env, 1, &mut |_| {}).unwrap()]
    {
        assert!(out.rows.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(out.evals.len(), cfg.population);
        for r in &out.rows {
            assert_eq!(r.r_int.len(), cfg.population);
            assert_eq!(r.lambda.len(), cfg.population);
        }
    }
}
