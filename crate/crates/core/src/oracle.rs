//! Exact checks of the iterative-versus-population comparison on 1-D
//! instances: policies are points of `[0, 1]`, `J` is a reward landscape and
//! the diversity between two policies is `|x - y|`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack, in grid steps, when comparing a gap against a threshold.
const GAP_EPS: f64 = 1e-9;
/// Tolerance of the `T2 ≥ T1` comparison.
pub const VALUE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("no {m} points are pairwise at least {threshold} apart")]
    Infeasible { m: usize, threshold: f64 },
    #[error("greedy selection found no admissible point at step {step}")]
    GreedyStuck { step: usize },
}

/// `N` evenly spaced points on `[0, 1]` with rewards `J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance1D {
    pub j_values: Vec<f64>,
    pub m: usize,
    pub delta: f64,
}

impl Instance1D {
    pub fn new(j_values: Vec<f64>, m: usize, delta: f64) -> Result<Self, OracleError> {
        if j_values.len() < 2 {
            return Err(OracleError::Invalid("need at least two grid points".into()));
        }
        if m == 0 || m > j_values.len() {
            return Err(OracleError::Invalid(format!("population {m} with {} points", j_values.len())));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(OracleError::Invalid(format!("threshold must be positive, got {delta}")));
        }
        if j_values.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::Invalid("non-finite reward".into()));
        }
        Ok(Instance1D { j_values, m, delta })
    }

    pub fn n(&self) -> usize {
        self.j_values.len()
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.n() - 1) as f64
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    /// Smallest index gap whose distance reaches `threshold`.
    fn min_gap(&self, threshold: f64) -> usize {
        let g = (threshold / self.spacing() - GAP_EPS).ceil();
        g.max(0.0) as usize
    }
}

/// A chosen set of points and its total reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub total: f64,
    /// Grid indices in increasing order (PBT) or selection order (greedy).
    pub indices: Vec<usize>,
    pub points: Vec<f64>,
}

fn solution(inst: &Instance1D, indices: Vec<usize>) -> Solution {
    let total = indices.iter().map(|&i| inst.j_values[i]).sum();
    let points = indices.iter().map(|&i| inst.coordinate(i)).collect();
    Solution { total, indices, points }
}

/// Maximum of `Σ J` over all `M`-subsets with pairwise gaps `≥ δ`, by
/// dynamic programming over the sorted grid. Among optimal subsets the one
/// with the smallest coordinates (lexicographically) is returned.
pub fn solve_pbt_exact(inst: &Instance1D) -> Result<Solution, OracleError> {
    let n = inst.n();
    let m = inst.m;
    let g = inst.min_gap(inst.delta).max(1);
    // best[c][i]: best sum of c + 1 points whose largest index is i
    let mut best = vec![vec![f64::NEG_INFINITY; n]; m];
    let mut prev = vec![vec![usize::MAX; n]; m];
    best[0].clone_from(&inst.j_values);
    for c in 1..m {
        // running argmax of best[c - 1][0..=i - g]; strict > keeps the earliest index
        let mut arg: Option<usize> = None;
        for i in 0..n {
            if i >= g {
                let k = i - g;
                if best[c - 1][k].is_finite() && arg.is_none_or(|a| best[c - 1][k] > best[c - 1][a]) {
                    arg = Some(k);
                }
            }
            if let Some(a) = arg {
                best[c][i] = inst.j_values[i] + best[c - 1][a];
                prev[c][i] = a;
            }
        }
    }
    let last = &best[m - 1];
    let mut end: Option<usize> = None;
    for i in 0..n {
        if last[i].is_finite() && end.is_none_or(|e| last[i] > last[e]) {
            end = Some(i);
        }
    }
    let Some(mut i) = end else {
        return Err(OracleError::Infeasible { m, threshold: inst.delta });
    };
    let mut indices = vec![i];
    for c in (1..m).rev() {
        i = prev[c][i];
        indices.push(i);
    }
    indices.reverse();
    Ok(solution(inst, indices))
}

/// Greedy iterative selection: each step takes the best point at distance
/// `≥ threshold` from every earlier pick, ties toward smaller coordinates.
pub fn solve_itr_greedy(inst: &Instance1D, threshold: f64) -> Result<Solution, OracleError> {
    let g = inst.min_gap(threshold);
    let mut picked: Vec<usize> = Vec::with_capacity(inst.m);
    for step in 0..inst.m {
        let mut choice: Option<usize> = None;
        for i in 0..inst.n() {
            let admissible = picked.iter().all(|&p| p.abs_diff(i) >= g && p != i);
            if admissible && choice.is_none_or(|c| inst.j_values[i] > inst.j_values[c]) {
                choice = Some(i);
            }
        }
        match choice {
            Some(c) => picked.push(c),
            None => return Err(OracleError::GreedyStuck { step }),
        }
    }
    Ok(solution(inst, picked))
}

/// Exhaustive search over all `M`-subsets; only for small `N`.
pub fn brute_force_pbt(inst: &Instance1D) -> Option<f64> {
    let g = inst.min_gap(inst.delta).max(1);
    fn rec(inst: &Instance1D, g: usize, start: usize, left: usize, acc: f64, best: &mut Option<f64>) {
        if left == 0 {
            if best.is_none_or(|b| acc > b) {
                *best = Some(acc);
            }
            return;
        }
        for i in start..inst.n() {
            rec(inst, g, i + g, left - 1, acc + inst.j_values[i], best);
        }
    }
    let mut best = None;
    rec(inst, g, 0, inst.m, 0.0, &mut best);
    best
}

/// Generator settings for random instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub peaks: (usize, usize),
    pub delta: (f64, f64),
    pub population: (usize, usize),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { n: 200, peaks: (3, 8), delta: (0.01, 0.5), population: (2, 5) }
    }
}

/// Maximum of tent functions: `J(x) = max_k h_k · max(0, 1 - |x - c_k| / w_k)`.
pub fn random_instance<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<Instance1D, OracleError> {
    let peaks = rng.random_range(cfg.peaks.0..=cfg.peaks.1);
    let tents: Vec<(f64, f64, f64)> = (0..peaks)
        .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.02..0.3), rng.random_range(0.2..1.0)))
        .collect();
    let j_values = (0..cfg.n)
        .map(|i| {
            let x = i as f64 / (cfg.n - 1) as f64;
            tents.iter().map(|&(c, w, h)| h * (1.0 - (x - c).abs() / w).max(0.0)).fold(0.0, f64::max)
        })
        .collect();
    let m = rng.random_range(cfg.population.0..=cfg.population.1);
    // cap the threshold so that M points fit on [0, 1], unless the range
    // lies entirely above the cap
    let cap = if m > 1 { ((cfg.n - 1) / (m - 1)) as f64 / (cfg.n - 1) as f64 } else { f64::INFINITY };
    let hi = if cfg.delta.0 < cap { cfg.delta.1.min(cap) } else { cfg.delta.1 };
    let delta = rng.random_range(cfg.delta.0..hi);
    Instance1D::new(j_values, m, delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub instance: Instance1D,
    /// `None` when the greedy selection got stuck.
    pub t2: Option<f64>,
    pub t1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub instances: usize,
    /// Feasible instances with `T2(δ/2) ≥ T1(δ)`.
    pub passes: usize,
    /// Instances where no `M` points are `δ` apart; nothing to check.
    pub infeasible: usize,
    /// Instances where greedy with the full `δ` falls short of the
    /// population optimum. Expected, not a violation.
    pub itr_full_delta_below_pbt: usize,
    pub violations: Vec<Violation>,
}

/// Compares the population optimum at `δ` with greedy selection at `δ/2`
/// on `n_instances` random instances.
pub fn verify_theorem1<R: Rng + ?Sized>(
    n_instances: usize,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<Theorem1Report, OracleError> {
    if n_instances == 0 {
        return Err(OracleError::Invalid("need at least one instance".into()));
    }
    let mut report = Theorem1Report {
        instances: n_instances,
        passes: 0,
        infeasible: 0,
        itr_full_delta_below_pbt: 0,
        violations: Vec::new(),
    };
    for _ in 0..n_instances {
        let inst = random_instance(cfg, rng)?;
        let t1 = match solve_pbt_exact(&inst) {
            Ok(s) => s.total,
            Err(OracleError::Infeasible { .. }) => {
                report.infeasible += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        match solve_itr_greedy(&inst, inst.delta) {
            Ok(s) if s.total < t1 - VALUE_EPS => report.itr_full_delta_below_pbt += 1,
            Err(_) => report.itr_full_delta_below_pbt += 1,
            Ok(_) => {}
        }
        match solve_itr_greedy(&inst, inst.delta / 2.0) {
            Ok(s) if s.total >= t1 - VALUE_EPS => report.passes += 1,
            Ok(s) => report.violations.push(Violation { instance: inst, t2: Some(s.total), t1 }),
            Err(_) => report.violations.push(Violation { instance: inst, t2: None, t1 }),
        }
    }
    Ok(report)
}

/// Two near-optimal peaks `δ` apart flank the global peak: `J(0.5) = 1`,
/// `J(0.3) = J(0.7) = 0.9`, zero elsewhere, `M = 2`, `δ = 0.4`.
pub fn worst_case_instance() -> Instance1D {
    let n = 201;
    let mut j = vec![0.0; n];
    j[100] = 1.0;
    j[60] = 0.9;
    j[140] = 0.9;
    Instance1D::new(j, 2, 0.4).expect("valid construction")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub pbt: Solution,
    pub itr_full: Solution,
    pub itr_half: Solution,
}

impl WorstCase {
    /// Greedy at `δ` is strictly worse; greedy at `δ/2` is at least as good.
    pub fn holds(&self) -> bool {
        self.itr_full.total < self.pbt.total - VALUE_EPS && self.itr_half.total >= self.pbt.total - VALUE_EPS
    }
}

pub fn worst_case() -> Result<WorstCase, OracleError> {
    let inst = worst_case_instance();
    Ok(WorstCase {
        pbt: solve_pbt_exact(&inst)?,
        itr_full: solve_itr_greedy(&inst, inst.delta)?,
        itr_half: solve_itr_greedy(&inst, inst.delta / 2.0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_policy_is_argmax() {
        let inst = Instance1D::new(vec![0.1, 0.7, 0.3, 0.7], 1, 0.2).unwrap();
        let pbt = solve_pbt_exact(&inst).unwrap();
        let itr = solve_itr_greedy(&inst, inst.delta).unwrap();
        assert_eq!(pbt.indices, vec![1]);
        assert_eq!(itr.indices, vec![1]);
        assert_eq!(pbt.total, 0.7);
    }

    #[test]
    fn constant_landscape() {
        let inst = Instance1D::new(vec![0.5; 30], 3, 0.3).unwrap();
        let pbt = solve_pbt_exact(&inst).unwrap();
        assert!((pbt.total - 1.5).abs() < 1e-12);
        for w in pbt.points.windows(2) {
            assert!(w[1] - w[0] >= 0.3 - 1e-12);
        }
    }

    #[test]
    fn dp_matches_brute_force_on_fifty_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = GeneratorConfig { n: 50, population: (3, 3), delta: (0.05, 0.3), ..GeneratorConfig::default() };
        for _ in 0..5 {
            let inst = random_instance(&cfg, &mut rng).unwrap();
            let dp = solve_pbt_exact(&inst).unwrap().total;
            let bf = brute_force_pbt(&inst).unwrap();
            assert!((dp - bf).abs() < 1e-12, "{dp} vs {bf}");
        }
    }

    #[test]
    fn infeasible_reported() {
        let inst = Instance1D::new(vec![1.0; 10], 3, 0.6).unwrap();
        assert!(matches!(solve_pbt_exact(&inst), Err(OracleError::Infeasible { .. })));
    }

    #[test]
    fn worst_case_reproduced() {
        let wc = worst_case().unwrap();
        assert!((wc.pbt.total - 1.8).abs() < 1e-12);
        assert_eq!(wc.pbt.indices, vec![60, 140]);
        assert!((wc.itr_full.total - 1.0).abs() < 1e-12);
        assert!((wc.itr_half.total - 1.9).abs() < 1e-12);
        assert!(wc.holds());
    }

    #[test]
    fn huge_delta_makes_everything_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GeneratorConfig { delta: (1.5, 2.0), ..GeneratorConfig::default() };
        let report = verify_theorem1(50, &cfg, &mut rng).unwrap();
        assert_eq!(report.infeasible, 50);
        assert_eq!(report.passes, 0);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn greedy_pbt_ties_prefer_small_coordinates() {
        let inst = Instance1D::new(vec![1.0, 0.0, 1.0, 0.0, 1.0], 1, 0.5).unwrap();
        assert_eq!(solve_itr_greedy(&inst, 0.5).unwrap().indices, vec![0]);
        assert_eq!(solve_pbt_exact(&inst).unwrap().indices, vec![0]);
    }
}
