//! Diversity measures: action-distribution measures, state-distance measures
//! (aligned L2 and exact EMD), and the k-NN state-entropy estimator.

mod entropy;
pub mod gridworld;
mod transport;

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

pub use entropy::{knn_entropy, DISTANCE_FLOOR};
pub use transport::{solve_transport, TransportPlan};

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("empty point cloud")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("policy error: {0}")]
    Policy(String),
    #[error("internal solver error: {0}")]
    Internal(String),
}

/// Empirical state distribution: equal-dimension points with optional
/// weights (uniform when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct StateCloud {
    points: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
}

impl StateCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, MeasureError> {
        Self::check_points(&points)?;
        Ok(StateCloud { points, weights: None })
    }

    pub fn weighted(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        Self::check_points(&points)?;
        if weights.len() != points.len() {
            return Err(MeasureError::Length(points.len(), weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MeasureError::Weights("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MeasureError::Weights(format!("weights sum to {total}, not 1")));
        }
        Ok(StateCloud { points, weights: Some(weights) })
    }

    fn check_points(points: &[Vec<f64>]) -> Result<(), MeasureError> {
        let first = points.first().ok_or(MeasureError::Empty)?;
        if first.is_empty() {
            return Err(MeasureError::Dimension("zero-dimensional points".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != first.len()) {
            return Err(MeasureError::Dimension(format!("{} vs {}", first.len(), p.len())));
        }
        Ok(())
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn weights(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.points.len() as f64; self.points.len()],
        }
    }

    /// Uniform random subset of at most `max_points` points (uniform weights).
    pub fn subsample<R: Rng + ?Sized>(&self, max_points: usize, rng: &mut R) -> StateCloud {
        if self.points.len() <= max_points {
            return self.clone();
        }
        let mut idx = sample(rng, self.points.len(), max_points).into_vec();
        idx.sort_unstable();
        StateCloud { points: idx.into_iter().map(|i| self.points[i].clone()).collect(), weights: None }
    }

    pub fn scaled(&self, factor: f64) -> StateCloud {
        StateCloud {
            points: self.points.iter().map(|p| p.iter().map(|v| v * factor).collect()).collect(),
            weights: self.weights.clone(),
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Σ p log(p/q)`, `+∞` when `q` misses mass that `p` has.
pub fn kl_action(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return f64::INFINITY;
        }
        total += pi * (pi / qi).ln();
    }
    total.max(0.0)
}

/// L2 norm of the concatenated per-timestep state differences.
pub fn state_l2(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MeasureError> {
    if a.len() != b.len() {
        return Err(MeasureError::Length(a.len(), b.len()));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(MeasureError::Dimension(format!("{} vs {}", x.len(), y.len())));
        }
        total += squared_distance(x, y);
    }
    Ok(total.sqrt())
}

/// Exact earth mover's distance between two clouds under `metric`.
pub fn emd<F>(source: &StateCloud, target: &StateCloud, metric: F) -> Result<TransportPlan, MeasureError>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    if source.dim() != target.dim() {
        return Err(MeasureError::Dimension(format!("{} vs {}", source.dim(), target.dim())));
    }
    let cost = cost_matrix(source.points(), target.points(), metric)?;
    solve_transport(&source.weights(), &target.weights(), &cost)
}

/// EMD with unit mass on every point, i.e. the optimal matching cost of two
/// equally sized point sets.
pub fn emd_unit_mass<F>(source: &[Vec<f64>], target: &[Vec<f64>], metric: F) -> Result<TransportPlan, MeasureError>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let cost = cost_matrix(source, target, metric)?;
    solve_transport(&vec![1.0; source.len()], &vec![1.0; target.len()], &cost)
}

fn cost_matrix<F>(a: &[Vec<f64>], b: &[Vec<f64>], metric: F) -> Result<Vec<Vec<f64>>, MeasureError>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let cost: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| metric(x, y)).collect()).collect();
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(MeasureError::NonFinite);
    }
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_of_equal_distributions_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_action(&p, &p), 0.0);
    }

    #[test]
    fn kl_disjoint_support_is_infinite() {
        assert_eq!(kl_action(&[1.0, 0.0], &[0.0, 1.0]), f64::INFINITY);
    }

    #[test]
    fn kl_closed_form() {
        let expected = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5.0f64.ln();
        assert!((kl_action(&[0.5, 0.5], &[0.9, 0.1]) - expected).abs() < 1e-15);
        assert!((expected - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn state_l2_identical_is_zero_and_lengths_checked() {
        let a = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
        assert_eq!(state_l2(&a, &a).unwrap(), 0.0);
        assert_eq!(state_l2(&a, &a[..1]), Err(MeasureError::Length(2, 1)));
    }

    #[test]
    fn emd_identical_clouds() {
        let cloud = StateCloud::new(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let plan = emd(&cloud, &cloud, euclidean).unwrap();
        assert_eq!(plan.cost, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert!((plan.coupling[i][j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn emd_marginals_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = |rng: &mut ChaCha8Rng, n| (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let a = StateCloud::new(pts(&mut rng, 9)).unwrap();
        let b = StateCloud::weighted(pts(&mut rng, 4), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let plan = emd(&a, &b, euclidean).unwrap();
        for (s, w) in plan.row_sums().iter().zip(a.weights()) {
            assert!((s - w).abs() < 1e-7);
        }
        for (s, w) in plan.col_sums().iter().zip(b.weights()) {
            assert!((s - w).abs() < 1e-7);
        }
        let recomputed: f64 = plan
            .coupling
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, g)| (i, j, *g)))
            .map(|(i, j, g)| g * euclidean(&a.points()[i], &b.points()[j]))
            .sum();
        assert!((recomputed - plan.cost).abs() < 1e-12);
    }

    #[test]
    fn cloud_validation() {
        assert_eq!(StateCloud::new(vec![]), Err(MeasureError::Empty));
        assert!(StateCloud::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(StateCloud::weighted(vec![vec![1.0], vec![2.0]], vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn subsample_caps_size() {
        let cloud = StateCloud::new((0..1000).map(|i| vec![i as f64]).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sub = cloud.subsample(256, &mut rng);
        assert_eq!(sub.len(), 256);
        assert_eq!(cloud.subsample(5000, &mut rng).len(), 1000);
    }
}
