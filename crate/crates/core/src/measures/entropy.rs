use statrs::function::gamma::{digamma, ln_gamma};

use super::{squared_distance, MeasureError, StateCloud};

/// k-NN distances below this are clamped so duplicate points stay finite.
pub const DISTANCE_FLOOR: f64 = 1e-10;

/// k-nearest-neighbour differential entropy estimate (nats):
///
/// `H = ln n - ψ(k) + ln V_d + (d/n) Σ_i ln ρ_k(i)`
///
/// with `ρ_k(i)` the distance from point `i` to its k-th nearest neighbour
/// and `V_d` the volume of the unit d-ball. Weights are ignored.
pub fn knn_entropy(states: &StateCloud, k: usize) -> Result<f64, MeasureError> {
    let n = states.len();
    if k == 0 {
        return Err(MeasureError::TooFewPoints { needed: 1, got: 0 });
    }
    if n < k + 1 {
        return Err(MeasureError::TooFewPoints { needed: k + 1, got: n });
    }
    let d = states.dim() as f64;
    let pts = states.points();
    let mut dists = Vec::with_capacity(n - 1);
    let mut sum_log = 0.0;
    for (i, p) in pts.iter().enumerate() {
        dists.clear();
        dists.extend(pts.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| squared_distance(p, q)));
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        sum_log += kth.sqrt().max(DISTANCE_FLOOR).ln();
    }
    let log_unit_ball = 0.5 * d * std::f64::consts::PI.ln() - ln_gamma(0.5 * d + 1.0);
    Ok((n as f64).ln() - digamma(k as f64) + log_unit_ball + d * sum_log / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn too_few_points() {
        let cloud = StateCloud::new(vec![vec![0.0]; 5]).unwrap();
        assert_eq!(knn_entropy(&cloud, 5), Err(MeasureError::TooFewPoints { needed: 6, got: 5 }));
    }

    #[test]
    fn identical_points_sit_below_any_jittered_cloud() {
        let n = 200;
        let same = StateCloud::new(vec![vec![0.3, 0.7]; n]).unwrap();
        let floor = knn_entropy(&same, 12).unwrap();
        assert!(floor.is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for amp in [1e-9, 1e-6, 1e-3] {
            let jittered = StateCloud::new(
                (0..n).map(|_| vec![0.3 + amp * rng.random::<f64>(), 0.7 + amp * rng.random::<f64>()]).collect(),
            )
            .unwrap();
            assert!(floor <= knn_entropy(&jittered, 12).unwrap());
        }
    }

    #[test]
    fn scaling_shifts_by_d_log_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud =
            StateCloud::new((0..300).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect()).unwrap();
        let h = knn_entropy(&cloud, 12).unwrap();
        let h2 = knn_entropy(&cloud.scaled(2.0), 12).unwrap();
        assert!((h2 - h - 2.0 * 2f64.ln()).abs() < 1e-6);
    }
}
