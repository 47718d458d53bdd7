//! Action-based and state-based measures for tabular grid-world policies, and
//! the five hand-drawn optimal policies of the 5×5 example.

use std::collections::HashMap;

use super::{emd_unit_mass, euclidean, kl_action, state_l2, MeasureError};
use crate::environments::{grid_move, GridAction, GridWorldState};

/// Per-state action distribution over `[Up, Down, Left, Right]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    size: usize,
    probs: Vec<[f64; 4]>,
}

impl TabularPolicy {
    pub fn deterministic(size: usize, actions: &[GridAction]) -> Result<Self, MeasureError> {
        if actions.len() != size * size {
            return Err(MeasureError::Length(size * size, actions.len()));
        }
        let probs = actions
            .iter()
            .map(|a| {
                let mut p = [0.0; 4];
                p[a.index()] = 1.0;
                p
            })
            .collect();
        Ok(TabularPolicy { size, probs })
    }

    pub fn stochastic(size: usize, probs: Vec<[f64; 4]>) -> Result<Self, MeasureError> {
        if probs.len() != size * size {
            return Err(MeasureError::Length(size * size, probs.len()));
        }
        for p in &probs {
            let total: f64 = p.iter().sum();
            if p.iter().any(|v| *v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
                return Err(MeasureError::Policy(format!("invalid action distribution {p:?}")));
            }
        }
        Ok(TabularPolicy { size, probs })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn probs(&self, s: GridWorldState) -> &[f64; 4] {
        &self.probs[s.row * self.size + s.col]
    }

    pub fn set(&mut self, s: GridWorldState, a: GridAction) {
        let mut p = [0.0; 4];
        p[a.index()] = 1.0;
        self.probs[s.row * self.size + s.col] = p;
    }

    /// Action of a deterministic policy at `s`.
    pub fn action(&self, s: GridWorldState) -> Option<GridAction> {
        let p = self.probs(s);
        p.iter().position(|&v| v == 1.0).and_then(GridAction::from_index)
    }

    pub fn states(&self) -> impl Iterator<Item = GridWorldState> + '_ {
        (0..self.size * self.size).map(move |i| GridWorldState { row: i / self.size, col: i % self.size })
    }
}

/// One episode: decision states with their actions, then the final state.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTrajectory {
    pub steps: Vec<(GridWorldState, GridAction)>,
    pub final_state: GridWorldState,
}

impl GridTrajectory {
    /// All visited positions, start and end included.
    pub fn positions(&self) -> Vec<GridWorldState> {
        let mut out: Vec<_> = self.steps.iter().map(|(s, _)| *s).collect();
        out.push(self.final_state);
        out
    }
}

const MAX_TRAJECTORIES: usize = 200_000;

/// Every trajectory of positive probability from the top-left corner, with
/// its probability. Episodes end at the goal or after `4 · size` steps.
pub fn trajectory_distribution(policy: &TabularPolicy) -> Result<Vec<(GridTrajectory, f64)>, MeasureError> {
    let size = policy.size;
    let goal = GridWorldState { row: size - 1, col: size - 1 };
    let horizon = 4 * size;
    let mut out = Vec::new();
    let mut frontier = vec![(GridTrajectory { steps: vec![], final_state: GridWorldState { row: 0, col: 0 } }, 1.0)];
    while let Some((traj, prob)) = frontier.pop() {
        let s = traj.final_state;
        if s == goal || traj.steps.len() == horizon {
            out.push((traj, prob));
            if out.len() > MAX_TRAJECTORIES {
                return Err(MeasureError::Policy("too many trajectories to enumerate".into()));
            }
            continue;
        }
        for a in GridAction::ALL {
            let p = policy.probs(s)[a.index()];
            if p <= 0.0 {
                continue;
            }
            let mut next = traj.clone();
            next.steps.push((s, a));
            next.final_state = grid_move(size, s, a);
            frontier.push((next, prob * p));
        }
    }
    Ok(out)
}

fn check_same_world(pi: &TabularPolicy, pj: &TabularPolicy) -> Result<(), MeasureError> {
    if pi.size != pj.size {
        return Err(MeasureError::Dimension(format!("grid {} vs {}", pi.size, pj.size)));
    }
    Ok(())
}

/// Decision states visited by both policies, each weighted by the
/// probability of the trajectory that visits it.
fn joint_states(pi: &TabularPolicy, pj: &TabularPolicy) -> Result<Vec<(GridWorldState, f64)>, MeasureError> {
    let mut states = Vec::new();
    for policy in [pi, pj] {
        for (traj, p) in trajectory_distribution(policy)? {
            states.extend(traj.steps.iter().map(|(s, _)| (*s, p)));
        }
    }
    Ok(states)
}

/// Expected KL between action distributions over the joint visited states.
pub fn kl_policies(pi: &TabularPolicy, pj: &TabularPolicy) -> Result<f64, MeasureError> {
    check_same_world(pi, pj)?;
    let states = joint_states(pi, pj)?;
    let total: f64 = states.iter().map(|(_, w)| w).sum();
    let mut acc = 0.0;
    for (s, w) in states {
        let kl = kl_action(pi.probs(s), pj.probs(s));
        if kl.is_infinite() {
            return Ok(f64::INFINITY);
        }
        acc += w * kl;
    }
    Ok(acc / total)
}

/// Fraction of joint visited states at which the two policies pick different
/// actions (total-variation distance of the action distributions).
pub fn jsd0(pi: &TabularPolicy, pj: &TabularPolicy) -> Result<f64, MeasureError> {
    check_same_world(pi, pj)?;
    let states = joint_states(pi, pj)?;
    let total: f64 = states.iter().map(|(_, w)| w).sum();
    let disagree: f64 = states
        .iter()
        .map(|&(s, w)| {
            let tv: f64 = pi.probs(s).iter().zip(pj.probs(s)).map(|(a, b)| (a - b).abs()).sum::<f64>() * 0.5;
            w * tv
        })
        .sum();
    Ok(disagree / total)
}

type TrajectoryKey = Vec<(GridWorldState, GridAction)>;

/// Jensen-Shannon divergence between the trajectory distributions of the two
/// policies (the undiscounted member of the JSD family).
pub fn jsd1(pi: &TabularPolicy, pj: &TabularPolicy) -> Result<f64, MeasureError> {
    check_same_world(pi, pj)?;
    let di: HashMap<TrajectoryKey, f64> = trajectory_distribution(pi)?.into_iter().map(|(t, p)| (t.steps, p)).collect();
    let dj: HashMap<TrajectoryKey, f64> = trajectory_distribution(pj)?.into_iter().map(|(t, p)| (t.steps, p)).collect();
    let half_kl = |own: &HashMap<TrajectoryKey, f64>, other: &HashMap<TrajectoryKey, f64>| -> f64 {
        own.iter()
            .map(|(tau, &p)| {
                let q = other.get(tau).copied().unwrap_or(0.0);
                -0.5 * p * ((p + q) / (2.0 * p)).ln()
            })
            .sum()
    };
    Ok(half_kl(&di, &dj) + half_kl(&dj, &di))
}

/// L2 norm of the concatenated differences of expected action embeddings,
/// over the given states.
pub fn action_l2<F>(
    pi: &TabularPolicy,
    pj: &TabularPolicy,
    states: &[GridWorldState],
    embedding: F,
) -> Result<f64, MeasureError>
where
    F: Fn(GridAction) -> Vec<f64>,
{
    check_same_world(pi, pj)?;
    let expected = |policy: &TabularPolicy, s: GridWorldState| -> Vec<f64> {
        let mut acc: Vec<f64> = Vec::new();
        for a in GridAction::ALL {
            let p = policy.probs(s)[a.index()];
            let e = embedding(a);
            if acc.is_empty() {
                acc = vec![0.0; e.len()];
            }
            for (x, v) in acc.iter_mut().zip(e) {
                *x += p * v;
            }
        }
        acc
    };
    let mut total = 0.0;
    for &s in states {
        let (a, b) = (expected(pi, s), expected(pj, s));
        total += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total.sqrt())
}

/// "Right" and "down" at unit distance from each other: right moves along
/// +x, down along -y, both scaled by 1/√2.
pub fn unit_distance_embedding(a: GridAction) -> Vec<f64> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    match a {
        GridAction::Right => vec![h, 0.0],
        GridAction::Left => vec![-h, 0.0],
        GridAction::Up => vec![0.0, h],
        GridAction::Down => vec![0.0, -h],
    }
}

pub fn grid_coordinates(s: GridWorldState) -> Vec<f64> {
    vec![s.row as f64, s.col as f64]
}

/// Deterministic rollout; `None` when the policy is stochastic.
pub fn rollout(policy: &TabularPolicy) -> Result<GridTrajectory, MeasureError> {
    let mut dist = trajectory_distribution(policy)?;
    if dist.len() != 1 {
        return Err(MeasureError::Policy("policy is not deterministic along its path".into()));
    }
    Ok(dist.remove(0).0)
}

const FIGURE_PATHS: [&str; 5] = ["RDRDDRDR", "DRDRRDRD", "RRRRDDDD", "DRRRDDDR", "DDDDRRRR"];

fn parse_path(path: &str) -> Vec<GridAction> {
    path.chars().map(|c| if c == 'R' { GridAction::Right } else { GridAction::Down }).collect()
}

fn path_states(actions: &[GridAction]) -> Vec<(GridWorldState, GridAction)> {
    let mut s = GridWorldState { row: 0, col: 0 };
    let mut out = Vec::new();
    for &a in actions {
        out.push((s, a));
        s = grid_move(5, s, a);
    }
    out
}

/// The five optimal 5×5 policies `π₁ … π₅` (index 0 is `π₁`).
///
/// `π₁`, `π₂` zig-zag along the diagonal as mirror images; `π₃` runs along
/// the top and right edges. Off-path actions are shared, except that `π₁`
/// and `π₃` differ only where their paths branch, and `π₂` also differs from
/// `π₁` on three cells no drawn path visits.
pub fn figure_policies() -> Vec<TabularPolicy> {
    let size = 5;
    let mut base = vec![GridAction::Right; 25];
    for row in 0..size {
        base[row * size + size - 1] = GridAction::Down;
    }
    let mut shared = TabularPolicy::deterministic(size, &base).expect("25 cells");
    let paths: Vec<Vec<(GridWorldState, GridAction)>> =
        FIGURE_PATHS.iter().map(|p| path_states(&parse_path(p))).collect();
    // later overlays win: π₃, then π₂, then π₁
    for k in [2, 1, 0] {
        for &(s, a) in &paths[k] {
            shared.set(s, a);
        }
    }
    let p1 = shared.clone();
    let mut p3 = shared.clone();
    for &(s, a) in &paths[2] {
        p3.set(s, a);
    }
    let mut p2 = shared.clone();
    for &(s, a) in &paths[1] {
        p2.set(s, a);
    }
    for (row, col) in [(1, 3), (3, 0), (3, 1)] {
        p2.set(GridWorldState { row, col }, GridAction::Down);
    }
    let mut p4 = shared.clone();
    for &(s, a) in &paths[3] {
        p4.set(s, a);
    }
    let mut p5 = shared;
    for &(s, a) in &paths[4] {
        p5.set(s, a);
    }
    vec![p1, p2, p3, p4, p5]
}

/// One row of the measure comparison: `D(π₁, π_k)` under every measure.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureRow {
    pub pair: (usize, usize),
    pub kl: f64,
    pub jsd1: f64,
    pub jsd0: f64,
    pub action_l2: f64,
    pub state_l2: f64,
    pub state_emd: f64,
}

pub fn measure_row(pi: &TabularPolicy, pj: &TabularPolicy, pair: (usize, usize)) -> Result<MeasureRow, MeasureError> {
    let ti = rollout(pi)?;
    let tj = rollout(pj)?;
    let all_states: Vec<GridWorldState> = pi.states().collect();
    let coords = |t: &GridTrajectory| t.positions().into_iter().map(grid_coordinates).collect::<Vec<_>>();
    let (ci, cj) = (coords(&ti), coords(&tj));
    // interior states only: start and goal are shared by every optimal path
    let interior = |c: &[Vec<f64>]| c[1..c.len() - 1].to_vec();
    let plan = emd_unit_mass(&interior(&ci), &interior(&cj), euclidean)?;
    Ok(MeasureRow {
        pair,
        kl: kl_policies(pi, pj)?,
        jsd1: jsd1(pi, pj)?,
        jsd0: jsd0(pi, pj)?,
        action_l2: action_l2(pi, pj, &all_states, unit_distance_embedding)?,
        state_l2: state_l2(&ci, &cj)?,
        state_emd: plan.cost,
    })
}

/// A reported cell and the reference it is checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub pair: (usize, usize),
    pub measure: &'static str,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
}

impl Cell {
    pub fn passes(&self) -> bool {
        if self.expected.is_infinite() {
            return self.value == self.expected;
        }
        (self.value - self.expected).abs() <= self.tolerance
    }
}

/// Every measure for `(π₁, π₂)` and `(π₁, π₃)` with its reference value.
/// Closed-form cells are checked to 1e-9; EMD cells against the one-decimal
/// references 5.7 and 11.3 with tolerance 0.05.
pub fn comparison_table() -> Result<Vec<Cell>, MeasureError> {
    let policies = figure_policies();
    let ln2 = std::f64::consts::LN_2;
    let refs = [
        ((1, 2), [f64::INFINITY, ln2, 0.5, 7f64.sqrt(), 2.0 * 2f64.sqrt(), 5.7]),
        ((1, 3), [f64::INFINITY, ln2, 0.125, 1.0, 2.0 * 6f64.sqrt(), 11.3]),
    ];
    let mut cells = Vec::new();
    for ((a, b), expected) in refs {
        let row = measure_row(&policies[a - 1], &policies[b - 1], (a, b))?;
        let values = [row.kl, row.jsd1, row.jsd0, row.action_l2, row.state_l2, row.state_emd];
        let names = ["KL", "JSD1", "JSD0", "action-L2", "state-L2", "state-EMD"];
        for k in 0..6 {
            cells.push(Cell {
                pair: (a, b),
                measure: names[k],
                value: values[k],
                expected: expected[k],
                tolerance: if k == 5 { 0.05 } else { 1e-9 },
            });
        }
    }
    Ok(cells)
}
