//! Exact optimal transport between two discrete measures.
//!
//! Transportation simplex (MODI / u-v method) started from the northwest
//! corner solution. The basis is kept as a spanning tree over the bipartite
//! graph of source rows and target columns.

use super::MeasureError;

/// Coupling `γ` between source and target points and its cost `Σ γ ⊙ C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `coupling[i][j]` is the mass moved from source `i` to target `j`.
    pub coupling: Vec<Vec<f64>>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.coupling.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n = self.coupling.first().map_or(0, Vec::len);
        (0..n).map(|j| self.coupling.iter().map(|r| r[j]).sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Row(usize),
    Col(usize),
}

struct Basis {
    flow: Vec<f64>,
    basic: Vec<bool>,
    row_adj: Vec<Vec<usize>>,
    col_adj: Vec<Vec<usize>>,
    n: usize,
}

impl Basis {
    fn insert(&mut self, i: usize, j: usize, f: f64) {
        self.basic[i * self.n + j] = true;
        self.flow[i * self.n + j] = f;
        self.row_adj[i].push(j);
        self.col_adj[j].push(i);
    }

    fn remove(&mut self, i: usize, j: usize) {
        self.basic[i * self.n + j] = false;
        self.flow[i * self.n + j] = 0.0;
        self.row_adj[i].retain(|&c| c != j);
        self.col_adj[j].retain(|&r| r != i);
    }
}

/// Solves `min Σ γ ⊙ C` subject to `γ 1 = supply`, `γᵀ 1 = demand`, `γ ≥ 0`.
///
/// `supply` and `demand` must be non-negative with equal totals (relative
/// tolerance 1e-9); `demand` is rescaled to the supply total before solving.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> Result<TransportPlan, MeasureError> {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 {
        return Err(MeasureError::Empty);
    }
    if cost.len() != m || cost.iter().any(|r| r.len() != n) {
        return Err(MeasureError::Dimension("cost matrix shape does not match marginals".into()));
    }
    if supply.iter().chain(demand).any(|w| !w.is_finite() || *w < 0.0) {
        return Err(MeasureError::Weights("marginals must be finite and non-negative".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(MeasureError::NonFinite);
    }
    let total_a: f64 = supply.iter().sum();
    let total_b: f64 = demand.iter().sum();
    if total_a <= 0.0 || (total_a - total_b).abs() > 1e-9 * total_a.max(total_b) {
        return Err(MeasureError::Weights(format!("marginal totals differ: {total_a} vs {total_b}")));
    }
    let demand: Vec<f64> = demand.iter().map(|b| b * total_a / total_b).collect();

    let mut basis = Basis {
        flow: vec![0.0; m * n],
        basic: vec![false; m * n],
        row_adj: vec![Vec::new(); m],
        col_adj: vec![Vec::new(); n],
        n,
    };

    // northwest corner: exactly m + n - 1 cells, a spanning tree
    let mut s = supply.to_vec();
    let mut d = demand.clone();
    let (mut i, mut j) = (0, 0);
    loop {
        if i == m - 1 && j == n - 1 {
            basis.insert(i, j, s[i].min(d[j]).max(0.0));
            break;
        }
        let x = s[i].min(d[j]);
        basis.insert(i, j, x);
        let move_down = if i == m - 1 {
            false
        } else if j == n - 1 {
            true
        } else {
            s[i] <= d[j]
        };
        if move_down {
            d[j] -= x;
            s[i] = 0.0;
            i += 1;
        } else {
            s[i] -= x;
            d[j] = 0.0;
            j += 1;
        }
    }

    let scale = cost.iter().flatten().fold(0.0f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * (1.0 + scale);
    let max_iter = 100 * (m + n) * (m + n) + 10_000;
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let mut parent: Vec<Option<Node>> = vec![None; m + n];
    let mut stack: Vec<Node> = Vec::with_capacity(m + n);

    for _ in 0..max_iter {
        compute_potentials(&basis, cost, &mut u, &mut v, &mut stack)?;

        let mut entering = None;
        let mut best = -tol;
        for (r, row) in cost.iter().enumerate() {
            let ur = u[r];
            for (c, &cij) in row.iter().enumerate() {
                if basis.basic[r * n + c] {
                    continue;
                }
                let reduced = cij - ur - v[c];
                if reduced < best {
                    best = reduced;
                    entering = Some((r, c));
                }
            }
        }
        let Some((ei, ej)) = entering else {
            return Ok(extract(&basis, cost, m, n));
        };

        // tree path from row `ei` to column `ej`
        parent.iter_mut().for_each(|p| *p = None);
        let idx = |node: Node| match node {
            Node::Row(r) => r,
            Node::Col(c) => m + c,
        };
        stack.clear();
        stack.push(Node::Row(ei));
        let mut seen = vec![false; m + n];
        seen[ei] = true;
        let mut found = false;
        while let Some(node) = stack.pop() {
            if node == Node::Col(ej) {
                found = true;
                break;
            }
            match node {
                Node::Row(r) => {
                    for &c in &basis.row_adj[r] {
                        if !seen[m + c] {
                            seen[m + c] = true;
                            parent[m + c] = Some(node);
                            stack.push(Node::Col(c));
                        }
                    }
                }
                Node::Col(c) => {
                    for &r in &basis.col_adj[c] {
                        if !seen[r] {
                            seen[r] = true;
                            parent[r] = Some(node);
                            stack.push(Node::Row(r));
                        }
                    }
                }
            }
        }
        if !found {
            return Err(MeasureError::Internal("basis is not a spanning tree".into()));
        }

        // cells along the path, starting at the column end; signs alternate - + - ...
        let mut cells = Vec::new();
        let mut node = Node::Col(ej);
        while let Some(p) = parent[idx(node)] {
            let cell = match (node, p) {
                (Node::Col(c), Node::Row(r)) | (Node::Row(r), Node::Col(c)) => (r, c),
                _ => return Err(MeasureError::Internal("non-bipartite tree edge".into())),
            };
            cells.push(cell);
            node = p;
        }

        let mut theta = f64::INFINITY;
        let mut leaving = None;
        for (k, &(r, c)) in cells.iter().enumerate() {
            if k % 2 == 0 {
                let f = basis.flow[r * n + c];
                if f < theta {
                    theta = f;
                    leaving = Some((r, c));
                }
            }
        }
        let (li, lj) = leaving.ok_or_else(|| MeasureError::Internal("empty pivot cycle".into()))?;
        for (k, &(r, c)) in cells.iter().enumerate() {
            let f = &mut basis.flow[r * n + c];
            if k % 2 == 0 {
                *f = (*f - theta).max(0.0);
            } else {
                *f += theta;
            }
        }
        basis.remove(li, lj);
        basis.insert(ei, ej, theta);
    }
    Err(MeasureError::Internal(format!("transport simplex did not converge in {max_iter} pivots")))
}

fn compute_potentials(
    basis: &Basis,
    cost: &[Vec<f64>],
    u: &mut [f64],
    v: &mut [f64],
    stack: &mut Vec<Node>,
) -> Result<(), MeasureError> {
    let m = u.len();
    let n = v.len();
    let mut done_row = vec![false; m];
    let mut done_col = vec![false; n];
    u[0] = 0.0;
    done_row[0] = true;
    stack.clear();
    stack.push(Node::Row(0));
    let mut count = 1;
    while let Some(node) = stack.pop() {
        match node {
            Node::Row(r) => {
                for &c in &basis.row_adj[r] {
                    if !done_col[c] {
                        v[c] = cost[r][c] - u[r];
                        done_col[c] = true;
                        count += 1;
                        stack.push(Node::Col(c));
                    }
                }
            }
            Node::Col(c) => {
                for &r in &basis.col_adj[c] {
                    if !done_row[r] {
                        u[r] = cost[r][c] - v[c];
                        done_row[r] = true;
                        count += 1;
                        stack.push(Node::Row(r));
                    }
                }
            }
        }
    }
    if count != m + n {
        return Err(MeasureError::Internal("basis does not span all rows and columns".into()));
    }
    Ok(())
}

fn extract(basis: &Basis, cost: &[Vec<f64>], m: usize, n: usize) -> TransportPlan {
    let mut coupling = vec![vec![0.0; n]; m];
    let mut total = 0.0;
    for (i, row) in coupling.iter_mut().enumerate() {
        for &j in &basis.row_adj[i] {
            let f = basis.flow[i * n + j];
            row[j] = f;
            total += f * cost[i][j];
        }
    }
    TransportPlan { coupling, cost: total }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_swap() {
        let cost = vec![vec![5.0, 1.0], vec![1.0, 5.0]];
        let plan = solve_transport(&[1.0, 1.0], &[1.0, 1.0], &cost).unwrap();
        assert!((plan.cost - 2.0).abs() < 1e-12);
        assert_eq!(plan.coupling, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn unbalanced_shapes() {
        // one source split over three targets
        let cost = vec![vec![1.0, 2.0, 3.0]];
        let plan = solve_transport(&[1.0], &[0.2, 0.3, 0.5], &cost).unwrap();
        assert!((plan.cost - (0.2 + 0.6 + 1.5)).abs() < 1e-12);
    }

    #[test]
    fn textbook_instance() {
        let cost = vec![vec![8.0, 6.0, 10.0], vec![9.0, 12.0, 13.0], vec![14.0, 9.0, 16.0]];
        let a = [20.0, 30.0, 25.0];
        let b = [10.0, 35.0, 30.0];
        let plan = solve_transport(&a, &b, &cost).unwrap();
        // integral optimum exists; enumerate x00, x01 and x10, x11 on the integer grid
        let mut best = f64::INFINITY;
        for x00 in 0..=10 {
            for x01 in 0..=20 - x00 {
                let x02 = 20 - x00 - x01;
                for x10 in 0..=(10 - x00) {
                    for x11 in 0..=(35 - x01) {
                        let x12 = 30i32 - x10 - x11;
                        if x12 < 0 {
                            continue;
                        }
                        let x20 = 10 - x00 - x10;
                        let x21 = 35 - x01 - x11;
                        let x22 = 30 - x02 - x12;
                        if x20 < 0 || x21 < 0 || x22 < 0 || x20 + x21 + x22 != 25 {
                            continue;
                        }
                        let xs = [x00, x01, x02, x10, x11, x12, x20, x21, x22];
                        let c: f64 = xs.iter().zip(cost.iter().flatten()).map(|(&x, c)| x as f64 * c).sum();
                        best = best.min(c);
                    }
                }
            }
        }
        assert!((plan.cost - best).abs() < 1e-9, "{} vs {}", plan.cost, best);
    }

    #[test]
    fn mismatched_totals_rejected() {
        let cost = vec![vec![1.0]];
        assert!(solve_transport(&[1.0], &[2.0], &cost).is_err());
    }

    #[test]
    fn zero_mass_points_allowed() {
        let cost = vec![vec![1.0, 0.0], vec![7.0, 3.0]];
        let plan = solve_transport(&[0.0, 1.0], &[0.5, 0.5], &cost).unwrap();
        assert!((plan.cost - 5.0).abs() < 1e-12);
    }
}
