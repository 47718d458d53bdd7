//! Browser bindings. Every export returns a JSON string; errors come back as
//! a plain message.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sipo::environments::GridWorld;
use sipo::intrinsic::rbf_reward;
use sipo::measures::gridworld::{figure_policies, measure_row, rollout};
use sipo::measures::StateCloud;
use sipo::oracle::{
    random_instance, solve_itr_greedy, solve_pbt_exact, worst_case_instance, GeneratorConfig, Instance1D, OracleError,
    Solution,
};
use wasm_bindgen::prelude::*;

const GRID: usize = 5;

fn number(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(if x > 0.0 { "inf" } else { "-inf" })
    }
}

fn path(index: usize) -> Result<Vec<[usize; 2]>, String> {
    let policies = figure_policies();
    let policy = policies.get(index).ok_or_else(|| format!("no policy {index}"))?;
    let traj = rollout(policy).map_err(|e| e.to_string())?;
    Ok(traj.positions().into_iter().map(|s| [s.row, s.col]).collect())
}

/// Cells visited by each of the five hand-built policies, start to goal.
#[wasm_bindgen]
pub fn grid_paths() -> Result<String, String> {
    let paths = (0..figure_policies().len()).map(path).collect::<Result<Vec<_>, _>>()?;
    Ok(json!({ "size": GRID, "paths": paths }).to_string())
}

/// Every measure between policies `i` and `j` (0-based).
#[wasm_bindgen]
pub fn grid_measures(i: usize, j: usize) -> Result<String, String> {
    let policies = figure_policies();
    let (pi, pj) = match (policies.get(i), policies.get(j)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(format!("policies are numbered 0..{}", policies.len())),
    };
    let row = measure_row(pi, pj, (i + 1, j + 1)).map_err(|e| e.to_string())?;
    Ok(json!({
        "KL": number(row.kl),
        "JSD1": number(row.jsd1),
        "JSD0": number(row.jsd0),
        "action-L2": number(row.action_l2),
        "state-L2": number(row.state_l2),
        "state-EMD": number(row.state_emd),
    })
    .to_string())
}

fn compare(inst: &Instance1D) -> String {
    let solve = |r: Result<Solution, OracleError>| match r {
        Ok(s) => json!({ "total": s.total, "points": s.points }),
        Err(e) => json!({ "error": e.to_string() }),
    };
    json!({
        "j": inst.j_values,
        "m": inst.m,
        "delta": inst.delta,
        "pbt": solve(solve_pbt_exact(inst)),
        "itr_full": solve(solve_itr_greedy(inst, inst.delta)),
        "itr_half": solve(solve_itr_greedy(inst, inst.delta / 2.0)),
    })
    .to_string()
}

/// A random tent landscape from `seed`, solved jointly and greedily with
/// population `m` and threshold `delta`.
#[wasm_bindgen]
pub fn compare_1d(seed: u32, m: usize, delta: f64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let landscape = random_instance(&GeneratorConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    let inst = Instance1D::new(landscape.j_values, m, delta).map_err(|e| e.to_string())?;
    Ok(compare(&inst))
}

/// The three-peak instance where greedy selection at the full threshold loses.
#[wasm_bindgen]
pub fn worst_case_1d() -> String {
    compare(&worst_case_instance())
}

/// RBF intrinsic reward (horizon 1) against the states of policy `index`,
/// sampled on a `resolution × resolution` grid over the unit square.
#[wasm_bindgen]
pub fn rbf_field(index: usize, sigma: f64, resolution: usize) -> Result<String, String> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(format!("sigma must be positive, got {sigma}"));
    }
    if !(2..=200).contains(&resolution) {
        return Err(format!("resolution must be in 2..=200, got {resolution}"));
    }
    let env = GridWorld::new(GRID).map_err(|e| e.to_string())?;
    let policies = figure_policies();
    let policy = policies.get(index).ok_or_else(|| format!("no policy {index}"))?;
    let states = rollout(policy).map_err(|e| e.to_string())?.positions();
    let cloud = StateCloud::new(states.into_iter().map(|s| env.snapshot_of(s)).collect()).map_err(|e| e.to_string())?;
    let step = 1.0 / (resolution - 1) as f64;
    let mut field = Vec::with_capacity(resolution);
    for r in 0..resolution {
        let mut row = Vec::with_capacity(resolution);
        for c in 0..resolution {
            let s = [r as f64 * step, c as f64 * step];
            row.push(rbf_reward(&s, &cloud, sigma * sigma, 1).map_err(|e| e.to_string())?);
        }
        field.push(row);
    }
    Ok(json!({ "resolution": resolution, "field": field }).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn measures_report_infinite_kl_as_text() {
        let v = parse(&grid_measures(0, 1).unwrap());
        assert_eq!(v["KL"], "inf");
        assert!((v["state-L2"].as_f64().unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!(grid_measures(0, 9).is_err());
    }

    #[test]
    fn paths_run_corner_to_corner() {
        let v = parse(&grid_paths().unwrap());
        for p in v["paths"].as_array().unwrap() {
            let p = p.as_array().unwrap();
            assert_eq!(p.first().unwrap(), &json!([0, 0]));
            assert_eq!(p.last().unwrap(), &json!([4, 4]));
        }
    }

    #[test]
    fn worst_case_shows_the_gap() {
        let v = parse(&worst_case_1d());
        let total = |k: &str| v[k]["total"].as_f64().unwrap();
        assert!(total("itr_full") < total("pbt"));
        assert!(total("itr_half") >= total("pbt"));
    }

    #[test]
    fn infeasible_threshold_is_reported_in_place() {
        let v = parse(&compare_1d(1, 5, 0.9).unwrap());
        assert!(v["pbt"]["error"].is_string());
        assert!(compare_1d(1, 2, -1.0).is_err());
    }

    #[test]
    fn rbf_field_is_most_negative_on_the_path() {
        let v = parse(&rbf_field(0, 0.2, 5).unwrap());
        let field = v["field"].as_array().unwrap();
        assert_eq!(field.len(), 5);
        let at = |r: usize, c: usize| field[r][c].as_f64().unwrap();
        let visited = path(0).unwrap();
        let off = (0..5).flat_map(|r| (0..5).map(move |c| [r, c])).find(|p| !visited.contains(p)).unwrap();
        assert!(visited.iter().all(|p| at(p[0], p[1]) < at(off[0], off[1])));
        for row in field {
            for x in row.as_array().unwrap() {
                assert!((-1.0..=0.0).contains(&x.as_f64().unwrap()));
            }
        }
        assert!(rbf_field(0, 0.0, 5).is_err());
    }
}
