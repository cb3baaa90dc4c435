//! Exact uniform-marginal OT by the transportation simplex (MODI method).
//!
//! Marginals are scaled to integers (each of the `n` rows supplies `T` units and
//! each of the `T` columns demands `n` units), so flows stay exact and the basis
//! is a spanning tree over the `n + T` nodes.

use std::collections::VecDeque;

use super::cost::{cost_matrix, CostMatrix, CostSpec};
use super::TransportResult;
use crate::dataspace::Dataset;
use crate::error::{Error, Result};

/// Largest `n * T` accepted by [`exact_ot`].
pub const EXACT_CELL_LIMIT: usize = 10_000;

pub fn exact_ot(train: &Dataset, val: &Dataset, spec: &CostSpec) -> Result<TransportResult> {
    if train.len() * val.len() > EXACT_CELL_LIMIT {
        return Err(Error::TooLarge {
            rows: train.len(),
            cols: val.len(),
            limit: EXACT_CELL_LIMIT,
        });
    }
    let cost = cost_matrix(train, val, spec)?;
    solve(&cost)
}

/// Optimal cost for a raw cost matrix under uniform marginals.
pub fn exact_ot_cost(cost: &CostMatrix) -> Result<f64> {
    Ok(solve(cost)?.cost)
}

pub(crate) fn solve(cost: &CostMatrix) -> Result<TransportResult> {
    let (n, t) = (cost.rows(), cost.cols());
    if n * t > EXACT_CELL_LIMIT {
        return Err(Error::TooLarge {
            rows: n,
            cols: t,
            limit: EXACT_CELL_LIMIT,
        });
    }
    let mut tab = Tableau::northwest(cost);
    let scale = cost.data().iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-12 * scale.max(1.0);
    let max_pivots = 50 * n * t + 100;
    let mut pivots = 0;
    loop {
        tab.potentials();
        let Some((p, q)) = tab.entering(tol) else {
            break;
        };
        if pivots >= max_pivots {
            return Err(Error::Numeric(format!(
                "transportation simplex exceeded {max_pivots} pivots"
            )));
        }
        tab.pivot(p, q);
        pivots += 1;
    }

    let total = (n * t) as f64;
    let mut primal = 0.0;
    let mut plan = Vec::with_capacity(tab.basis.len());
    for cell in &tab.basis {
        if cell.flow > 0 {
            let mass = cell.flow as f64 / total;
            primal += mass * cost.get(cell.i, cell.j);
            plan.push((cell.i, cell.j, mass));
        }
    }
    plan.sort_by_key(|x| (x.0, x.1));
    Ok(TransportResult {
        cost: primal,
        dual_train: tab.u,
        dual_val: tab.v,
        epsilon: 0.0,
        iterations: pivots,
        marginal_residual: 0.0,
        plan: Some(plan),
    })
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    i: usize,
    j: usize,
    flow: i64,
}

struct Tableau<'a> {
    cost: &'a CostMatrix,
    basis: Vec<Cell>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl<'a> Tableau<'a> {
    fn northwest(cost: &'a CostMatrix) -> Self {
        let (n, t) = (cost.rows(), cost.cols());
        let mut supply = vec![t as i64; n];
        let mut demand = vec![n as i64; t];
        let mut basis = Vec::with_capacity(n + t - 1);
        let (mut i, mut j) = (0, 0);
        while j < t {
            let x = supply[i].min(demand[j]);
            supply[i] -= x;
            demand[j] -= x;
            basis.push(Cell { i, j, flow: x });
            if supply[i] == 0 && i + 1 < n {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(basis.len(), n + t - 1);
        Self {
            cost,
            basis,
            u: vec![0.0; n],
            v: vec![0.0; t],
        }
    }

    /// Node ids: rows are `0..n`, columns are `n..n+T`. Returns for each node the
    /// list of `(neighbor, basis index)` pairs.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let n = self.cost.rows();
        let mut adj = vec![Vec::new(); n + self.cost.cols()];
        for (k, c) in self.basis.iter().enumerate() {
            adj[c.i].push((n + c.j, k));
            adj[n + c.j].push((c.i, k));
        }
        adj
    }

    fn potentials(&mut self) {
        let n = self.cost.rows();
        let adj = self.adjacency();
        let mut seen = vec![false; adj.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        self.u[0] = 0.0;
        while let Some(node) = queue.pop_front() {
            for &(next, k) in &adj[node] {
                if seen[next] {
                    continue;
                }
                seen[next] = true;
                let c = self.basis[k];
                let cij = self.cost.get(c.i, c.j);
                if node < n {
                    self.v[next - n] = cij - self.u[node];
                } else {
                    self.u[next] = cij - self.v[node - n];
                }
                queue.push_back(next);
            }
        }
    }

    /// Most negative reduced cost, if any falls below `-tol`.
    fn entering(&self, tol: f64) -> Option<(usize, usize)> {
        let mut best = -tol;
        let mut arg = None;
        for i in 0..self.cost.rows() {
            let row = self.cost.row(i);
            for (j, c) in row.iter().enumerate() {
                let r = c - self.u[i] - self.v[j];
                if r < best {
                    best = r;
                    arg = Some((i, j));
                }
            }
        }
        arg
    }

    fn pivot(&mut self, p: usize, q: usize) {
        let n = self.cost.rows();
        let adj = self.adjacency();
        // tree path from column node q back to row node p
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; adj.len()];
        let mut seen = vec![false; adj.len()];
        let mut queue = VecDeque::from([p]);
        seen[p] = true;
        while let Some(node) = queue.pop_front() {
            if node == n + q {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, k));
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = n + q;
        while node != p {
            let (prev, k) = parent[node].expect("basis is a spanning tree");
            path.push(k);
            node = prev;
        }
        // cycle: entering (+), then path edges from q back to p alternate -, +, -, ...
        let mut theta = i64::MAX;
        let mut leave = usize::MAX;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 && self.basis[k].flow < theta {
                theta = self.basis[k].flow;
                leave = k;
            }
        }
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                self.basis[k].flow -= theta;
            } else {
                self.basis[k].flow += theta;
            }
        }
        self.basis[leave] = Cell {
            i: p,
            j: q,
            flow: theta,
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn perms(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn trivial_instances() {
        let one = CostMatrix::from_vec(1, 1, vec![7.5]).unwrap();
        assert_eq!(exact_ot_cost(&one).unwrap(), 7.5);
        let diag = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(exact_ot_cost(&diag).unwrap(), 0.0);
    }

    #[test]
    fn three_by_three_matches_permutation_enumeration() {
        let rows = vec![
            vec![4.0, 1.0, 9.0],
            vec![2.0, 8.0, 3.0],
            vec![7.0, 6.0, 5.0],
        ];
        let c = CostMatrix::from_rows(&rows).unwrap();
        let brute = perms(3)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| rows[i][j]).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min);
        assert!((exact_ot_cost(&c).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn square_random_matches_assignment_brute_force() {
        let mut rng = crate::rng::seeded(17);
        for _ in 0..20 {
            let k = rng.random_range(2..=6);
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..k).map(|_| rng.random::<f64>() * 10.0).collect())
                .collect();
            let brute = perms(k)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| rows[i][j]).sum::<f64>() / k as f64)
                .fold(f64::INFINITY, f64::min);
            let got = exact_ot_cost(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
            assert!((got - brute).abs() < 1e-10, "{got} vs {brute}");
        }
    }

    #[test]
    fn duals_certify_optimality() {
        let mut rng = crate::rng::seeded(5);
        for _ in 0..20 {
            let n = rng.random_range(1..=8);
            let t = rng.random_range(1..=8);
            let data: Vec<f64> = (0..n * t).map(|_| rng.random::<f64>() * 3.0).collect();
            let c = CostMatrix::from_vec(n, t, data).unwrap();
            let r = solve(&c).unwrap();
            // dual feasibility
            for i in 0..n {
                for j in 0..t {
                    assert!(c.get(i, j) - r.dual_train[i] - r.dual_val[j] >= -1e-9);
                }
            }
            // complementary slackness on the support
            for &(i, j, _) in r.plan.as_ref().unwrap() {
                assert!((c.get(i, j) - r.dual_train[i] - r.dual_val[j]).abs() <= 1e-8);
            }
            // strong duality
            let dual_obj = r.dual_train.iter().sum::<f64>() / n as f64
                + r.dual_val.iter().sum::<f64>() / t as f64;
            assert!((dual_obj - r.cost).abs() <= 1e-9);
        }
    }

    #[test]
    fn scale_covariance() {
        let mut rng = crate::rng::seeded(8);
        let data: Vec<f64> = (0..35).map(|_| rng.random::<f64>()).collect();
        let c = CostMatrix::from_vec(5, 7, data).unwrap();
        let r1 = solve(&c).unwrap();
        let r2 = solve(&c.scaled(2.0)).unwrap();
        assert!((r2.cost - 2.0 * r1.cost).abs() <= 1e-12);
        for (a, b) in r1.dual_train.iter().zip(&r2.dual_train) {
            assert!((2.0 * a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn size_guard() {
        let d = Dataset::new("x", 1, vec![0.0; 101], None).unwrap();
        let spec = CostSpec::features_only(Default::default());
        assert!(matches!(
            exact_ot(&d, &d, &spec),
            Err(Error::TooLarge { .. })
        ));
    }
}
