use super::TransportResult;
use crate::error::{Error, Result};

/// Per-source derivative of the transport cost with respect to source mass.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceGradient {
    pub g: Vec<f64>,
    /// Sources that contributed no training points; their entry is 0.
    pub degenerate: Vec<bool>,
}

impl SourceGradient {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// `g_i = (1/n_i) (sum_{j in i} f_j - n_i/(N - n_i) * sum_{k not in i} f_k)`.
///
/// Moving mass `dp` onto source `i` while shrinking the other sources in
/// proportion changes the transport cost by `g_i * dp` to first order.
pub fn calibrated_gradient(
    result: &TransportResult,
    source_of: &[usize],
    m: usize,
) -> Result<SourceGradient> {
    let f = &result.dual_train;
    if source_of.len() != f.len() {
        return Err(Error::DimensionMismatch {
            left: source_of.len(),
            right: f.len(),
        });
    }
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for (&s, &fj) in source_of.iter().zip(f) {
        if s >= m {
            return Err(Error::InvalidDataset(format!(
                "training point assigned to source {s} but m = {m}"
            )));
        }
        sums[s] += fj;
        counts[s] += 1;
    }
    let n_total = f.len();
    if let Some(i) = counts.iter().position(|&c| c == n_total) {
        return Err(Error::Degenerate(format!(
            "source {i} supplies every training point; the calibrated direction is undefined"
        )));
    }
    let total: f64 = sums.iter().sum();
    let mut g = vec![0.0; m];
    let mut degenerate = vec![false; m];
    for i in 0..m {
        let ni = counts[i];
        if ni == 0 {
            degenerate[i] = true;
            continue;
        }
        let rest = total - sums[i];
        let ratio = ni as f64 / (n_total - ni) as f64;
        g[i] = (sums[i] - ratio * rest) / ni as f64;
    }
    Ok(SourceGradient { g, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{sinkhorn_weighted, CostMatrix, SinkhornConfig};
    use rand::Rng;

    fn with_duals(f: Vec<f64>) -> TransportResult {
        TransportResult {
            cost: 0.0,
            dual_train: f,
            dual_val: vec![0.0],
            epsilon: 0.0,
            iterations: 0,
            marginal_residual: 0.0,
            plan: None,
        }
    }

    #[test]
    fn equal_duals_give_zero() {
        let r = with_duals(vec![3.25; 7]);
        let g = calibrated_gradient(&r, &[0, 0, 1, 2, 2, 2, 1], 3).unwrap();
        assert!(g.g.iter().all(|&x| x == 0.0), "{:?}", g.g);
    }

    #[test]
    fn two_singletons() {
        let g = calibrated_gradient(&with_duals(vec![1.5, -0.25]), &[0, 1], 2).unwrap();
        assert_eq!(g.g, vec![1.75, -1.75]);
    }

    #[test]
    fn empty_source_is_flagged_and_full_source_errors() {
        let g = calibrated_gradient(&with_duals(vec![1.0, 2.0, 4.0]), &[0, 0, 2], 3).unwrap();
        assert_eq!(g.degenerate, vec![false, true, false]);
        assert_eq!(g.g[1], 0.0);
        assert!(matches!(
            calibrated_gradient(&with_duals(vec![1.0, 2.0]), &[1, 1], 2),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn size_weighted_identity() {
        // sum_i n_i (N - n_i) g_i = 0 for any duals and any source sizes
        let mut rng = crate::rng::seeded(21);
        for _ in 0..50 {
            let n = rng.random_range(3..40);
            let m = rng.random_range(2..=5).min(n);
            let mut source_of: Vec<usize> = (0..n).map(|k| k % m).collect();
            source_of[..n / 2]
                .iter_mut()
                .for_each(|s| *s = rng.random_range(0..m));
            let f: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let Ok(g) = calibrated_gradient(&with_duals(f), &source_of, m) else {
                continue;
            };
            let mut counts = vec![0.0; m];
            source_of.iter().for_each(|&s| counts[s] += 1.0);
            let acc: f64 = (0..m)
                .map(|i| counts[i] * (n as f64 - counts[i]) * g.g[i])
                .sum();
            assert!(acc.abs() <= 1e-9, "{acc}");
        }
    }

    /// Point weights when source `s` holds mass `p[s]` spread evenly over its points.
    fn weights(p: &[f64], source_of: &[usize], counts: &[usize]) -> Vec<f64> {
        source_of.iter().map(|&s| p[s] / counts[s] as f64).collect()
    }

    fn sinkhorn_cfg() -> SinkhornConfig {
        SinkhornConfig {
            epsilon_final_rel: 5e-2,
            tol: 1e-9,
            max_iters: 400_000,
            ..Default::default()
        }
    }

    #[test]
    fn matches_finite_differences_of_reweighted_cost() {
        let mut rng = crate::rng::seeded(33);
        for _ in 0..5 {
            let counts = [4usize, 6, 5];
            let n: usize = counts.iter().sum();
            let t = 9;
            let source_of: Vec<usize> = (0..3)
                .flat_map(|s| std::iter::repeat_n(s, counts[s]))
                .collect();
            // source-specific shifts so the sources differ in distance to validation
            let shift = [0.0, 1.0, 2.5];
            let train: Vec<[f64; 2]> = source_of
                .iter()
                .map(|&s| [rng.random::<f64>() + shift[s], rng.random::<f64>()])
                .collect();
            let val: Vec<[f64; 2]> = (0..t)
                .map(|_| [rng.random::<f64>() * 2.0, rng.random::<f64>()])
                .collect();
            let mut data = Vec::with_capacity(n * t);
            for x in &train {
                for y in &val {
                    data.push((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2));
                }
            }
            let cost = CostMatrix::from_vec(n, t, data).unwrap();
            let b = vec![1.0 / t as f64; t];
            let p: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
            let base = sinkhorn_weighted(
                &cost,
                &weights(&p, &source_of, &counts),
                &b,
                &sinkhorn_cfg(),
            )
            .unwrap();
            let g = calibrated_gradient(&base, &source_of, 3).unwrap();
            let h = 1e-3;
            let mut fd = [0.0; 3];
            for i in 0..3 {
                let shifted = |d: f64| -> Vec<f64> {
                    let scale = (1.0 - p[i] - d) / (1.0 - p[i]);
                    (0..3)
                        .map(|k| if k == i { p[k] + d } else { p[k] * scale })
                        .collect()
                };
                let eps = base.epsilon;
                let cfg = SinkhornConfig {
                    epsilon_final: Some(eps),
                    ..sinkhorn_cfg()
                };
                let up =
                    sinkhorn_weighted(&cost, &weights(&shifted(h), &source_of, &counts), &b, &cfg)
                        .unwrap();
                let dn =
                    sinkhorn_weighted(&cost, &weights(&shifted(-h), &source_of, &counts), &b, &cfg)
                        .unwrap();
                fd[i] = (up.cost - dn.cost) / (2.0 * h);
            }
            let err: f64 =
                g.g.iter()
                    .zip(&fd)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
            let norm: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(err / norm <= 5e-2, "g={:?} fd={fd:?}", g.g);
        }
    }

    #[test]
    fn reweighted_cost_is_convex_in_mass() {
        let mut rng = crate::rng::seeded(2);
        let counts = [3usize, 4, 3];
        let source_of: Vec<usize> = (0..3)
            .flat_map(|s| std::iter::repeat_n(s, counts[s]))
            .collect();
        let (n, t) = (10, 6);
        let data: Vec<f64> = (0..n * t).map(|_| rng.random::<f64>() * 3.0).collect();
        let cost = CostMatrix::from_vec(n, t, data).unwrap();
        let b = vec![1.0 / t as f64; t];
        let cfg = SinkhornConfig {
            epsilon_start: Some(0.05),
            epsilon_final: Some(0.05),
            tol: 1e-12,
            ..Default::default()
        };
        // regularized value <f, a> + <g, b> is convex in the row marginal
        let value = |p: &[f64]| {
            let a = weights(p, &source_of, &counts);
            let r = sinkhorn_weighted(&cost, &a, &b, &cfg).unwrap();
            r.dual_train.iter().zip(&a).map(|(f, w)| f * w).sum::<f64>()
                + r.dual_val.iter().zip(&b).map(|(g, w)| g * w).sum::<f64>()
        };
        for _ in 0..20 {
            let mut draw = || {
                let v: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.05).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (p, q) = (draw(), draw());
            let mid: Vec<f64> = p.iter().zip(&q).map(|(x, y)| 0.5 * (x + y)).collect();
            assert!(value(&mid) <= 0.5 * (value(&p) + value(&q)) + 1e-9);
        }
    }
}
