use serde::{Deserialize, Serialize};

use super::cost::{cost_matrix, median, CostMatrix, CostSpec};
use super::TransportResult;
use crate::dataspace::Dataset;
use crate::error::{Error, Result};

/// Annealing schedule and stopping rule for [`sinkhorn`].
///
/// `epsilon_start` defaults to the mean cost and `epsilon_final` to
/// `epsilon_final_rel` times the median cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon_start: Option<f64>,
    pub epsilon_final: Option<f64>,
    pub epsilon_final_rel: f64,
    pub anneal_factor: f64,
    pub max_iters: usize,
    /// L1 tolerance on the training-side marginal at the final epsilon.
    pub tol: f64,
    /// Over-relaxation weight on each potential update; 1 is plain Sinkhorn.
    pub relaxation: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon_start: None,
            epsilon_final: None,
            epsilon_final_rel: 1e-3,
            anneal_factor: 0.5,
            max_iters: 100_000,
            tol: 1e-4,
            relaxation: 1.0,
        }
    }
}

impl SinkhornConfig {
    fn schedule(&self, cost: &CostMatrix) -> Result<(f64, f64)> {
        let scale = {
            let med = median(cost.data());
            let mean = cost.mean();
            if med > 0.0 {
                med
            } else if mean > 0.0 {
                mean
            } else {
                1.0
            }
        };
        let fin = self.epsilon_final.unwrap_or(self.epsilon_final_rel * scale);
        let start = self.epsilon_start.unwrap_or_else(|| cost.mean().max(fin));
        if !(fin > 0.0 && fin.is_finite() && start >= fin) {
            return Err(Error::Config(format!(
                "invalid epsilon schedule start={start} final={fin}"
            )));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor < 1.0) {
            return Err(Error::Config(format!(
                "anneal factor {} outside (0, 1)",
                self.anneal_factor
            )));
        }
        Ok((start, fin))
    }
}

/// Entropic OT between two uniform empirical measures.
pub fn sinkhorn(
    train: &Dataset,
    val: &Dataset,
    spec: &CostSpec,
    config: &SinkhornConfig,
) -> Result<TransportResult> {
    let cost = cost_matrix(train, val, spec)?;
    let a = vec![1.0 / train.len() as f64; train.len()];
    let b = vec![1.0 / val.len() as f64; val.len()];
    sinkhorn_weighted(&cost, &a, &b, config)
}

#[inline]
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with arbitrary positive marginals `a`, `b` (each summing to 1).
pub fn sinkhorn_weighted(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    config: &SinkhornConfig,
) -> Result<TransportResult> {
    let (n, t) = (cost.rows(), cost.cols());
    if a.len() != n || b.len() != t {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: n,
        });
    }
    if a.iter().chain(b).any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::Numeric("marginal weights must be positive".into()));
    }
    let (eps_start, eps_final) = config.schedule(cost)?;
    let cost_t = cost.transposed();
    let log_a: Vec<f64> = a.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; t];
    let mut lse_rows = vec![0.0; n];

    let mut eps = eps_start;
    let mut iterations = 0usize;
    let mut residual = f64::INFINITY;
    let stage_tol = (config.tol * 1e3).clamp(1e-4, 1e-3);
    loop {
        let last_stage = eps <= eps_final;
        let target = if last_stage { config.tol } else { stage_tol };
        let mut first = true;
        loop {
            // row log-sums with the current g; they give both the residual and the f update
            for (i, lse) in lse_rows.iter_mut().enumerate() {
                let row = cost.row(i);
                *lse = log_sum_exp(g.iter().zip(row).map(|(gj, c)| (gj - c) / eps));
            }
            if !first || iterations > 0 {
                residual = f
                    .iter()
                    .zip(&lse_rows)
                    .zip(a)
                    .map(|((fi, l), ai)| ((fi / eps + l).exp() - ai).abs())
                    .sum();
                if !residual.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite marginal residual at epsilon {eps:e}"
                    )));
                }
                if residual <= target {
                    break;
                }
            }
            if iterations >= config.max_iters {
                return Err(Error::NoConvergence {
                    iterations,
                    residual,
                });
            }
            first = false;
            let w = config.relaxation;
            for i in 0..n {
                f[i] = (1.0 - w) * f[i] + w * eps * (log_a[i] - lse_rows[i]);
            }
            for (j, gj) in g.iter_mut().enumerate() {
                let col = cost_t.row(j);
                let l = log_sum_exp(f.iter().zip(col).map(|(fi, c)| (fi - c) / eps));
                *gj = (1.0 - w) * *gj + w * eps * (log_b[j] - l);
            }
            iterations += 1;
        }
        if last_stage {
            break;
        }
        eps = (eps * config.anneal_factor).max(eps_final);
    }

    let mut total = 0.0;
    for (i, fi) in f.iter().enumerate() {
        for (gj, &c) in g.iter().zip(cost.row(i)) {
            total += ((fi + gj - c) / eps).exp() * c;
        }
    }
    if !total.is_finite() || f.iter().chain(&g).any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite transport cost or potentials".into(),
        ));
    }
    Ok(TransportResult {
        cost: total,
        dual_train: f,
        dual_val: g,
        epsilon: eps,
        iterations,
        marginal_residual: residual,
        plan: None,
    })
}
