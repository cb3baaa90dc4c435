//! Discrete optimal transport between a composed training set and a validation set.
//!
//! Both sides are uniform empirical measures. [`sinkhorn`] solves the entropic
//! problem in the log domain with geometric epsilon annealing; [`exact_ot`] solves
//! the linear program exactly on small instances and serves as the reference for
//! the entropic solver. [`calibrated_gradient`] turns training-side potentials into
//! per-source derivatives of the transport cost.

mod cost;
mod exact;
mod gradient;
mod sinkhorn;

pub use cost::{cost_matrix, median, CostMatrix, CostSpec, FeatureMetric};
pub use exact::{exact_ot, exact_ot_cost, EXACT_CELL_LIMIT};
pub use gradient::{calibrated_gradient, SourceGradient};
pub use sinkhorn::{sinkhorn, sinkhorn_weighted, SinkhornConfig};

use serde::{Deserialize, Serialize};

use crate::dataspace::Dataset;
use crate::error::Result;

/// Output of either solver.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportResult {
    /// Transport cost `<pi, C>` of the returned plan.
    pub cost: f64,
    /// One potential per training point.
    pub dual_train: Vec<f64>,
    /// One potential per validation point.
    pub dual_val: Vec<f64>,
    /// Final entropic regularization; zero for the exact solver.
    pub epsilon: f64,
    pub iterations: usize,
    /// L1 violation of the training-side marginal at exit.
    pub marginal_residual: f64,
    /// Sparse optimal plan, only recorded by the exact solver.
    pub plan: Option<Vec<(usize, usize, f64)>>,
}

impl TransportResult {
    /// Sparse coupling `(i, j, mass)`; entries below `threshold` are dropped.
    pub fn coupling(&self, cost: &CostMatrix, threshold: f64) -> Vec<(usize, usize, f64)> {
        if let Some(plan) = &self.plan {
            return plan.iter().copied().filter(|e| e.2 > threshold).collect();
        }
        let eps = self.epsilon;
        let mut out = Vec::new();
        for (i, f) in self.dual_train.iter().enumerate() {
            for (j, g) in self.dual_val.iter().enumerate() {
                let v = ((f + g - cost.get(i, j)) / eps).exp();
                if v > threshold {
                    out.push((i, j, v));
                }
            }
        }
        out
    }

    /// Write potentials as CSV with columns `side,index,potential`.
    pub fn write_duals_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["side", "index", "potential"])?;
        for (i, f) in self.dual_train.iter().enumerate() {
            w.write_record(["train", &i.to_string(), &f.to_string()])?;
        }
        for (j, g) in self.dual_val.iter().enumerate() {
            w.write_record(["val", &j.to_string(), &g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solver selection for pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OtSolver {
    Sinkhorn(SinkhornConfig),
    Exact,
    /// Exact when `n * T` fits [`EXACT_CELL_LIMIT`], Sinkhorn otherwise.
    Auto(SinkhornConfig),
}

impl Default for OtSolver {
    fn default() -> Self {
        OtSolver::Auto(SinkhornConfig::default())
    }
}

pub fn transport(
    train: &Dataset,
    val: &Dataset,
    spec: &CostSpec,
    solver: &OtSolver,
) -> Result<TransportResult> {
    match solver {
        OtSolver::Sinkhorn(cfg) => sinkhorn(train, val, spec, cfg),
        OtSolver::Exact => exact_ot(train, val, spec),
        OtSolver::Auto(cfg) => {
            if train.len() * val.len() <= EXACT_CELL_LIMIT {
                exact_ot(train, val, spec)
            } else {
                sinkhorn(train, val, spec, cfg)
            }
        }
    }
}
