//! Mixture selection: projected-gradient ascent on the simplex, and the minimal
//! budget line search built on it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataspace::{compose, Dataset, MixingRatio, MixtureSpec};
use crate::error::{Error, Result};
use crate::ot::{calibrated_gradient, transport, CostSpec, OtSolver};
use crate::predictors::PqGradient;
use crate::projection::{ScalePair, Surrogate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `d_t = c / (t + 1)`. Without `c`, `c = 0.1 / (|g_0|_inf + 1e-12)`.
    RobbinsMonro {
        #[serde(default)]
        c: Option<f64>,
    },
    Constant {
        d: f64,
    },
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::RobbinsMonro { c: None }
    }
}

fn default_max_iters() -> usize {
    200
}

fn default_converge_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub step_schedule: StepSchedule,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop when the L-infinity change in `p` falls to this value.
    #[serde(default = "default_converge_tol")]
    pub converge_tol: f64,
    /// Seed of the compositions evaluated at every iterate.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pq_gradient: PqGradient,
    #[serde(default)]
    pub solver: OtSolver,
    /// Total data the providers can supply; budgets above it are rejected.
    #[serde(default)]
    pub capacity: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_schedule: StepSchedule::default(),
            max_iters: default_max_iters(),
            converge_tol: default_converge_tol(),
            seed: 0,
            pq_gradient: PqGradient::default(),
            solver: OtSolver::default(),
            capacity: None,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        let step_ok = match self.step_schedule {
            StepSchedule::RobbinsMonro { c } => c.is_none_or(|c| c > 0.0 && c.is_finite()),
            StepSchedule::Constant { d } => d > 0.0 && d.is_finite(),
        };
        if !step_ok {
            return Err(Error::Config(
                "step sizes must be positive and finite".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.converge_tol >= 0.0) {
            return Err(Error::Config("converge_tol must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iteration: usize,
    pub ratio: MixingRatio,
    pub objective: f64,
    /// The step leading away from this iterate had negative components clipped.
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Best iterate by predicted objective.
    pub ratio: MixingRatio,
    pub predicted_performance: f64,
    pub trajectory: Vec<TrajectoryRecord>,
    pub converged: bool,
    pub iterations: usize,
    /// Why the run ended early, if it did (vertex reached, infeasible iterate).
    pub stopped: Option<String>,
}

#[derive(Serialize)]
struct ResultJson<'a> {
    ratio: &'a MixingRatio,
    predicted_performance: f64,
    converged: bool,
    iterations: usize,
}

impl SelectionResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ResultJson {
            ratio: &self.ratio,
            predicted_performance: self.predicted_performance,
            converged: self.converged,
            iterations: self.iterations,
        })?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// Columns `iter, p_0..p_{m-1}, objective`.
    pub fn write_trajectory_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let m = self.ratio.len();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["iter".to_string()];
        header.extend((0..m).map(|i| format!("p_{i}")));
        header.push("objective".into());
        w.write_record(&header)?;
        for r in &self.trajectory {
            let mut row = vec![r.iteration.to_string()];
            row.extend(r.ratio.as_slice().iter().map(|x| x.to_string()));
            row.push(r.objective.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Objective value at an iterate and, when defined, its calibrated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
    /// Sources with no points in a composition; their OT gradient entry is 0.
    pub degenerate: Vec<bool>,
}

struct ScaleTerm {
    value: f64,
    gradient: Result<Vec<f64>>,
    degenerate: Vec<bool>,
}

#[allow(clippy::too_many_arguments)]
fn scale_term<S: Surrogate>(
    model: &S,
    n: usize,
    ratio: &MixingRatio,
    sources: &[Dataset],
    val: &Dataset,
    cost_spec: &CostSpec,
    config: &OptimizerConfig,
) -> Result<ScaleTerm> {
    let m = model.m();
    let comp = compose(
        sources,
        &MixtureSpec {
            budget: n,
            ratio: ratio.clone(),
            seed: config.seed,
        },
    )?;
    if !model.uses_transport() {
        return Ok(ScaleTerm {
            value: model.value(ratio, 0.0, n)?,
            gradient: model.gradient(ratio, 0.0, &vec![0.0; m], n, config.pq_gradient),
            degenerate: vec![false; m],
        });
    }
    let ot = transport(&comp.dataset, val, cost_spec, &config.solver)?;
    let value = model.value(ratio, ot.cost, n)?;
    let (gradient, degenerate) = match calibrated_gradient(&ot, &comp.source_of, m) {
        Ok(sg) => (
            model.gradient(ratio, ot.cost, &sg.g, n, config.pq_gradient),
            sg.degenerate,
        ),
        Err(e) => (Err(e), vec![false; m]),
    };
    Ok(ScaleTerm {
        value,
        gradient,
        degenerate,
    })
}

/// Projected objective at `ratio` and its gradient, combined from both scales.
pub fn evaluate_objective<S: Surrogate>(
    pair: &ScalePair<S>,
    ratio: &MixingRatio,
    target_n: usize,
    sources: &[Dataset],
    val: &Dataset,
    config: &OptimizerConfig,
) -> Result<ObjectiveEval> {
    if ratio.len() != pair.m() {
        return Err(Error::DimensionMismatch {
            left: ratio.len(),
            right: pair.m(),
        });
    }
    let (w0, w1) = pair.weights(target_n)?;
    let t0 = scale_term(
        &pair.model0,
        pair.n0,
        ratio,
        sources,
        val,
        &pair.cost_spec,
        config,
    )?;
    let t1 = scale_term(
        &pair.model1,
        pair.n1,
        ratio,
        sources,
        val,
        &pair.cost_spec,
        config,
    )?;
    let value = pair.project(t0.value, t1.value, target_n)?;
    let gradient = match (t0.gradient, t1.gradient) {
        (Ok(g0), Ok(g1)) => Some(g0.iter().zip(&g1).map(|(a, b)| w0 * a + w1 * b).collect()),
        (Err(e), _) | (_, Err(e)) if matches!(e, Error::Degenerate(_)) => None,
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let degenerate = t0
        .degenerate
        .iter()
        .zip(&t1.degenerate)
        .map(|(a, b)| *a || *b)
        .collect();
    Ok(ObjectiveEval {
        value,
        gradient,
        degenerate,
    })
}

/// Gradient of the projected objective along the calibrated source directions.
pub fn objective_gradient<S: Surrogate>(
    pair: &ScalePair<S>,
    ratio: &MixingRatio,
    target_n: usize,
    sources: &[Dataset],
    val: &Dataset,
    config: &OptimizerConfig,
) -> Result<Vec<f64>> {
    evaluate_objective(pair, ratio, target_n, sources, val, config)?
        .gradient
        .ok_or_else(|| Error::Degenerate("a single source supplies every composed point".into()))
}

/// Step, clip negatives, renormalize. Returns the new ratio and whether clipping fired.
fn ascent_step(p: &MixingRatio, g: &[f64], d: f64) -> Result<(MixingRatio, bool)> {
    let mut next: Vec<f64> = p
        .as_slice()
        .iter()
        .zip(g)
        .map(|(x, gi)| x + d * gi)
        .collect();
    let clipped = next.iter().any(|&x| x < 0.0);
    next.iter_mut().for_each(|x| *x = x.max(0.0));
    if next.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Numeric(
            "step removed all mass from the simplex".into(),
        ));
    }
    Ok((MixingRatio::normalized(&next)?, clipped))
}

fn linf(a: &MixingRatio, b: &MixingRatio) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Maximize the projected performance at `budget` from the uniform mixture.
pub fn select_fixed_budget<S: Surrogate>(
    pair: &ScalePair<S>,
    budget: usize,
    sources: &[Dataset],
    val: &Dataset,
    config: &OptimizerConfig,
) -> Result<SelectionResult> {
    select_from(
        pair,
        budget,
        sources,
        val,
        config,
        MixingRatio::uniform(pair.m()),
    )
}

/// As [`select_fixed_budget`], starting from `init`.
pub fn select_from<S: Surrogate>(
    pair: &ScalePair<S>,
    budget: usize,
    sources: &[Dataset],
    val: &Dataset,
    config: &OptimizerConfig,
    init: MixingRatio,
) -> Result<SelectionResult> {
    config.validate()?;
    if let Some(cap) = config.capacity {
        if budget > cap {
            return Err(Error::Infeasible(format!(
                "budget {budget} exceeds the {cap} points the sources can supply"
            )));
        }
    }
    if init.len() != pair.m() || sources.len() != pair.m() {
        return Err(Error::DimensionMismatch {
            left: sources.len(),
            right: pair.m(),
        });
    }

    let mut p = init;
    let mut trajectory = Vec::new();
    let mut best: Option<(MixingRatio, f64)> = None;
    let mut converged = false;
    let mut stopped = None;
    let mut rm_c = match config.step_schedule {
        StepSchedule::RobbinsMonro { c } => c,
        StepSchedule::Constant { .. } => None,
    };

    for t in 0..config.max_iters {
        let eval = match evaluate_objective(pair, &p, budget, sources, val, config) {
            Ok(e) => e,
            Err(e @ Error::InsufficientData { .. }) => {
                if t == 0 {
                    return Err(Error::Infeasible(format!(
                        "cannot compose the starting mixture: {e}"
                    )));
                }
                stopped = Some(format!("iterate {t} infeasible: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(_, v)| eval.value > *v) {
            best = Some((p.clone(), eval.value));
        }
        let Some(g) = eval.gradient else {
            trajectory.push(TrajectoryRecord {
                iteration: t,
                ratio: p.clone(),
                objective: eval.value,
                clipped: false,
            });
            stopped = Some(format!("iterate {t} draws every point from one source"));
            break;
        };
        if eval.degenerate.iter().any(|&d| d) {
            log::debug!(
                "iterate {t}: sources {:?} have no composed points",
                eval.degenerate
            );
        }
        let d = match config.step_schedule {
            StepSchedule::Constant { d } => d,
            StepSchedule::RobbinsMonro { .. } => {
                let c = *rm_c.get_or_insert_with(|| {
                    0.1 / (g.iter().map(|x| x.abs()).fold(0.0, f64::max) + 1e-12)
                });
                c / (t + 1) as f64
            }
        };
        let (next, clipped) = ascent_step(&p, &g, d)?;
        trajectory.push(TrajectoryRecord {
            iteration: t,
            ratio: p.clone(),
            objective: eval.value,
            clipped,
        });
        let change = linf(&next, &p);
        p = next;
        if change <= config.converge_tol {
            converged = true;
            break;
        }
    }

    let (ratio, predicted_performance) = best.expect("at least one iterate is evaluated");
    Ok(SelectionResult {
        ratio,
        predicted_performance,
        iterations: trajectory.len(),
        trajectory,
        converged,
        stopped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSearchConfig {
    pub target: f64,
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub inner: OptimizerConfig,
}

/// Smallest grid budget whose optimized predicted performance reaches the target.
/// Each budget warm-starts from the previous optimum.
pub fn search_min_budget<S: Surrogate>(
    pair: &ScalePair<S>,
    sources: &[Dataset],
    val: &Dataset,
    config: &BudgetSearchConfig,
) -> Result<(usize, SelectionResult)> {
    if config.n_grid.is_empty() {
        return Err(Error::Config("budget grid is empty".into()));
    }
    if config.n_grid.windows(2).any(|w| w[0] >= w[1]) || config.n_grid[0] == 0 {
        return Err(Error::Config(
            "budget grid must be positive and strictly increasing".into(),
        ));
    }
    let mut init = MixingRatio::uniform(pair.m());
    let mut best = (config.n_grid[0], f64::NEG_INFINITY);
    for &n in &config.n_grid {
        let res = select_from(pair, n, sources, val, &config.inner, init)?;
        let perf = res.predicted_performance.clamp(0.0, 1.0);
        log::info!("budget {n}: predicted {perf:.6} at {}", res.ratio);
        if perf >= config.target {
            return Ok((n, res));
        }
        if perf > best.1 {
            best = (n, perf);
        }
        init = res.ratio;
    }
    Err(Error::UnreachableTarget {
        target: config.target,
        best_budget: best.0,
        best_performance: best.1,
    })
}
