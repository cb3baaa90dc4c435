use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{log_budget, PredictorKind, PredictorModel, TrainingTuple};
use crate::error::{Error, Result};
use crate::rng;

/// Ridge damping added to every normal-equation solve.
pub const RIDGE: f64 = 1e-8;

const RATIONAL_STARTS: usize = 8;
const RATIONAL_SEED: u64 = 0x7261_7469_6f6e_616c;
const RATIONAL_MAX_ITERS: usize = 500;
const ACCURACY_CEILING: f64 = 1.0 - 1e-6;

/// Regressors of the kinds that are linear in their parameters.
pub(crate) fn design_row(kind: PredictorKind, p: &[f64], ot: f64, budget: usize) -> Vec<f64> {
    let m = p.len();
    let mf = m as f64;
    let ln_n = log_budget(budget);
    let mut row = Vec::with_capacity(kind.param_count(m));
    match kind {
        PredictorKind::Cs => row.extend([ot, 1.0]),
        PredictorKind::Pq => {
            row.extend(p.iter().map(|x| x * x * ot));
            row.extend(p.iter().map(|x| x * ot));
            row.push(mf * ot);
            row.extend(p.iter().map(|x| x * x));
            row.extend_from_slice(p);
            row.push(mf);
        }
        PredictorKind::Linear | PredictorKind::Loo | PredictorKind::Shapley => {
            row.extend_from_slice(p);
            row.extend([ln_n, 1.0]);
        }
        PredictorKind::PseudoQuadratic | PredictorKind::Quadratic => {
            row.extend(p.iter().map(|x| x * x));
            row.extend_from_slice(p);
            row.push(mf);
            if kind == PredictorKind::Quadratic {
                for i in 0..m {
                    for j in 0..=i {
                        row.push(p[i] * p[j]);
                    }
                }
            }
            row.push(ln_n);
        }
        PredictorKind::Rational => unreachable!("rational is not linear in its parameters"),
    }
    row
}

pub(crate) fn rational_value(params: &[f64], p: &[f64], ln_n: f64) -> f64 {
    let m = p.len();
    let mut v = params[m * m] * ln_n;
    for i in 0..m {
        let s: f64 = params[i * m..(i + 1) * m]
            .iter()
            .zip(p)
            .map(|(c, x)| c * x)
            .sum();
        v += 1.0 / s;
    }
    v
}

fn check_tuples(kind: PredictorKind, tuples: &[TrainingTuple]) -> Result<usize> {
    let m = tuples
        .first()
        .map(|t| t.ratio.len())
        .ok_or(Error::NotEnoughTuples {
            needed: kind.min_tuples(1),
            got: 0,
        })?;
    if let Some(t) = tuples.iter().find(|t| t.ratio.len() != m) {
        return Err(Error::DimensionMismatch {
            left: t.ratio.len(),
            right: m,
        });
    }
    let needed = kind.min_tuples(m);
    if tuples.len() < needed {
        return Err(Error::NotEnoughTuples {
            needed,
            got: tuples.len(),
        });
    }
    Ok(m)
}

fn rms(residuals: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for r in residuals {
        s += r * r;
        n += 1;
    }
    (s / n as f64).sqrt()
}

/// Ridge least squares `argmin |X w - y|^2 + RIDGE |w|^2` through the SVD of `X`.
/// Returns the solution and the numerical rank of `X`.
pub(crate) fn ridge_lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
    let svd = x.clone().svd(true, true);
    let (u, vt) = match (&svd.u, &svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => {
            return Err(Error::Numeric(
                "SVD did not produce singular vectors".into(),
            ))
        }
    };
    let sigma = &svd.singular_values;
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = smax * f64::EPSILON * x.nrows().max(x.ncols()) as f64;
    let rank = sigma.iter().filter(|&&s| s > cutoff).count();
    let uty = u.transpose() * y;
    let scaled = DVector::from_iterator(
        sigma.len(),
        sigma
            .iter()
            .zip(uty.iter())
            .map(|(&s, &b)| s / (s * s + RIDGE) * b),
    );
    let w = vt.transpose() * scaled;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "least-squares solution is not finite".into(),
        ));
    }
    Ok((w, rank))
}

fn fit_linear(kind: PredictorKind, tuples: &[TrainingTuple]) -> Result<PredictorModel> {
    let m = check_tuples(kind, tuples)?;
    let k = kind.param_count(m);
    let rows: Vec<Vec<f64>> = tuples
        .iter()
        .map(|t| design_row(kind, t.ratio.as_slice(), t.ot_distance, t.budget))
        .collect();
    let x = DMatrix::from_fn(tuples.len(), k, |i, j| rows[i][j]);
    let y = DVector::from_iterator(tuples.len(), tuples.iter().map(|t| t.performance));
    let (w, rank) = ridge_lstsq(&x, &y)?;
    let fitted = &x * &w;
    let mut model = PredictorModel::new(kind, m, w.iter().copied().collect())?;
    model.fit_residual = rms(fitted.iter().zip(y.iter()).map(|(a, b)| a - b));
    model.rank_deficient = rank < k;
    if model.rank_deficient {
        log::debug!("{kind} design has rank {rank} < {k}; ridge picks the minimum-norm fit");
    }
    Ok(model)
}

/// Fit `a1 * OT + a0` by the closed-form centered normal equations.
pub fn fit_cs(tuples: &[TrainingTuple]) -> Result<PredictorModel> {
    let m = check_tuples(PredictorKind::Cs, tuples)?;
    let n = tuples.len() as f64;
    let xbar = tuples.iter().map(|t| t.ot_distance).sum::<f64>() / n;
    let ybar = tuples.iter().map(|t| t.performance).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for t in tuples {
        let dx = t.ot_distance - xbar;
        sxx += dx * dx;
        sxy += dx * (t.performance - ybar);
    }
    if sxx <= f64::EPSILON * xbar.abs().max(1.0) * n {
        return Err(Error::RankDeficient(
            "every tuple has the same OT distance; the slope is unidentifiable".into(),
        ));
    }
    let a1 = sxy / sxx;
    let a0 = ybar - a1 * xbar;
    let mut model = PredictorModel::new(PredictorKind::Cs, m, vec![a1, a0])?;
    model.fit_residual = rms(tuples
        .iter()
        .map(|t| a1 * t.ot_distance + a0 - t.performance));
    Ok(model)
}

pub fn fit_pq(tuples: &[TrainingTuple]) -> Result<PredictorModel> {
    fit_linear(PredictorKind::Pq, tuples)
}

/// Fit any kind whose parameters are determined by the tuples alone.
/// `Loo` and `Shapley` need source values; use [`fit_valued`].
pub fn fit_baseline(kind: PredictorKind, tuples: &[TrainingTuple]) -> Result<PredictorModel> {
    match kind {
        PredictorKind::Cs => fit_cs(tuples),
        PredictorKind::Pq
        | PredictorKind::Linear
        | PredictorKind::PseudoQuadratic
        | PredictorKind::Quadratic => fit_linear(kind, tuples),
        PredictorKind::Rational => fit_rational(tuples),
        PredictorKind::Loo | PredictorKind::Shapley => Err(Error::Config(format!(
            "{kind} takes its source weights from a valuation; use fit_valued"
        ))),
    }
}

/// `values . p + b log N + c` with `values` fixed and `(b, c)` fit by least squares.
pub fn fit_valued(
    kind: PredictorKind,
    values: &[f64],
    tuples: &[TrainingTuple],
) -> Result<PredictorModel> {
    if !matches!(kind, PredictorKind::Loo | PredictorKind::Shapley) {
        return Err(Error::Config(format!("{kind} is not a valuation baseline")));
    }
    let m = check_tuples(kind, tuples)?;
    if values.len() != m {
        return Err(Error::DimensionMismatch {
            left: values.len(),
            right: m,
        });
    }
    let x = DMatrix::from_fn(tuples.len(), 2, |i, j| {
        if j == 0 {
            log_budget(tuples[i].budget)
        } else {
            1.0
        }
    });
    let base: Vec<f64> = tuples
        .iter()
        .map(|t| {
            t.ratio
                .as_slice()
                .iter()
                .zip(values)
                .map(|(p, v)| p * v)
                .sum()
        })
        .collect();
    let y = DVector::from_iterator(
        tuples.len(),
        tuples.iter().zip(&base).map(|(t, b)| t.performance - b),
    );
    let (w, rank) = ridge_lstsq(&x, &y)?;
    let mut params = values.to_vec();
    params.extend(w.iter());
    let mut model = PredictorModel::new(kind, m, params)?;
    model.fit_residual = rms((0..tuples.len()).map(|i| x[(i, 0)] * w[0] + w[1] - y[i]));
    model.rank_deficient = rank < 2;
    Ok(model)
}

fn rational_target(performance: f64) -> f64 {
    (1.0 - performance.min(ACCURACY_CEILING)).ln()
}

struct RationalProblem<'a> {
    m: usize,
    tuples: &'a [TrainingTuple],
    z: Vec<f64>,
}

impl RationalProblem<'_> {
    fn residuals(&self, theta: &[f64]) -> Vec<f64> {
        self.tuples
            .iter()
            .zip(&self.z)
            .map(|(t, z)| rational_value(theta, t.ratio.as_slice(), log_budget(t.budget)) - z)
            .collect()
    }

    fn sse(&self, theta: &[f64]) -> f64 {
        let s: f64 = self.residuals(theta).iter().map(|r| r * r).sum();
        if s.is_finite() {
            s
        } else {
            f64::INFINITY
        }
    }

    fn jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let m = self.m;
        let k = m * m + 1;
        let mut jac = DMatrix::zeros(self.tuples.len(), k);
        for (r, t) in self.tuples.iter().enumerate() {
            let p = t.ratio.as_slice();
            for i in 0..m {
                let s: f64 = theta[i * m..(i + 1) * m]
                    .iter()
                    .zip(p)
                    .map(|(c, x)| c * x)
                    .sum();
                for j in 0..m {
                    jac[(r, i * m + j)] = -p[j] / (s * s);
                }
            }
            jac[(r, m * m)] = log_budget(t.budget);
        }
        jac
    }

    /// Levenberg-Marquardt from `theta`; returns the final point and its SSE.
    fn solve(&self, mut theta: Vec<f64>) -> (Vec<f64>, f64) {
        let mut cost = self.sse(&theta);
        if !cost.is_finite() {
            return (theta, cost);
        }
        let k = theta.len();
        let mut mu = 1e-3;
        for _ in 0..RATIONAL_MAX_ITERS {
            let jac = self.jacobian(&theta);
            let r = DVector::from_vec(self.residuals(&theta));
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * r;
            let mut improved = false;
            while mu < 1e12 {
                let mut lhs = jtj.clone();
                for d in 0..k {
                    lhs[(d, d)] += mu * jtj[(d, d)].max(1e-12);
                }
                let Some(chol) = lhs.cholesky() else {
                    mu *= 10.0;
                    continue;
                };
                let step = chol.solve(&(-&jtr));
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                let c = self.sse(&cand);
                if c < cost {
                    let gain = (cost - c) / cost.max(f64::MIN_POSITIVE);
                    theta = cand;
                    cost = c;
                    mu = (mu / 3.0).max(1e-15);
                    improved = gain > 1e-14;
                    break;
                }
                mu *= 4.0;
            }
            if !improved {
                break;
            }
        }
        (theta, cost)
    }
}

fn fit_rational(tuples: &[TrainingTuple]) -> Result<PredictorModel> {
    let m = check_tuples(PredictorKind::Rational, tuples)?;
    let z: Vec<f64> = tuples
        .iter()
        .map(|t| rational_target(t.performance))
        .collect();
    let zbar = z.iter().sum::<f64>() / z.len() as f64;
    // all-zero accuracy gives zbar = 0; keep the start finite
    let zbar = if zbar.abs() < 1e-12 { -1e-12 } else { zbar };
    let problem = RationalProblem { m, tuples, z };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut trace = Vec::with_capacity(RATIONAL_STARTS);
    for start in 0..RATIONAL_STARTS {
        let mut rng = rng::seeded(rng::derive(RATIONAL_SEED, &[start as u64]));
        let mut theta: Vec<f64> = (0..m * m)
            .map(|_| (m as f64 / zbar) * (1.0 + 0.5 * rng.random_range(-1.0..1.0)))
            .collect();
        theta.push(0.0);
        let (theta, sse) = problem.solve(theta);
        let rmse = (sse / tuples.len() as f64).sqrt();
        trace.push(rmse);
        if rmse.is_finite() && best.as_ref().is_none_or(|(_, b)| rmse < *b) {
            best = Some((theta, rmse));
        }
    }
    let Some((theta, rmse)) = best else {
        return Err(Error::FitFailure { residuals: trace });
    };
    let mut model = PredictorModel::new(PredictorKind::Rational, m, theta)?;
    model.fit_residual = rmse;
    Ok(model)
}
