//! Two-point log-linear projection of performance across data scales.
//!
//! Given predictions `l0`, `l1` at scales `n0 < n1`, the projection at `N` is the
//! line through `(ln n0, l0)` and `(ln n1, l1)` evaluated at `ln N`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataspace::MixingRatio;
use crate::error::{Error, Result};
use crate::ot::CostSpec;
use crate::predictors::{PqGradient, PredictorKind, PredictorModel};

/// A performance surrogate that can be evaluated and differentiated in `p`.
pub trait Surrogate {
    fn m(&self) -> usize;

    /// Whether the value depends on the OT distance of the composed set.
    fn uses_transport(&self) -> bool;

    fn kind(&self) -> Option<PredictorKind> {
        None
    }

    /// Predicted performance on the accuracy scale.
    fn value(&self, ratio: &MixingRatio, ot_distance: f64, budget: usize) -> Result<f64>;

    /// Derivatives of [`Surrogate::value`] along the calibrated directions.
    fn gradient(
        &self,
        ratio: &MixingRatio,
        ot_distance: f64,
        ot_grad: &[f64],
        budget: usize,
        form: PqGradient,
    ) -> Result<Vec<f64>>;
}

impl Surrogate for PredictorModel {
    fn m(&self) -> usize {
        self.m
    }

    fn uses_transport(&self) -> bool {
        self.kind.uses_transport()
    }

    fn kind(&self) -> Option<PredictorKind> {
        Some(self.kind)
    }

    fn value(&self, ratio: &MixingRatio, ot_distance: f64, budget: usize) -> Result<f64> {
        self.predict_accuracy(ratio, ot_distance, budget)
    }

    fn gradient(
        &self,
        ratio: &MixingRatio,
        ot_distance: f64,
        ot_grad: &[f64],
        budget: usize,
        form: PqGradient,
    ) -> Result<Vec<f64>> {
        let g = self.calibrated_grad(ratio, ot_distance, ot_grad, form)?;
        if self.kind == PredictorKind::Rational {
            // accuracy = 1 - exp(raw)
            let raw = self.predict(ratio, ot_distance, budget)?;
            let s = -raw.exp();
            return Ok(g.into_iter().map(|d| s * d).collect());
        }
        Ok(g)
    }
}

/// Surrogates fitted at two scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePair<S = PredictorModel> {
    pub n0: usize,
    pub n1: usize,
    pub model0: S,
    pub model1: S,
    pub cost_spec: CostSpec,
}

impl<S: Surrogate> ScalePair<S> {
    pub fn new(n0: usize, n1: usize, model0: S, model1: S, cost_spec: CostSpec) -> Result<Self> {
        if n0 < 1 || n0 >= n1 {
            return Err(Error::DegenerateScales { n0, n1 });
        }
        if model0.m() != model1.m() {
            return Err(Error::Config(format!(
                "models disagree on the source count: {} vs {}",
                model0.m(),
                model1.m()
            )));
        }
        if model0.kind() != model1.kind() {
            return Err(Error::Config(
                "models at the two scales must be of the same kind".into(),
            ));
        }
        Ok(Self {
            n0,
            n1,
            model0,
            model1,
            cost_spec,
        })
    }

    pub fn m(&self) -> usize {
        self.model0.m()
    }

    pub fn project(&self, l0: f64, l1: f64, target_n: usize) -> Result<f64> {
        project(self.n0, self.n1, l0, l1, target_n)
    }

    pub fn scaling_exponent(&self, l0: f64, l1: f64) -> Result<f64> {
        scaling_exponent(self.n0, self.n1, l0, l1)
    }

    /// Predictions of both models for `ratio`, then the projection to `target_n`.
    pub fn project_query(
        &self,
        ratio: &MixingRatio,
        target_n: usize,
        ot0: f64,
        ot1: f64,
    ) -> Result<f64> {
        let l0 = self.model0.value(ratio, ot0, self.n0)?;
        let l1 = self.model1.value(ratio, ot1, self.n1)?;
        self.project(l0, l1, target_n)
    }

    /// Weights `(w0, w1)` with `projection = w0 * l0 + w1 * l1`.
    pub fn weights(&self, target_n: usize) -> Result<(f64, f64)> {
        projection_weights(self.n0, self.n1, target_n)
    }
}

impl ScalePair<PredictorModel> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let pair: Self =
            serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Self::new(pair.n0, pair.n1, pair.model0, pair.model1, pair.cost_spec)
    }
}

fn check_scales(n0: usize, n1: usize, target_n: usize) -> Result<()> {
    if n0 < 1 || n0 >= n1 {
        return Err(Error::DegenerateScales { n0, n1 });
    }
    if target_n < 1 {
        return Err(Error::Config("target scale must be at least 1".into()));
    }
    Ok(())
}

pub fn projection_weights(n0: usize, n1: usize, target_n: usize) -> Result<(f64, f64)> {
    check_scales(n0, n1, target_n)?;
    let (a, b, x) = ((n0 as f64).ln(), (n1 as f64).ln(), (target_n as f64).ln());
    let d = b - a;
    Ok((-(x - b) / d, (x - a) / d))
}

/// `[ln(N/n0) l1 - ln(N/n1) l0] / ln(n1/n0)`, evaluated so that `N = n0` and
/// `N = n1` return `l0` and `l1` bit for bit.
pub fn project(n0: usize, n1: usize, l0: f64, l1: f64, target_n: usize) -> Result<f64> {
    check_scales(n0, n1, target_n)?;
    let (a, b, x) = ((n0 as f64).ln(), (n1 as f64).ln(), (target_n as f64).ln());
    let d = b - a;
    let t0 = (x - a) / d;
    let t1 = (x - b) / d;
    Ok(if t0.abs() <= t1.abs() {
        l0 + t0 * (l1 - l0)
    } else {
        l1 + t1 * (l1 - l0)
    })
}

/// `(l0 - l1) / (ln n1 - ln n0)`, without sign adjustment.
pub fn scaling_exponent(n0: usize, n1: usize, l0: f64, l1: f64) -> Result<f64> {
    check_scales(n0, n1, 1)?;
    Ok((l0 - l1) / ((n1 as f64).ln() - (n0 as f64).ln()))
}

/// `n1` = smallest pilot size and `n0` = 2/3 of it, rounded half to even.
pub fn default_scales(pilot_sizes: &[usize]) -> Result<(usize, usize)> {
    let n1 = *pilot_sizes
        .iter()
        .min()
        .ok_or_else(|| Error::Config("no pilot sizes given".into()))?;
    let n0 = (2.0 / 3.0 * n1 as f64).round_ties_even() as usize;
    if n0 < 1 || n0 >= n1 {
        return Err(Error::DegenerateScales { n0, n1 });
    }
    Ok((n0, n1))
}

/// One row of a projection sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRow {
    pub ratio: MixingRatio,
    pub target_n: usize,
    pub predicted: f64,
    pub actual: Option<f64>,
}

/// Columns `ratio_0..ratio_{m-1}, target_n, predicted, actual`; `actual` may be empty.
pub fn write_projection_csv(path: impl AsRef<Path>, rows: &[ProjectionRow]) -> Result<()> {
    let m = rows.first().map_or(0, |r| r.ratio.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..m).map(|i| format!("ratio_{i}")).collect();
    header.extend(["target_n", "predicted", "actual"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.ratio.as_slice().iter().map(f64::to_string).collect();
        rec.push(r.target_n.to_string());
        rec.push(r.predicted.to_string());
        rec.push(r.actual.map(|a| a.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_projection_csv(path: impl AsRef<Path>) -> Result<Vec<ProjectionRow>> {
    let path = path.as_ref();
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path)?;
    let m = r
        .headers()?
        .iter()
        .filter(|h| h.starts_with("ratio_"))
        .count();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != m + 3 {
            return Err(bad(format!(
                "expected {} fields, found {}",
                m + 3,
                rec.len()
            )));
        }
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("field {i}: {e}")))
        };
        let ratio = (0..m).map(num).collect::<Result<Vec<_>>>()?;
        let target_n = rec[m].parse().map_err(|e| bad(format!("target_n: {e}")))?;
        let actual = if rec[m + 2].is_empty() {
            None
        } else {
            Some(num(m + 2)?)
        };
        rows.push(ProjectionRow {
            ratio: MixingRatio::new(ratio)?,
            target_n,
            predicted: num(m + 1)?,
            actual,
        });
    }
    Ok(rows)
}
