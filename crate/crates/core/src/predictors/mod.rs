//! Surrogates mapping (mixing ratio, OT distance, budget) to performance.
//!
//! Parameter layouts, with `m` sources:
//!
//! | kind              | params                                                   |
//! |-------------------|----------------------------------------------------------|
//! | `Cs`              | `a1, a0`                                                 |
//! | `Pq`              | `b2[m], b1[m], b0, c2[m], c1[m], c0`                     |
//! | `Linear`          | `a[m], b, c`                                             |
//! | `PseudoQuadratic` | `c2[m], c1[m], c0, b`                                    |
//! | `Quadratic`       | `c2[m], c1[m], c0, c3[i][j] for j <= i (row-major), b`   |
//! | `Rational`        | `c[i][j]` row-major (`m * m`), `b`                       |
//! | `Loo`, `Shapley`  | `a[m]` (source values), `b, c`                           |

mod fit;
mod valuation;

pub use fit::{fit_baseline, fit_cs, fit_pq, fit_valued, RIDGE};
pub use valuation::{loo_values, selection_ratio_from_values, shapley_values, SHAPLEY_MAX_SOURCES};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataspace::MixingRatio;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Cs,
    Pq,
    Linear,
    PseudoQuadratic,
    Quadratic,
    Rational,
    Loo,
    Shapley,
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 8] = [
        PredictorKind::Cs,
        PredictorKind::Pq,
        PredictorKind::Linear,
        PredictorKind::PseudoQuadratic,
        PredictorKind::Quadratic,
        PredictorKind::Rational,
        PredictorKind::Loo,
        PredictorKind::Shapley,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Cs => "cs",
            PredictorKind::Pq => "pq",
            PredictorKind::Linear => "linear",
            PredictorKind::PseudoQuadratic => "pseudo_quadratic",
            PredictorKind::Quadratic => "quadratic",
            PredictorKind::Rational => "rational",
            PredictorKind::Loo => "loo",
            PredictorKind::Shapley => "shapley",
        }
    }

    pub fn param_count(self, m: usize) -> usize {
        match self {
            PredictorKind::Cs => 2,
            PredictorKind::Pq => 4 * m + 2,
            PredictorKind::Linear | PredictorKind::Loo | PredictorKind::Shapley => m + 2,
            PredictorKind::PseudoQuadratic => 2 * m + 2,
            PredictorKind::Quadratic => 2 * m + m * (m + 1) / 2 + 2,
            PredictorKind::Rational => m * m + 1,
        }
    }

    /// Fewest tuples a fit accepts.
    pub fn min_tuples(self, m: usize) -> usize {
        match self {
            PredictorKind::Loo | PredictorKind::Shapley => 2,
            k => k.param_count(m),
        }
    }

    /// Whether the model reads the OT distance.
    pub fn uses_transport(self) -> bool {
        matches!(self, PredictorKind::Cs | PredictorKind::Pq)
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredictorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PredictorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown predictor kind `{s}`")))
    }
}

/// One observation used for fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub ratio: MixingRatio,
    pub budget: usize,
    pub ot_distance: f64,
    pub performance: f64,
}

impl TrainingTuple {
    pub fn new(
        ratio: MixingRatio,
        budget: usize,
        ot_distance: f64,
        performance: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&performance) {
            return Err(Error::InvalidDataset(format!(
                "performance {performance} outside [0, 1]"
            )));
        }
        if !(ot_distance >= 0.0 && ot_distance.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "OT distance {ot_distance} must be finite and >= 0"
            )));
        }
        Ok(Self {
            ratio,
            budget,
            ot_distance,
            performance,
        })
    }
}

/// How the PQ surrogate is differentiated along the calibrated directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PqGradient {
    /// Full derivative of the surrogate along each calibrated direction.
    #[default]
    Complete,
    /// Per-source expression `(b2_i p_i^2 + b1_i p_i + b0) g_i + (2 b2_i p_i + b1_i) OT + 2 c2_i p_i + c1_i`.
    PerSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub kind: PredictorKind,
    pub m: usize,
    pub params: Vec<f64>,
    /// Root-mean-square error on the fitting tuples.
    pub fit_residual: f64,
    /// Set when the design had lower numerical rank than the parameter count.
    #[serde(skip)]
    pub rank_deficient: bool,
}

impl PredictorModel {
    pub fn new(kind: PredictorKind, m: usize, params: Vec<f64>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("a model needs at least one source".into()));
        }
        let want = kind.param_count(m);
        if params.len() != want {
            return Err(Error::Config(format!(
                "{kind} with m={m} takes {want} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            kind,
            m,
            params,
            fit_residual: 0.0,
            rank_deficient: false,
        })
    }

    fn check(&self, ratio: &MixingRatio) -> Result<()> {
        if ratio.len() != self.m {
            return Err(Error::DimensionMismatch {
                left: ratio.len(),
                right: self.m,
            });
        }
        Ok(())
    }

    /// Raw model output. For `Rational` this lives in `log(1 - accuracy)` space.
    pub fn predict(&self, ratio: &MixingRatio, ot_distance: f64, budget: usize) -> Result<f64> {
        self.check(ratio)?;
        let p = ratio.as_slice();
        if self.kind == PredictorKind::Rational {
            return Ok(fit::rational_value(&self.params, p, log_budget(budget)));
        }
        let row = fit::design_row(self.kind, p, ot_distance, budget);
        Ok(row.iter().zip(&self.params).map(|(x, w)| x * w).sum())
    }

    /// Prediction on the accuracy scale (back-transforms `Rational`).
    pub fn predict_accuracy(
        &self,
        ratio: &MixingRatio,
        ot_distance: f64,
        budget: usize,
    ) -> Result<f64> {
        let raw = self.predict(ratio, ot_distance, budget)?;
        Ok(match self.kind {
            PredictorKind::Rational => 1.0 - raw.exp(),
            _ => raw,
        })
    }

    /// Derivative of the output with respect to the OT distance.
    pub fn ot_slope(&self, ratio: &MixingRatio) -> Result<f64> {
        self.check(ratio)?;
        let p = ratio.as_slice();
        let m = self.m;
        Ok(match self.kind {
            PredictorKind::Cs => self.params[0],
            PredictorKind::Pq => {
                let (b2, b1, b0) = (
                    &self.params[..m],
                    &self.params[m..2 * m],
                    self.params[2 * m],
                );
                (0..m)
                    .map(|i| b2[i] * p[i] * p[i] + b1[i] * p[i] + b0)
                    .sum()
            }
            _ => 0.0,
        })
    }

    /// Plain partial derivatives in `p` with the OT distance held fixed.
    pub fn ratio_partials(&self, ratio: &MixingRatio, ot_distance: f64) -> Result<Vec<f64>> {
        self.check(ratio)?;
        let p = ratio.as_slice();
        let m = self.m;
        let w = &self.params;
        let out = match self.kind {
            PredictorKind::Cs => vec![0.0; m],
            PredictorKind::Pq => {
                let (b2, b1) = (&w[..m], &w[m..2 * m]);
                let (c2, c1) = (&w[2 * m + 1..3 * m + 1], &w[3 * m + 1..4 * m + 1]);
                (0..m)
                    .map(|i| {
                        (2.0 * b2[i] * p[i] + b1[i]) * ot_distance + 2.0 * c2[i] * p[i] + c1[i]
                    })
                    .collect()
            }
            PredictorKind::Linear | PredictorKind::Loo | PredictorKind::Shapley => w[..m].to_vec(),
            PredictorKind::PseudoQuadratic => {
                (0..m).map(|i| 2.0 * w[i] * p[i] + w[m + i]).collect()
            }
            PredictorKind::Quadratic => {
                let mut g: Vec<f64> = (0..m).map(|i| 2.0 * w[i] * p[i] + w[m + i]).collect();
                let mut k = 2 * m + 1;
                for i in 0..m {
                    for j in 0..=i {
                        g[i] += w[k] * p[j];
                        g[j] += w[k] * p[i];
                        k += 1;
                    }
                }
                g
            }
            PredictorKind::Rational => {
                let mut g = vec![0.0; m];
                for i in 0..m {
                    let row = &w[i * m..(i + 1) * m];
                    let s: f64 = row.iter().zip(p).map(|(c, x)| c * x).sum();
                    for (gj, c) in g.iter_mut().zip(row) {
                        *gj -= c / (s * s);
                    }
                }
                g
            }
        };
        Ok(out)
    }

    /// Derivative along each calibrated direction: raise `p_i`, shrink the other
    /// sources in proportion. `ot_grad` holds the calibrated OT gradient.
    pub fn calibrated_grad(
        &self,
        ratio: &MixingRatio,
        ot_distance: f64,
        ot_grad: &[f64],
        form: PqGradient,
    ) -> Result<Vec<f64>> {
        self.check(ratio)?;
        if ot_grad.len() != self.m {
            return Err(Error::DimensionMismatch {
                left: ot_grad.len(),
                right: self.m,
            });
        }
        let p = ratio.as_slice();
        let m = self.m;
        if self.kind == PredictorKind::Pq && form == PqGradient::PerSource {
            let w = &self.params;
            let (b2, b1, b0) = (&w[..m], &w[m..2 * m], w[2 * m]);
            let (c2, c1) = (&w[2 * m + 1..3 * m + 1], &w[3 * m + 1..4 * m + 1]);
            return Ok((0..m)
                .map(|i| {
                    (b2[i] * p[i] * p[i] + b1[i] * p[i] + b0) * ot_grad[i]
                        + (2.0 * b2[i] * p[i] + b1[i]) * ot_distance
                        + 2.0 * c2[i] * p[i]
                        + c1[i]
                })
                .collect());
        }
        let slope = self.ot_slope(ratio)?;
        let partial = self.ratio_partials(ratio, ot_distance)?;
        Ok(calibrate(&partial, p)
            .into_iter()
            .zip(ot_grad)
            .map(|(d, g)| slope * g + d)
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: PredictorModel = serde_json::from_str(s)?;
        Self::new(model.kind, model.m, model.params.clone())?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub(crate) fn log_budget(budget: usize) -> f64 {
    (budget.max(1) as f64).ln()
}

/// Turn plain partials into derivatives along `e_i - p_{-i} / (1 - p_i)`.
/// Entries at `p_i = 1` have no such direction and are set to 0.
pub fn calibrate(partial: &[f64], p: &[f64]) -> Vec<f64> {
    let dot: f64 = partial.iter().zip(p).map(|(d, x)| d * x).sum();
    partial
        .iter()
        .zip(p)
        .map(|(&d, &x)| {
            let rest = 1.0 - x;
            if rest <= 0.0 {
                0.0
            } else {
                d - (dot - x * d) / rest
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ratio(v: &[f64]) -> MixingRatio {
        MixingRatio::new(v.to_vec()).unwrap()
    }

    #[test]
    fn param_counts() {
        let m = 3;
        assert_eq!(PredictorKind::Cs.param_count(m), 2);
        assert_eq!(PredictorKind::Pq.param_count(m), 14);
        assert_eq!(PredictorKind::Linear.param_count(m), 5);
        assert_eq!(PredictorKind::PseudoQuadratic.param_count(m), 8);
        assert_eq!(PredictorKind::Quadratic.param_count(m), 14);
        assert_eq!(PredictorKind::Rational.param_count(m), 10);
        assert_eq!(PredictorKind::Shapley.param_count(m), 5);
    }

    #[test]
    fn formula_examples() {
        let cs = PredictorModel::new(PredictorKind::Cs, 3, vec![0.0, 0.7]).unwrap();
        assert_eq!(cs.predict(&ratio(&[0.2, 0.3, 0.5]), 12.0, 50).unwrap(), 0.7);
        let lin =
            PredictorModel::new(PredictorKind::Linear, 3, vec![0.1, 0.2, 0.3, 0.0, 0.5]).unwrap();
        assert!((lin.predict(&ratio(&[1.0, 0.0, 0.0]), 0.0, 100).unwrap() - 0.6).abs() < 1e-15);
        let rat =
            PredictorModel::new(PredictorKind::Rational, 2, vec![1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(rat.predict(&ratio(&[0.5, 0.5]), 0.0, 10).unwrap(), 2.0);
        assert!(matches!(
            cs.predict(&ratio(&[0.5, 0.5]), 1.0, 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cs_is_affine_in_distance() {
        let cs = PredictorModel::new(PredictorKind::Cs, 2, vec![-0.25, 0.875]).unwrap();
        let r = ratio(&[0.5, 0.5]);
        let (d1, d2, a) = (2.0, 6.0, 0.25);
        let mix = cs.predict(&r, a * d1 + (1.0 - a) * d2, 1).unwrap();
        let blend = a * cs.predict(&r, d1, 1).unwrap() + (1.0 - a) * cs.predict(&r, d2, 1).unwrap();
        assert_eq!(mix, blend);
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = crate::rng::seeded(3);
        let m = 3;
        for kind in PredictorKind::ALL {
            let params: Vec<f64> = (0..kind.param_count(m))
                .map(|_| rng.random::<f64>() + 0.5)
                .collect();
            let model = PredictorModel::new(kind, m, params).unwrap();
            let p = [0.2, 0.35, 0.45];
            let ot = 1.7;
            let g = model.ratio_partials(&ratio(&p), ot).unwrap();
            for k in 0..m {
                let h = 1e-6;
                let eval = |d: f64| {
                    let mut q = p;
                    q[k] += d;
                    // evaluate the raw formula off the simplex
                    if kind == PredictorKind::Rational {
                        fit::rational_value(&model.params, &q, log_budget(40))
                    } else {
                        fit::design_row(kind, &q, ot, 40)
                            .iter()
                            .zip(&model.params)
                            .map(|(x, w)| x * w)
                            .sum()
                    }
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "{kind} {k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn calibrated_direction_derivative() {
        // h(p) = w . p along p(t) = p + t (e_i - p_{-i}/(1 - p_i))
        let w = [0.3, -1.2, 0.8];
        let p = [0.5, 0.2, 0.3];
        let d = calibrate(&w, &p);
        for i in 0..3 {
            let h = 1e-6;
            let at = |t: f64| -> f64 {
                let scale = (1.0 - p[i] - t) / (1.0 - p[i]);
                (0..3)
                    .map(|k| w[k] * if k == i { p[k] + t } else { p[k] * scale })
                    .sum()
            };
            assert!(((at(h) - at(-h)) / (2.0 * h) - d[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in PredictorKind::ALL {
            assert_eq!(k.name().parse::<PredictorKind>().unwrap(), k);
            assert_eq!(
                serde_json::to_string(&k).unwrap(),
                format!("\"{}\"", k.name())
            );
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = crate::rng::seeded(77);
        let mut params: Vec<f64> = (0..12).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect();
        params.extend([1e-300, -0.1]);
        let mut model = PredictorModel::new(PredictorKind::Pq, 3, params).unwrap();
        model.fit_residual = 0.1 + 0.2;
        let back = PredictorModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back.kind, model.kind);
        assert_eq!(back.m, model.m);
        assert_eq!(back.fit_residual.to_bits(), model.fit_residual.to_bits());
        for (a, b) in back.params.iter().zip(&model.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_json_rejected() {
        assert!(PredictorModel::from_json(
            r#"{"kind":"cs","m":2,"params":[1.0],"fit_residual":0}"#
        )
        .is_err());
        assert!(PredictorModel::from_json(
            r#"{"kind":"cubic","m":2,"params":[1,2],"fit_residual":0}"#
        )
        .is_err());
    }
}
