//! Learner oracles: train on a composed set, report validation accuracy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataspace::{Dataset, MixingRatio};
use crate::error::{Error, Result};
use crate::predictors::{calibrate, PqGradient};
use crate::projection::Surrogate;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerKind {
    NearestCentroid,
    LogisticRegression { lr: f64, epochs: usize },
    SyntheticLogLinear(SyntheticLogLinear),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    #[serde(flatten)]
    pub kind: LearnerKind,
    #[serde(default)]
    pub seed: u64,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind, seed: u64) -> Result<Self> {
        if let LearnerKind::LogisticRegression { lr, epochs } = kind {
            if !(lr > 0.0 && lr.is_finite()) || epochs == 0 {
                return Err(Error::Config(format!(
                    "logistic regression needs lr > 0 and epochs >= 1, got lr={lr}, epochs={epochs}"
                )));
            }
        }
        Ok(Self { kind, seed })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n_train: usize,
    /// Mixture the training set was composed from, when known.
    pub ratio: Option<MixingRatio>,
}

/// Performance oracle `-alpha(p) ln n + C(p)` with `alpha(p) = alpha_coeffs . p` and
/// `C(p) = c_coeffs . p + |quad_weight| sum_i p_i (1 - p_i)`, concave in `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLogLinear {
    pub alpha_coeffs: Vec<f64>,
    pub c_coeffs: Vec<f64>,
    #[serde(default)]
    pub quad_weight: f64,
}

impl SyntheticLogLinear {
    pub fn new(alpha_coeffs: Vec<f64>, c_coeffs: Vec<f64>, quad_weight: f64) -> Result<Self> {
        if alpha_coeffs.len() != c_coeffs.len() || alpha_coeffs.is_empty() {
            return Err(Error::Config(
                "alpha and C coefficients need the same nonzero length".into(),
            ));
        }
        Ok(Self {
            alpha_coeffs,
            c_coeffs,
            quad_weight,
        })
    }

    pub fn m(&self) -> usize {
        self.alpha_coeffs.len()
    }

    pub fn alpha(&self, p: &[f64]) -> f64 {
        self.alpha_coeffs.iter().zip(p).map(|(a, x)| a * x).sum()
    }

    pub fn c(&self, p: &[f64]) -> f64 {
        let lin: f64 = self.c_coeffs.iter().zip(p).map(|(c, x)| c * x).sum();
        lin + self.quad_weight.abs() * p.iter().map(|x| x * (1.0 - x)).sum::<f64>()
    }

    /// Unclamped value.
    pub fn value(&self, p: &[f64], n: usize) -> f64 {
        -self.alpha(p) * (n as f64).ln() + self.c(p)
    }

    /// Gradient of [`SyntheticLogLinear::value`] in `p` (plain partials).
    pub fn partials(&self, p: &[f64], n: usize) -> Vec<f64> {
        let ln_n = (n as f64).ln();
        let w = self.quad_weight.abs();
        (0..self.m())
            .map(|i| -self.alpha_coeffs[i] * ln_n + self.c_coeffs[i] + w * (1.0 - 2.0 * p[i]))
            .collect()
    }

    fn ratio_of(&self, train: &Dataset) -> Result<MixingRatio> {
        let r = train.mixture().cloned().ok_or_else(|| {
            Error::InvalidDataset(
                "the synthetic learner reads the mixture attached by compose".into(),
            )
        })?;
        if r.len() != self.m() {
            return Err(Error::DimensionMismatch {
                left: r.len(),
                right: self.m(),
            });
        }
        Ok(r)
    }
}

/// The synthetic oracle frozen at one training size, usable as a surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSurrogate {
    pub oracle: SyntheticLogLinear,
    pub n: usize,
}

impl Surrogate for SyntheticSurrogate {
    fn m(&self) -> usize {
        self.oracle.m()
    }

    fn uses_transport(&self) -> bool {
        false
    }

    fn value(&self, ratio: &MixingRatio, _ot: f64, _budget: usize) -> Result<f64> {
        Ok(self.oracle.value(ratio.as_slice(), self.n))
    }

    fn gradient(
        &self,
        ratio: &MixingRatio,
        _: f64,
        _: &[f64],
        _: usize,
        _: PqGradient,
    ) -> Result<Vec<f64>> {
        Ok(calibrate(
            &self.oracle.partials(ratio.as_slice(), self.n),
            ratio.as_slice(),
        ))
    }
}

fn labels_of<'a>(d: &'a Dataset, role: &str) -> Result<&'a [usize]> {
    d.labels()
        .ok_or_else(|| Error::Unlabeled(format!("{role} set `{}` has no labels", d.id())))
}

pub fn train_eval(spec: &LearnerSpec, train: &Dataset, val: &Dataset) -> Result<EvalResult> {
    if train.is_empty() {
        return Err(Error::InvalidDataset("empty training set".into()));
    }
    let accuracy = match &spec.kind {
        LearnerKind::SyntheticLogLinear(oracle) => {
            let r = oracle.ratio_of(train)?;
            return Ok(EvalResult {
                accuracy: oracle.value(r.as_slice(), train.len()).clamp(0.0, 1.0),
                n_train: train.len(),
                ratio: Some(r),
            });
        }
        LearnerKind::NearestCentroid => {
            let model = NearestCentroid::fit(train)?;
            model.accuracy(val)?
        }
        LearnerKind::LogisticRegression { lr, epochs } => {
            let k = train.num_classes().max(val.num_classes());
            let (model, _) = Logistic::fit(train, k, *lr, *epochs, spec.seed)?;
            model.accuracy(val)?
        }
    };
    if train.dim() != val.dim() {
        return Err(Error::DimensionMismatch {
            left: train.dim(),
            right: val.dim(),
        });
    }
    Ok(EvalResult {
        accuracy,
        n_train: train.len(),
        ratio: train.mixture().cloned(),
    })
}

/// Mean accuracy over `reps` trainings. `compose(rep)` supplies the training set of
/// each replicate; the learner seed is derived from the replicate index.
pub fn replicate_accuracy(
    spec: &LearnerSpec,
    val: &Dataset,
    mut compose: impl FnMut(usize) -> Result<Dataset>,
    reps: usize,
) -> Result<f64> {
    if reps == 0 {
        return Err(Error::Config("replicate count must be at least 1".into()));
    }
    let mut total = 0.0;
    for rep in 0..reps {
        let train = compose(rep)?;
        let rep_spec = LearnerSpec {
            kind: spec.kind.clone(),
            seed: if rep == 0 {
                spec.seed
            } else {
                rng::derive(spec.seed, &[rep as u64])
            },
        };
        total += train_eval(&rep_spec, &train, val)?.accuracy;
    }
    Ok(total / reps as f64)
}

struct NearestCentroid {
    dim: usize,
    /// `None` for classes absent from training.
    centroids: Vec<Option<Vec<f64>>>,
}

impl NearestCentroid {
    fn fit(train: &Dataset) -> Result<Self> {
        let labels = labels_of(train, "training")?;
        let k = train.num_classes();
        let d = train.dim();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (x, &y) in train.rows().zip(labels) {
            counts[y] += 1;
            sums[y].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        let centroids = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        Ok(Self { dim: d, centroids })
    }

    fn predict(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in self.centroids.iter().enumerate() {
            if let Some(c) = c {
                let dist: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
        }
        best.1
    }

    fn accuracy(&self, val: &Dataset) -> Result<f64> {
        if val.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: val.dim(),
            });
        }
        let labels = labels_of(val, "validation")?;
        let hits = val
            .rows()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        Ok(hits as f64 / val.len() as f64)
    }
}

/// Multinomial logistic regression trained by full-batch gradient descent.
pub struct Logistic {
    classes: usize,
    dim: usize,
    /// `classes x (dim + 1)`, bias last.
    weights: Vec<f64>,
}

impl Logistic {
    /// Returns the model and the mean cross-entropy before each epoch's update.
    pub fn fit(
        train: &Dataset,
        classes: usize,
        lr: f64,
        epochs: usize,
        seed: u64,
    ) -> Result<(Self, Vec<f64>)> {
        let labels = labels_of(train, "training")?;
        let d = train.dim();
        let stride = d + 1;
        let mut rng = rng::seeded(seed);
        let mut weights: Vec<f64> = (0..classes * stride)
            .map(|_| rng.random_range(-1e-3..1e-3))
            .collect();
        let n = train.len() as f64;
        let mut history = Vec::with_capacity(epochs);
        let mut grad = vec![0.0; weights.len()];
        let mut probs = vec![0.0; classes];
        for _ in 0..epochs {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for (x, &y) in train.rows().zip(labels) {
                softmax_into(&weights, x, classes, &mut probs);
                loss -= probs[y].max(1e-300).ln();
                for (k, pk) in probs.iter().enumerate() {
                    let err = pk - if k == y { 1.0 } else { 0.0 };
                    let row = &mut grad[k * stride..(k + 1) * stride];
                    row.iter_mut().zip(x).for_each(|(g, v)| *g += err * v);
                    row[d] += err;
                }
            }
            history.push(loss / n);
            weights
                .iter_mut()
                .zip(&grad)
                .for_each(|(w, g)| *w -= lr * g / n);
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric(
                "logistic regression weights diverged; lower the learning rate".into(),
            ));
        }
        Ok((
            Self {
                classes,
                dim: d,
                weights,
            },
            history,
        ))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let stride = self.dim + 1;
        (0..self.classes)
            .map(|k| {
                let w = &self.weights[k * stride..(k + 1) * stride];
                w[..self.dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[self.dim]
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, s)| {
                if s > best.1 {
                    (k, s)
                } else {
                    best
                }
            })
            .0
    }

    fn accuracy(&self, val: &Dataset) -> Result<f64> {
        if val.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: val.dim(),
            });
        }
        let labels = labels_of(val, "validation")?;
        let hits = val
            .rows()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        Ok(hits as f64 / val.len() as f64)
    }
}

fn softmax_into(weights: &[f64], x: &[f64], classes: usize, out: &mut [f64]) {
    let d = x.len();
    let stride = d + 1;
    for (k, o) in out.iter_mut().enumerate().take(classes) {
        let w = &weights[k * stride..(k + 1) * stride];
        *o = w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d];
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}
