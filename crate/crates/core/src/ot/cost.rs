use serde::{Deserialize, Serialize};

use crate::dataspace::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMetric {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl FeatureMetric {
    pub fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        match self {
            FeatureMetric::SquaredEuclidean => sq,
            FeatureMetric::Euclidean => sq.sqrt(),
        }
    }
}

/// Ground cost on feature-label pairs: `metric(x, x') + label_weight * [y != y']`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CostSpec {
    pub feature_metric: FeatureMetric,
    pub label_weight: f64,
}

impl CostSpec {
    pub fn features_only(feature_metric: FeatureMetric) -> Self {
        Self {
            feature_metric,
            label_weight: 0.0,
        }
    }

    /// Label weight set to ten times the median train-val feature cost.
    pub fn label_aware(
        feature_metric: FeatureMetric,
        train: &Dataset,
        val: &Dataset,
    ) -> Result<Self> {
        let feat = cost_matrix(train, val, &Self::features_only(feature_metric))?;
        Ok(Self {
            feature_metric,
            label_weight: 10.0 * median(feat.data()),
        })
    }
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidDataset(format!(
                "cost matrix of {} entries is not {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Numeric(
                "cost entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidDataset("ragged cost rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|c| c * s).collect(),
        }
    }

    pub fn transposed(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, &mut hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if v.len() % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

pub fn cost_matrix(train: &Dataset, val: &Dataset, spec: &CostSpec) -> Result<CostMatrix> {
    if train.dim() != val.dim() {
        return Err(Error::DimensionMismatch {
            left: train.dim(),
            right: val.dim(),
        });
    }
    if !(spec.label_weight >= 0.0 && spec.label_weight.is_finite()) {
        return Err(Error::Config(format!(
            "label weight {} must be non-negative",
            spec.label_weight
        )));
    }
    let labels = if spec.label_weight > 0.0 {
        match (train.labels(), val.labels()) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => {
                return Err(Error::Unlabeled(
                    "a positive label weight needs labels on both datasets".into(),
                ))
            }
        }
    } else {
        None
    };
    let mut data = Vec::with_capacity(train.len() * val.len());
    for (i, x) in train.rows().enumerate() {
        for (j, y) in val.rows().enumerate() {
            let mut c = spec.feature_metric.eval(x, y);
            if let Some((a, b)) = labels {
                if a[i] != b[j] {
                    c += spec.label_weight;
                }
            }
            data.push(c);
        }
    }
    CostMatrix::from_vec(train.len(), val.len(), data)
}
