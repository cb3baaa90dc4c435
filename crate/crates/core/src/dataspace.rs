//! Data sources, pilot samples and mixture composition.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Labeled or unlabeled point cloud, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    id: String,
    dim: usize,
    features: Vec<f64>,
    labels: Option<Vec<usize>>,
    /// Mixing ratio this dataset was composed with, if it came out of [`compose`].
    mixture: Option<MixingRatio>,
}

impl Dataset {
    pub fn new(
        id: impl Into<String>,
        dim: usize,
        features: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDataset(
                "feature dimension must be positive".into(),
            ));
        }
        if features.is_empty() || !features.len().is_multiple_of(dim) {
            return Err(Error::InvalidDataset(format!(
                "{} feature values do not form rows of width {dim}",
                features.len()
            )));
        }
        let n = features.len() / dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::InvalidDataset(format!(
                    "{} labels for {n} points",
                    l.len()
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite feature value".into()));
        }
        Ok(Self {
            id: id.into(),
            dim,
            features,
            labels,
            mixture: None,
        })
    }

    /// Build from a slice of rows; rejects ragged input.
    pub fn from_rows(
        id: impl Into<String>,
        rows: &[Vec<f64>],
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::InvalidDataset(format!(
                "row {i} has {} columns, expected {dim}",
                r.len()
            )));
        }
        Self::new(id, dim, rows.concat(), labels)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// One past the largest label, or 0 when unlabeled.
    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&k| k + 1)
    }

    pub fn mixture(&self) -> Option<&MixingRatio> {
        self.mixture.as_ref()
    }

    pub fn with_mixture(mut self, ratio: MixingRatio) -> Self {
        self.mixture = Some(ratio);
        self
    }

    /// Subset by index, in the order given.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidDataset("empty selection".into()));
        }
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self {
            id: self.id.clone(),
            dim: self.dim,
            features,
            labels,
            mixture: None,
        })
    }

    /// Concatenate datasets of equal dimension and labeling mode.
    pub fn concat(id: impl Into<String>, parts: &[&Dataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidDataset("nothing to concatenate".into()))?;
        let labeled = first.is_labeled();
        let mut features = Vec::new();
        let mut labels = labeled.then(Vec::new);
        for p in parts {
            if p.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    left: first.dim,
                    right: p.dim,
                });
            }
            if p.is_labeled() != labeled {
                return Err(Error::InvalidDataset(
                    "cannot mix labeled and unlabeled datasets".into(),
                ));
            }
            features.extend_from_slice(&p.features);
            if let (Some(acc), Some(l)) = (labels.as_mut(), p.labels.as_ref()) {
                acc.extend_from_slice(l);
            }
        }
        Self::new(id, first.dim, features, labels)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fmt_err = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path)?;
        let header = reader.headers()?.clone();
        if header.len() < 2 || &header[0] != "label" {
            return Err(fmt_err(
                "header must start with `label` followed by feature columns".into(),
            ));
        }
        for (k, name) in header.iter().skip(1).enumerate() {
            if name != format!("f{k}") {
                return Err(fmt_err(format!("expected column `f{k}`, found `{name}`")));
            }
        }
        let dim = header.len() - 1;
        let mut features = Vec::new();
        let mut labels: Vec<Option<usize>> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let label = match record[0].trim() {
                "NA" => None,
                s => Some(s.parse::<usize>().map_err(|_| {
                    fmt_err(format!(
                        "row {line}: label `{s}` is not a non-negative integer"
                    ))
                })?),
            };
            labels.push(label);
            for field in record.iter().skip(1) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| fmt_err(format!("row {line}: bad feature `{field}`")))?;
                features.push(v);
            }
        }
        let labels = if labels.iter().all(Option::is_none) {
            None
        } else if labels.iter().all(Option::is_some) {
            Some(labels.into_iter().flatten().collect())
        } else {
            return Err(fmt_err("mixed labeled and NA rows".into()));
        };
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(id, dim, features, labels).map_err(|e| fmt_err(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim).map(|k| format!("f{k}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = Vec::with_capacity(self.dim + 1);
            rec.push(match &self.labels {
                Some(l) => l[i].to_string(),
                None => "NA".to_string(),
            });
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A provider's hidden full dataset together with the size of its public pilot.
#[derive(Debug, Clone)]
pub struct DataSource {
    pub full: Dataset,
    pub pilot_size: usize,
}

impl DataSource {
    pub fn new(full: Dataset, pilot_size: usize) -> Result<Self> {
        if pilot_size == 0 || pilot_size > full.len() {
            return Err(Error::PilotSize {
                requested: pilot_size,
                available: full.len(),
            });
        }
        Ok(Self { full, pilot_size })
    }
}

/// Point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixingRatio(Vec<f64>);

pub const SIMPLEX_TOL: f64 = 1e-9;

impl MixingRatio {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidRatio("empty ratio".into()));
        }
        if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidRatio(format!("component {v} outside [0, 1]")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidRatio(format!("components sum to {s}")));
        }
        Ok(Self(p))
    }

    /// Rescale a non-negative vector onto the simplex.
    pub fn normalized(v: &[f64]) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidRatio(
                "normalization needs finite non-negative entries".into(),
            ));
        }
        let s: f64 = v.iter().sum();
        if s <= 0.0 {
            return Err(Error::InvalidRatio(
                "all-zero vector cannot be normalized".into(),
            ));
        }
        Self::new(v.iter().map(|x| (x / s).min(1.0)).collect())
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn vertex(m: usize, i: usize) -> Self {
        let mut p = vec![0.0; m];
        p[i] = 1.0;
        Self(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(perm.iter().map(|&i| self.0[i]).collect())
    }
}

impl TryFrom<Vec<f64>> for MixingRatio {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MixingRatio> for Vec<f64> {
    fn from(r: MixingRatio) -> Self {
        r.0
    }
}

impl fmt::Display for MixingRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub budget: usize,
    pub ratio: MixingRatio,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingProtocol {
    Permutation,
    Bernoulli { rate: f64 },
}

/// Draw the public pilot sample of a source.
pub fn sample_pilot(source: &DataSource, protocol: SamplingProtocol, seed: u64) -> Result<Dataset> {
    let n = source.full.len();
    let mut rng = rng::seeded(seed);
    let picked: Vec<usize> = match protocol {
        SamplingProtocol::Permutation => {
            if source.pilot_size > n {
                return Err(Error::PilotSize {
                    requested: source.pilot_size,
                    available: n,
                });
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(source.pilot_size);
            idx
        }
        SamplingProtocol::Bernoulli { rate } => {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::Config(format!(
                    "bernoulli rate {rate} outside (0, 1]"
                )));
            }
            (0..n).filter(|_| rng.random::<f64>() < rate).collect()
        }
    };
    if picked.is_empty() {
        let rate = match protocol {
            SamplingProtocol::Bernoulli { rate } => rate,
            SamplingProtocol::Permutation => 0.0,
        };
        return Err(Error::EmptySample { rate });
    }
    Ok(source.full.select(&picked)?.with_id(source.full.id()))
}

/// Largest-remainder apportionment of `budget` over `ratio`; ties go to the lowest index.
pub fn apportion(budget: usize, ratio: &MixingRatio) -> Vec<usize> {
    let quotas: Vec<f64> = ratio
        .as_slice()
        .iter()
        .map(|&p| {
            let q = p * budget as f64;
            // absorb representation error such as 10 * 0.3 = 3.0000000000000004
            let r = q.round();
            if (q - r).abs() < 1e-9 {
                r
            } else {
                q
            }
        })
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    while assigned > budget {
        // snapping can overshoot by one when the ratio sums to slightly above 1
        let i = (0..counts.len())
            .max_by_key(|&i| (counts[i], usize::MAX - i))
            .unwrap();
        counts[i] -= 1;
        assigned -= 1;
    }
    let mut remaining = budget - assigned;
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if ratio.as_slice()[i] > 0.0 {
            counts[i] += 1;
            remaining -= 1;
        }
    }
    counts
}

/// Result of [`compose`]: the mixed dataset plus per-point provenance.
#[derive(Debug, Clone)]
pub struct Composition {
    pub dataset: Dataset,
    /// Source index of each point in `dataset`.
    pub source_of: Vec<usize>,
    pub counts: Vec<usize>,
}

impl Composition {
    pub fn num_sources(&self) -> usize {
        self.counts.len()
    }
}

/// Seeded permutation of a source's indices; subsets of any size are prefixes of it,
/// so compositions at nearby ratios share points.
pub fn source_order(source: &Dataset, seed: u64) -> Vec<usize> {
    let mut rng = rng::seeded(rng::derive_str(seed, source.id()));
    let mut idx: Vec<usize> = (0..source.len()).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Compose `D(N, p)` from the given sources.
pub fn compose(sources: &[Dataset], spec: &MixtureSpec) -> Result<Composition> {
    let m = spec.ratio.len();
    if sources.len() != m {
        return Err(Error::InvalidRatio(format!(
            "ratio has {m} components for {} sources",
            sources.len()
        )));
    }
    if spec.budget == 0 {
        return Err(Error::Config("budget must be positive".into()));
    }
    let counts = apportion(spec.budget, &spec.ratio);
    for (i, (src, &c)) in sources.iter().zip(&counts).enumerate() {
        if c > src.len() {
            return Err(Error::InsufficientData {
                source_index: i,
                id: src.id().to_string(),
                requested: c,
                available: src.len(),
            });
        }
    }
    let dim = sources[0].dim();
    let mut parts = Vec::with_capacity(m);
    let mut source_of = Vec::with_capacity(spec.budget);
    for (i, (src, &c)) in sources.iter().zip(&counts).enumerate() {
        if src.dim() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: src.dim(),
            });
        }
        if c == 0 {
            continue;
        }
        let order = source_order(src, spec.seed);
        parts.push(src.select(&order[..c])?);
        source_of.extend(std::iter::repeat_n(i, c));
    }
    let refs: Vec<&Dataset> = parts.iter().collect();
    let dataset = Dataset::concat("composed", &refs)?.with_mixture(spec.ratio.clone());
    Ok(Composition {
        dataset,
        source_of,
        counts,
    })
}

/// Replace labels of `round(fraction * n)` seeded points with a different class.
pub fn corrupt_labels(
    data: &Dataset,
    fraction: f64,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Unlabeled("corrupt_labels".into()))?;
    if num_classes < 2 {
        return Err(Error::Config(
            "label corruption needs at least two classes".into(),
        ));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "corruption fraction {fraction} outside [0, 1]"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidDataset(format!(
            "label {bad} outside [0, {num_classes})"
        )));
    }
    let n = data.len();
    let k = (fraction * n as f64).round() as usize;
    let mut rng = rng::seeded(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut new_labels = labels.to_vec();
    for &i in &idx[..k] {
        let shift = rng.random_range(1..num_classes);
        new_labels[i] = (new_labels[i] + shift) % num_classes;
    }
    let mut out = Dataset::new(
        data.id(),
        data.dim(),
        data.features().to_vec(),
        Some(new_labels),
    )?;
    out.mixture = data.mixture.clone();
    Ok(out)
}

pub fn strip_labels(data: &Dataset) -> Dataset {
    let mut out = data.clone();
    out.labels = None;
    out
}
