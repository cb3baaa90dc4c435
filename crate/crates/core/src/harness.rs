//! End-to-end pipelines: experiment configs, fit datasets, evaluation tables.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataspace::{
    compose, sample_pilot, DataSource, Dataset, MixingRatio, MixtureSpec, SamplingProtocol,
};
use crate::error::{Error, Result};
use crate::learners::{train_eval, LearnerSpec};
use crate::ot::{transport, CostSpec, OtSolver};
use crate::predictors::{
    fit_baseline, fit_valued, loo_values, shapley_values, PredictorKind, PredictorModel,
    TrainingTuple,
};
use crate::projection::{default_scales, ProjectionRow, ScalePair};
use crate::rng;
use crate::selection::{BudgetSearchConfig, OptimizerConfig};

/// Environment variable capping worker threads (`0` or unset: all cores).
pub const THREADS_ENV: &str = "PROJEKTOR_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub std: f64,
    pub label: usize,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataGenerator {
    /// Isotropic Gaussian mixture; each component carries a class label.
    Gaussian {
        id: String,
        size: usize,
        components: Vec<GaussianComponent>,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

impl DataGenerator {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataGenerator::Csv { path } => Dataset::read_csv(path),
            DataGenerator::Gaussian {
                id,
                size,
                components,
                seed: own,
            } => {
                let dim = components.first().map_or(0, |c| c.mean.len());
                if dim == 0 || components.iter().any(|c| c.mean.len() != dim) {
                    return Err(Error::Config(format!(
                        "source `{id}`: components need equal, nonzero dimension"
                    )));
                }
                if components.iter().any(|c| !(c.std >= 0.0)) {
                    return Err(Error::Config(format!("source `{id}`: negative std")));
                }
                let pick = WeightedIndex::new(components.iter().map(|c| c.weight))
                    .map_err(|e| Error::Config(format!("source `{id}`: {e}")))?;
                let mut rng = rng::seeded(rng::derive(seed, &[*own]));
                let mut features = Vec::with_capacity(size * dim);
                let mut labels = Vec::with_capacity(*size);
                for _ in 0..*size {
                    let c = &components[pick.sample(&mut rng)];
                    let noise =
                        Normal::new(0.0, c.std).map_err(|e| Error::Config(e.to_string()))?;
                    features.extend(c.mean.iter().map(|mu| mu + noise.sample(&mut rng)));
                    labels.push(c.label);
                }
                Dataset::new(id.clone(), dim, features, Some(labels))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    #[serde(flatten)]
    pub generator: DataGenerator,
    /// Points revealed as the pilot; all of them when absent.
    #[serde(default)]
    pub pilot_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Auto {
    Auto,
}

/// A scale given explicitly or derived from the pilot sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scale {
    Fixed(usize),
    Auto(Auto),
}

impl Default for Scale {
    fn default() -> Self {
        Scale::Auto(Auto::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub budget: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_resolution() -> f64 {
    0.1
}
fn default_kinds() -> Vec<PredictorKind> {
    vec![PredictorKind::Cs, PredictorKind::Pq]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_replicates() -> usize {
    1
}
fn default_cap() -> f64 {
    0.55
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sources: Vec<SourceConfig>,
    pub val: DataGenerator,
    #[serde(default)]
    pub cost_spec: CostSpec,
    pub learner: LearnerSpec,
    #[serde(default)]
    pub n0: Scale,
    #[serde(default)]
    pub n1: Scale,
    #[serde(default = "default_resolution")]
    pub grid_resolution: f64,
    #[serde(default = "default_kinds")]
    pub predictor_kinds: Vec<PredictorKind>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_cap")]
    pub extrapolation_cap: f64,
    #[serde(default)]
    pub extrapolation_source: usize,
    #[serde(default)]
    pub solver: OtSolver,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingProtocol,
    /// Scales for the projection sweep.
    #[serde(default)]
    pub target_n: Vec<usize>,
    /// Fitting-set sizes for the efficiency curve.
    #[serde(default)]
    pub efficiency_counts: Vec<usize>,
    #[serde(default)]
    pub select: Option<SelectConfig>,
    #[serde(default)]
    pub budget_search: Option<BudgetSearchConfig>,
}

fn default_sampling() -> SamplingProtocol {
    SamplingProtocol::Permutation
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        // CSV paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |g: &mut DataGenerator| {
            if let DataGenerator::Csv { path } = g {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        cfg.sources
            .iter_mut()
            .for_each(|s| rebase(&mut s.generator));
        rebase(&mut cfg.val);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("at least one source is required".into()));
        }
        grid_steps(self.grid_resolution)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if !(self.extrapolation_cap > 0.0 && self.extrapolation_cap < 1.0) {
            return Err(Error::Config("extrapolation_cap must lie in (0, 1)".into()));
        }
        if self.extrapolation_source >= self.sources.len() {
            return Err(Error::Config("extrapolation_source out of range".into()));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.sources.len()
    }
}

/// Pilot data, validation set and scales of one seeded run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    pub sources: Vec<Dataset>,
    pub val: Dataset,
    pub n0: usize,
    pub n1: usize,
}

pub fn materialize(config: &ExperimentConfig, seed: u64) -> Result<Experiment> {
    config.validate()?;
    let mut sources = Vec::with_capacity(config.m());
    for (i, s) in config.sources.iter().enumerate() {
        let full = s.generator.generate(rng::derive(seed, &[1, i as u64]))?;
        let pilot = match s.pilot_size {
            None => full,
            Some(k) => sample_pilot(
                &DataSource::new(full, k)?,
                config.sampling,
                rng::derive(seed, &[2, i as u64]),
            )?,
        };
        sources.push(pilot);
    }
    let val = config.val.generate(rng::derive(seed, &[3]))?;
    let sizes: Vec<usize> = sources.iter().map(Dataset::len).collect();
    let min = *sizes.iter().min().expect("sources are nonempty");
    let (n0, n1) = match (config.n0, config.n1) {
        (Scale::Fixed(a), Scale::Fixed(b)) => (a, b),
        (Scale::Auto(_), Scale::Auto(_)) => default_scales(&sizes)?,
        (Scale::Auto(_), Scale::Fixed(b)) => (((2 * b) as f64 / 3.0).round_ties_even() as usize, b),
        (Scale::Fixed(a), Scale::Auto(_)) => (a, min),
    };
    if n0 == 0 || n0 >= n1 {
        return Err(Error::DegenerateScales { n0, n1 });
    }
    if n1 > min {
        return Err(Error::Config(format!(
            "n1 = {n1} exceeds the smallest pilot ({min} points)"
        )));
    }
    Ok(Experiment {
        seed,
        sources,
        val,
        n0,
        n1,
    })
}

fn grid_steps(resolution: f64) -> Result<usize> {
    let r = (1.0 / resolution).round();
    if !(resolution > 0.0 && resolution <= 1.0) || ((r * resolution) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "grid resolution {resolution} does not divide 1"
        )));
    }
    Ok(r as usize)
}

/// All lattice points with coordinates in `{0, 1/r, ..., 1}` on the simplex,
/// in lexicographic order.
pub fn grid_ratios(m: usize, resolution: f64) -> Result<Vec<MixingRatio>> {
    if m == 0 {
        return Err(Error::Config("m must be at least 1".into()));
    }
    let r = grid_steps(resolution)?;
    let mut out = Vec::new();
    let mut counts = vec![0usize; m];
    fn rec(k: usize, left: usize, r: usize, counts: &mut [usize], out: &mut Vec<MixingRatio>) {
        let m = counts.len();
        if k == m - 1 {
            counts[k] = left;
            let p = counts.iter().map(|&c| c as f64 / r as f64).collect();
            out.push(MixingRatio::new(p).expect("lattice point is on the simplex"));
            return;
        }
        for c in 0..=left {
            counts[k] = c;
            rec(k + 1, left - c, r, counts, out);
        }
    }
    rec(0, r, r, &mut counts, &mut out);
    Ok(out)
}

/// Tuples observed at the two fitting scales, aligned by grid ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct FitDataset {
    pub n0: usize,
    pub n1: usize,
    pub tuples0: Vec<TrainingTuple>,
    pub tuples1: Vec<TrainingTuple>,
}

impl FitDataset {
    pub fn len(&self) -> usize {
        self.tuples0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples0.is_empty()
    }

    pub fn m(&self) -> usize {
        self.tuples0.first().map_or(0, |t| t.ratio.len())
    }

    /// Rows `idx` at both scales.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            n0: self.n0,
            n1: self.n1,
            tuples0: idx.iter().map(|&i| self.tuples0[i].clone()).collect(),
            tuples1: idx.iter().map(|&i| self.tuples1[i].clone()).collect(),
        }
    }

    pub fn all(&self) -> Vec<TrainingTuple> {
        self.tuples0.iter().chain(&self.tuples1).cloned().collect()
    }

    /// Columns `scale, budget, p_0..p_{m-1}, ot_distance, performance`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let m = self.m();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["scale".to_string(), "budget".into()];
        header.extend((0..m).map(|i| format!("p_{i}")));
        header.extend(["ot_distance".into(), "performance".into()]);
        w.write_record(&header)?;
        for (scale, tuples) in [(0, &self.tuples0), (1, &self.tuples1)] {
            for t in tuples {
                let mut row = vec![scale.to_string(), t.budget.to_string()];
                row.extend(t.ratio.as_slice().iter().map(|x| x.to_string()));
                row.push(t.ot_distance.to_string());
                row.push(t.performance.to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let m = header
            .len()
            .checked_sub(4)
            .filter(|&m| m > 0)
            .ok_or_else(|| bad("too few columns".into()))?;
        let (mut t0, mut t1) = (Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .parse::<f64>()
                    .map_err(|e| bad(format!("row {}: column {k}: {e}", line + 1)))
            };
            let ratio = MixingRatio::new((0..m).map(|i| num(2 + i)).collect::<Result<_>>()?)?;
            let budget = rec[1]
                .parse::<usize>()
                .map_err(|e| bad(format!("row {}: budget: {e}", line + 1)))?;
            let t = TrainingTuple::new(ratio, budget, num(2 + m)?, num(3 + m)?)?;
            match &rec[0] {
                "0" => t0.push(t),
                "1" => t1.push(t),
                other => return Err(bad(format!("row {}: unknown scale `{other}`", line + 1))),
            }
        }
        if t0.len() != t1.len() || t0.is_empty() {
            return Err(bad(
                "scales must hold the same nonzero number of rows".into()
            ));
        }
        Ok(Self {
            n0: t0[0].budget,
            n1: t1[0].budget,
            tuples0: t0,
            tuples1: t1,
        })
    }
}

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn composition_seed(seed: u64, rep: usize) -> u64 {
    rng::derive(seed, &[4, rep as u64])
}

/// OT distance and accuracy of `D(n, p)`, averaged over replicates.
pub fn observe(
    config: &ExperimentConfig,
    exp: &Experiment,
    ratio: &MixingRatio,
    n: usize,
) -> Result<(f64, f64)> {
    observe_with(config, exp, ratio, n, true)
}

/// Accuracy of `D(n, p)` alone, averaged over replicates.
pub fn observe_accuracy(
    config: &ExperimentConfig,
    exp: &Experiment,
    ratio: &MixingRatio,
    n: usize,
) -> Result<f64> {
    observe_with(config, exp, ratio, n, false).map(|(_, acc)| acc)
}

fn observe_with(
    config: &ExperimentConfig,
    exp: &Experiment,
    ratio: &MixingRatio,
    n: usize,
    with_ot: bool,
) -> Result<(f64, f64)> {
    let (mut ot, mut acc) = (0.0, 0.0);
    for rep in 0..config.replicates {
        let comp = compose(
            &exp.sources,
            &MixtureSpec {
                budget: n,
                ratio: ratio.clone(),
                seed: composition_seed(exp.seed, rep),
            },
        )?;
        if with_ot {
            ot += transport(&comp.dataset, &exp.val, &config.cost_spec, &config.solver)?.cost;
        }
        let learner = LearnerSpec {
            kind: config.learner.kind.clone(),
            seed: rng::derive(config.learner.seed, &[exp.seed, rep as u64]),
        };
        acc += train_eval(&learner, &comp.dataset, &exp.val)?.accuracy;
    }
    let reps = config.replicates as f64;
    Ok((ot / reps, (acc / reps).clamp(0.0, 1.0)))
}

/// Observe every grid ratio at both scales. Ratios that cannot be composed from
/// the pilots are skipped when at least 80% of the grid remains.
pub fn build_fit_dataset(config: &ExperimentConfig, exp: &Experiment) -> Result<FitDataset> {
    let grid = grid_ratios(config.m(), config.grid_resolution)?;
    let pool = thread_pool()?;
    let observed: Vec<Result<Option<(TrainingTuple, TrainingTuple)>>> = pool.install(|| {
        grid.par_iter()
            .map(|r| {
                let tuple = |n: usize| -> Result<Option<TrainingTuple>> {
                    match observe(config, exp, r, n) {
                        Ok((ot, acc)) => Ok(Some(TrainingTuple::new(r.clone(), n, ot, acc)?)),
                        Err(Error::InsufficientData { .. }) => Ok(None),
                        Err(e) => Err(e),
                    }
                };
                Ok(match (tuple(exp.n0)?, tuple(exp.n1)?) {
                    (Some(a), Some(b)) => Some((a, b)),
                    _ => None,
                })
            })
            .collect()
    });
    let mut tuples0 = Vec::with_capacity(grid.len());
    let mut tuples1 = Vec::with_capacity(grid.len());
    for (r, obs) in grid.iter().zip(observed) {
        match obs? {
            Some((a, b)) => {
                tuples0.push(a);
                tuples1.push(b);
            }
            None => log::warn!(
                "skipping {r}: the pilots cannot supply it at n1 = {}",
                exp.n1
            ),
        }
    }
    if (tuples0.len() as f64) < 0.8 * grid.len() as f64 {
        return Err(Error::Infeasible(format!(
            "only {} of {} grid ratios can be composed from the pilots",
            tuples0.len(),
            grid.len()
        )));
    }
    Ok(FitDataset {
        n0: exp.n0,
        n1: exp.n1,
        tuples0,
        tuples1,
    })
}

/// Ratios with `p[source] < cap` train, the rest test.
pub fn extrapolation_split(
    fit: &FitDataset,
    source: usize,
    cap: f64,
) -> Result<(FitDataset, FitDataset)> {
    if !(cap > 0.0 && cap < 1.0) {
        return Err(Error::Split(format!("cap {cap} outside (0, 1)")));
    }
    if source >= fit.m() {
        return Err(Error::Split(format!(
            "source {source} out of range for m = {}",
            fit.m()
        )));
    }
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..fit.len()).partition(|&i| fit.tuples0[i].ratio.as_slice()[source] < cap);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split(format!(
            "cap {cap} on source {source} leaves {} train and {} test ratios",
            train.len(),
            test.len()
        )));
    }
    Ok((fit.subset(&train), fit.subset(&test)))
}

/// Mean absolute error in percentage points.
pub fn evaluate_mae(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            left: predicted.len(),
            right: actual.len(),
        });
    }
    if predicted.is_empty() {
        return Err(Error::Config("MAE of an empty list".into()));
    }
    let total: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).abs())
        .sum();
    Ok(100.0 * total / predicted.len() as f64)
}

/// Source values of the valuation baselines at both scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Valuations {
    pub loo: [Vec<f64>; 2],
    pub shapley: Option<[Vec<f64>; 2]>,
}

/// Utility of a source subset: accuracy on the equal-share union at scale `n`; 0 for
/// the empty set.
pub fn valuations(
    config: &ExperimentConfig,
    exp: &Experiment,
    shapley: bool,
) -> Result<Valuations> {
    let m = config.m();
    let mut out: Vec<[Vec<f64>; 2]> = Vec::new();
    for method in 0..if shapley { 2 } else { 1 } {
        let mut per_scale: [Vec<f64>; 2] = Default::default();
        for (k, n) in [exp.n0, exp.n1].into_iter().enumerate() {
            let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
            let mut failure = None;
            let mut utility = |subset: &[usize]| -> f64 {
                if subset.is_empty() {
                    return 0.0;
                }
                if let Some(v) = cache.get(subset) {
                    return *v;
                }
                let mut w = vec![0.0; m];
                subset.iter().for_each(|&i| w[i] = 1.0);
                let v = MixingRatio::normalized(&w)
                    .and_then(|r| observe_accuracy(config, exp, &r, n))
                    .unwrap_or_else(|e| {
                        failure.get_or_insert(e);
                        f64::NAN
                    });
                cache.insert(subset.to_vec(), v);
                v
            };
            let values = if method == 0 {
                loo_values(&mut utility, m)
            } else {
                shapley_values(&mut utility, m)?
            };
            if let Some(e) = failure {
                return Err(e);
            }
            per_scale[k] = values;
        }
        out.push(per_scale);
    }
    let mut it = out.into_iter();
    Ok(Valuations {
        loo: it.next().expect("loo computed"),
        shapley: it.next(),
    })
}

/// Fit `kind` on `train`. Surrogates without a budget term get one model per scale;
/// the baselines are fit once on both scales and share that model.
pub fn fit_pair(
    kind: PredictorKind,
    train: &FitDataset,
    cost_spec: CostSpec,
    values: Option<&Valuations>,
) -> Result<ScalePair> {
    let (model0, model1) = match kind {
        PredictorKind::Cs | PredictorKind::Pq => (
            fit_baseline(kind, &train.tuples0)?,
            fit_baseline(kind, &train.tuples1)?,
        ),
        PredictorKind::Loo | PredictorKind::Shapley => {
            let v =
                values.ok_or_else(|| Error::Config(format!("{kind} needs source valuations")))?;
            let per_scale = if kind == PredictorKind::Loo {
                &v.loo
            } else {
                v.shapley
                    .as_ref()
                    .ok_or_else(|| Error::Config("Shapley values were not computed".into()))?
            };
            let all = train.all();
            (
                fit_valued(kind, &per_scale[0], &all)?,
                fit_valued(kind, &per_scale[1], &all)?,
            )
        }
        _ => {
            let model = fit_baseline(kind, &train.all())?;
            (model.clone(), model)
        }
    };
    ScalePair::new(train.n0, train.n1, model0, model1, cost_spec)
}

/// Predictions for every tuple of `data`, clamped to `[0, 1]`, followed by the actuals.
pub fn predictions(pair: &ScalePair, data: &FitDataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pred = Vec::with_capacity(2 * data.len());
    let mut actual = Vec::with_capacity(2 * data.len());
    for (model, tuples) in [(&pair.model0, &data.tuples0), (&pair.model1, &data.tuples1)] {
        for t in tuples {
            pred.push(
                model
                    .predict_accuracy(&t.ratio, t.ot_distance, t.budget)?
                    .clamp(0.0, 1.0),
            );
            actual.push(t.performance);
        }
    }
    Ok((pred, actual))
}

pub fn pair_mae(pair: &ScalePair, data: &FitDataset) -> Result<f64> {
    let (p, a) = predictions(pair, data)?;
    evaluate_mae(&p, &a)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaeRow {
    pub kind: PredictorKind,
    pub train_mae: Option<f64>,
    pub test_mae: Option<f64>,
    /// Why the predictor could not be fit, if it could not.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionOutcome {
    pub kind: PredictorKind,
    pub ratio: MixingRatio,
    pub predicted: f64,
    pub actual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub n0: usize,
    pub n1: usize,
    pub rows: Vec<MaeRow>,
    pub efficiency: Vec<EfficiencyRow>,
    pub selection: Vec<SelectionOutcome>,
}

pub fn needs_values(kinds: &[PredictorKind]) -> Option<bool> {
    let loo = kinds.contains(&PredictorKind::Loo);
    let shapley = kinds.contains(&PredictorKind::Shapley);
    (loo || shapley).then_some(shapley)
}

/// Train and test MAE of every kind on the same extrapolation split.
pub fn mae_table(
    kinds: &[PredictorKind],
    train: &FitDataset,
    test: &FitDataset,
    cost_spec: CostSpec,
    values: Option<&Valuations>,
) -> Result<Vec<MaeRow>> {
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        match fit_pair(kind, train, cost_spec, values) {
            Ok(pair) => rows.push(MaeRow {
                kind,
                train_mae: Some(pair_mae(&pair, train)?),
                test_mae: Some(pair_mae(&pair, test)?),
                error: None,
            }),
            Err(e) if e.is_numeric() => {
                log::warn!("{kind}: {e}");
                rows.push(MaeRow {
                    kind,
                    train_mae: None,
                    test_mae: None,
                    error: Some(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub count: usize,
    pub kind: PredictorKind,
    /// `None` when the subset was too small (or degenerate) to fit.
    pub test_mae: Option<f64>,
}

/// Test MAE after fitting on seeded random subsets of `count` training ratios.
/// A count equal to the training size uses every ratio in order.
pub fn efficiency_curve(
    kinds: &[PredictorKind],
    train: &FitDataset,
    test: &FitDataset,
    counts: &[usize],
    cost_spec: CostSpec,
    values: Option<&Valuations>,
    seed: u64,
) -> Result<Vec<EfficiencyRow>> {
    let mut rows = Vec::new();
    for &count in counts {
        if count > train.len() {
            return Err(Error::Config(format!(
                "efficiency count {count} exceeds the {} training ratios",
                train.len()
            )));
        }
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng::seeded(rng::derive(seed, &[5, count as u64])));
        idx.truncate(count);
        idx.sort_unstable();
        let sub = train.subset(&idx);
        for &kind in kinds {
            let test_mae = match fit_pair(kind, &sub, cost_spec, values) {
                Ok(pair) => Some(pair_mae(&pair, test)?),
                Err(e) if e.is_numeric() => None,
                Err(e) => return Err(e),
            };
            rows.push(EfficiencyRow {
                count,
                kind,
                test_mae,
            });
        }
    }
    Ok(rows)
}

/// Everything `eval` reports for one seed: MAE table, efficiency curve.
pub fn evaluate(
    config: &ExperimentConfig,
    exp: &Experiment,
    fit: &FitDataset,
) -> Result<EvalReport> {
    let (train, test) =
        extrapolation_split(fit, config.extrapolation_source, config.extrapolation_cap)?;
    let values = needs_values(&config.predictor_kinds)
        .map(|shapley| valuations(config, exp, shapley))
        .transpose()?;
    let rows = mae_table(
        &config.predictor_kinds,
        &train,
        &test,
        config.cost_spec,
        values.as_ref(),
    )?;
    let efficiency = efficiency_curve(
        &config.predictor_kinds,
        &train,
        &test,
        &config.efficiency_counts,
        config.cost_spec,
        values.as_ref(),
        exp.seed,
    )?;
    Ok(EvalReport {
        seed: exp.seed,
        n0: exp.n0,
        n1: exp.n1,
        rows,
        efficiency,
        selection: Vec::new(),
    })
}

/// OT distances of the compositions of `ratio` at both fitting scales.
pub fn scale_distances(
    config: &ExperimentConfig,
    exp: &Experiment,
    ratio: &MixingRatio,
) -> Result<(f64, f64)> {
    let (ot0, _) = observe_ot(config, exp, ratio, exp.n0)?;
    let (ot1, _) = observe_ot(config, exp, ratio, exp.n1)?;
    Ok((ot0, ot1))
}

fn observe_ot(
    config: &ExperimentConfig,
    exp: &Experiment,
    ratio: &MixingRatio,
    n: usize,
) -> Result<(f64, usize)> {
    let mut ot = 0.0;
    for rep in 0..config.replicates {
        let comp = compose(
            &exp.sources,
            &MixtureSpec {
                budget: n,
                ratio: ratio.clone(),
                seed: composition_seed(exp.seed, rep),
            },
        )?;
        ot += transport(&comp.dataset, &exp.val, &config.cost_spec, &config.solver)?.cost;
    }
    Ok((ot / config.replicates as f64, n))
}

/// Projected performance of each ratio at each target scale; the actual value is
/// filled in when the pilots can supply a composition of that size.
pub fn projection_sweep(
    config: &ExperimentConfig,
    exp: &Experiment,
    pair: &ScalePair,
    ratios: &[MixingRatio],
    with_actual: bool,
) -> Result<Vec<ProjectionRow>> {
    let pool = thread_pool()?;
    let rows: Vec<Result<Vec<ProjectionRow>>> = pool.install(|| {
        ratios
            .par_iter()
            .map(|r| {
                let (ot0, ot1) = if pair.model0.kind.uses_transport() {
                    scale_distances(config, exp, r)?
                } else {
                    (0.0, 0.0)
                };
                let mut out = Vec::with_capacity(config.target_n.len());
                for &n in &config.target_n {
                    let actual = if with_actual {
                        match observe_accuracy(config, exp, r, n) {
                            Ok(acc) => Some(acc),
                            Err(Error::InsufficientData { .. }) => None,
                            Err(e) => return Err(e),
                        }
                    } else {
                        None
                    };
                    out.push(ProjectionRow {
                        ratio: r.clone(),
                        target_n: n,
                        predicted: pair.project_query(r, n, ot0, ot1)?,
                        actual,
                    });
                }
                Ok(out)
            })
            .collect()
    });
    let mut flat = Vec::new();
    for r in rows {
        flat.extend(r?);
    }
    Ok(flat)
}

/// Model files written by `fit`: `<dir>/<kind>.json`.
pub fn model_path(dir: impl AsRef<Path>, kind: PredictorKind) -> PathBuf {
    dir.as_ref().join(format!("{kind}.json"))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Single-model helper for query tools.
pub fn predict_single(
    model: &PredictorModel,
    ratio: &MixingRatio,
    ot: f64,
    budget: usize,
) -> Result<f64> {
    model.predict_accuracy(ratio, ot, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{LearnerKind, SyntheticLogLinear};

    fn binom(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn grid_examples() {
        let g = grid_ratios(2, 0.5).unwrap();
        let v: Vec<Vec<f64>> = g.iter().map(|r| r.as_slice().to_vec()).collect();
        assert_eq!(v, vec![vec![0.0, 1.0], vec![0.5, 0.5], vec![1.0, 0.0]]);
        assert_eq!(grid_ratios(3, 0.25).unwrap().len(), 15);
        assert_eq!(grid_ratios(1, 0.1).unwrap().len(), 1);
        assert!(grid_ratios(3, 0.3).is_err());
    }

    #[test]
    fn grid_counts_match_stars_and_bars() {
        for m in 1..=6 {
            for (res, r) in [(1.0, 1), (0.5, 2), (0.25, 4), (0.2, 5), (0.1, 10)] {
                let g = grid_ratios(m, res).unwrap();
                assert_eq!(g.len(), binom(r + m - 1, m - 1), "m={m} r={r}");
                for w in g.windows(2) {
                    assert!(w[0].as_slice() < w[1].as_slice());
                }
            }
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(evaluate_mae(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert!((evaluate_mae(&[0.5, 0.7], &[0.6, 0.6]).unwrap() - 10.0).abs() < 1e-12);
        assert!(evaluate_mae(&[], &[]).is_err());
        // spreadsheet-style recomputation: sum of |d| column, divided, times 100
        let pred = [0.61, 0.72, 0.55, 0.9, 0.33, 0.47, 0.81, 0.66, 0.59, 0.7];
        let act = [0.6, 0.75, 0.5, 0.88, 0.4, 0.47, 0.79, 0.7, 0.61, 0.65];
        let mut col = Vec::new();
        for i in 0..10 {
            let d = pred[i] - act[i];
            col.push(if d < 0.0 { -d } else { d });
        }
        let mut s = 0.0;
        for d in &col {
            s += d;
        }
        assert!((evaluate_mae(&pred, &act).unwrap() - s / 10.0 * 100.0).abs() <= 1e-12);
    }

    fn synthetic_config(resolution: f64) -> ExperimentConfig {
        let gen = |id: &str, mu: f64, label: usize| SourceConfig {
            generator: DataGenerator::Gaussian {
                id: id.into(),
                size: 60,
                components: vec![GaussianComponent {
                    mean: vec![mu, 0.0],
                    std: 0.5,
                    label,
                    weight: 1.0,
                }],
                seed: 0,
            },
            pilot_size: Some(40),
        };
        ExperimentConfig {
            sources: vec![gen("a", 0.0, 0), gen("b", 2.0, 1), gen("c", 4.0, 2)],
            val: DataGenerator::Gaussian {
                id: "val".into(),
                size: 20,
                components: vec![GaussianComponent {
                    mean: vec![2.0, 0.0],
                    std: 1.0,
                    label: 1,
                    weight: 1.0,
                }],
                seed: 0,
            },
            cost_spec: CostSpec::default(),
            learner: LearnerSpec {
                kind: LearnerKind::SyntheticLogLinear(
                    SyntheticLogLinear::new(vec![-0.02, -0.03, -0.01], vec![0.4, 0.5, 0.45], 0.2)
                        .unwrap(),
                ),
                seed: 0,
            },
            n0: Scale::Fixed(20),
            n1: Scale::Fixed(30),
            grid_resolution: resolution,
            predictor_kinds: PredictorKind::ALL.to_vec(),
            seeds: vec![0],
            replicates: 1,
            extrapolation_cap: 0.55,
            extrapolation_source: 0,
            solver: OtSolver::default(),
            sampling: SamplingProtocol::Permutation,
            target_n: vec![60, 120],
            efficiency_counts: vec![],
            select: None,
            budget_search: None,
        }
    }

    #[test]
    fn fit_dataset_shape() {
        let cfg = synthetic_config(0.2);
        let exp = materialize(&cfg, 1).unwrap();
        let fit = build_fit_dataset(&cfg, &exp).unwrap();
        assert_eq!(fit.len(), 21);
        assert_eq!(fit.tuples0.len() + fit.tuples1.len(), 42);
        assert!(fit.tuples0.iter().all(|t| t.budget == 20));
        assert!(fit.tuples1.iter().all(|t| t.budget == 30));
        let one = ExperimentConfig {
            sources: cfg.sources[..1].to_vec(),
            learner: LearnerSpec {
                kind: LearnerKind::NearestCentroid,
                seed: 0,
            },
            ..cfg.clone()
        };
        let exp1 = materialize(&one, 1).unwrap();
        assert_eq!(build_fit_dataset(&one, &exp1).unwrap().len(), 1);
        assert_eq!(build_fit_dataset(&cfg, &exp).unwrap(), fit);
    }

    #[test]
    fn fit_dataset_csv_round_trip() {
        let cfg = synthetic_config(0.5);
        let exp = materialize(&cfg, 2).unwrap();
        let fit = build_fit_dataset(&cfg, &exp).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fit.csv");
        fit.write_csv(&path).unwrap();
        assert_eq!(FitDataset::read_csv(&path).unwrap(), fit);
    }

    #[test]
    fn split_examples() {
        let grid = grid_ratios(3, 0.25).unwrap();
        let tuples: Vec<TrainingTuple> = grid
            .iter()
            .map(|r| TrainingTuple::new(r.clone(), 10, 0.0, 0.5).unwrap())
            .collect();
        let fit = FitDataset {
            n0: 10,
            n1: 20,
            tuples0: tuples.clone(),
            tuples1: tuples,
        };
        let (train, test) = extrapolation_split(&fit, 0, 0.55).unwrap();
        // enumerated: (0.75, 0, 0.25), (0.75, 0.25, 0), (1, 0, 0)
        assert_eq!(test.len(), 3);
        assert_eq!(train.len(), 12);
        assert!(test.tuples0.iter().all(|t| t.ratio.as_slice()[0] >= 0.75));
        assert!(train.tuples0.iter().any(|t| t.ratio.as_slice()[0] == 0.5));
        let capped = fit.subset(
            &(0..fit.len())
                .filter(|&i| fit.tuples0[i].ratio.as_slice()[0] < 0.9)
                .collect::<Vec<_>>(),
        );
        assert!(matches!(
            extrapolation_split(&capped, 0, 0.95),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn evaluation_runs_for_every_kind() {
        let mut cfg = synthetic_config(0.25);
        cfg.efficiency_counts = vec![2, 5, 12];
        let exp = materialize(&cfg, 3).unwrap();
        let fit = build_fit_dataset(&cfg, &exp).unwrap();
        let report = evaluate(&cfg, &exp, &fit).unwrap();
        assert_eq!(report.rows.len(), PredictorKind::ALL.len());
        for row in &report.rows {
            if let (Some(a), Some(b)) = (row.train_mae, row.test_mae) {
                assert!(a >= 0.0 && b >= 0.0);
            }
        }
        // the full count reproduces the standard fit
        let (train, test) = extrapolation_split(&fit, 0, 0.55).unwrap();
        let cs = fit_pair(PredictorKind::Cs, &train, cfg.cost_spec, None).unwrap();
        let full = report
            .efficiency
            .iter()
            .find(|r| r.count == 12 && r.kind == PredictorKind::Cs)
            .unwrap();
        assert_eq!(full.test_mae, Some(pair_mae(&cs, &test).unwrap()));
        let two = report
            .efficiency
            .iter()
            .find(|r| r.count == 2 && r.kind == PredictorKind::Cs)
            .unwrap();
        assert!(two.test_mae.is_some());
    }

    #[test]
    fn threads_env_is_honoured() {
        let pool = thread_pool().unwrap();
        assert!(pool.current_num_threads() >= 1);
    }
}
