use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid mixing ratio: {0}")]
    InvalidRatio(String),

    #[error("pilot size {requested} exceeds source size {available}")]
    PilotSize { requested: usize, available: usize },

    #[error("bernoulli sampling with rate {rate} selected no points")]
    EmptySample { rate: f64 },

    #[error(
        "source {source_index} ({id}) holds {available} points but {requested} were requested"
    )]
    InsufficientData {
        source_index: usize,
        id: String,
        requested: usize,
        available: usize,
    },

    #[error("operation requires labeled data: {0}")]
    Unlabeled(String),

    #[error("feature dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error(
        "sinkhorn did not converge within {iterations} iterations (marginal residual {residual:e})"
    )]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("instance of {rows}x{cols} points exceeds the exact solver limit of {limit} cells")]
    TooLarge {
        rows: usize,
        cols: usize,
        limit: usize,
    },

    #[error("degenerate source composition: {0}")]
    Degenerate(String),

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("not enough training tuples: need {needed}, got {got}")]
    NotEnoughTuples { needed: usize, got: usize },

    #[error("fit failed on every start; best residuals {residuals:?}")]
    FitFailure { residuals: Vec<f64> },

    #[error("too many sources for exact enumeration: {m} > {limit}")]
    TooManySources { m: usize, limit: usize },

    #[error("scales must satisfy 1 <= n0 < n1, got n0={n0}, n1={n1}")]
    DegenerateScales { n0: usize, n1: usize },

    #[error("no iterate admitted a feasible composition: {0}")]
    Infeasible(String),

    #[error("target {target} unreachable; best predicted performance {best_performance} at budget {best_budget}")]
    UnreachableTarget {
        target: f64,
        best_budget: usize,
        best_performance: f64,
    },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that stem from numerics or fitting rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::Numeric(_)
                | Error::Degenerate(_)
                | Error::RankDeficient(_)
                | Error::FitFailure { .. }
                | Error::Infeasible(_)
                | Error::UnreachableTarget { .. }
                | Error::NotEnoughTuples { .. }
                | Error::Split(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
