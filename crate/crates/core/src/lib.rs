//! Performance prediction for data-source mixtures: OT-aligned surrogates,
//! two-point scale projection, and mixture selection on the simplex.

// NaN must fail range checks, so several guards are written as `!(x >= lo)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataspace;
pub mod error;
pub mod harness;
pub mod learners;
pub mod ot;
pub mod predictors;
pub mod projection;
pub mod rng;
pub mod selection;

pub use dataspace::{compose, Composition, Dataset, MixingRatio, MixtureSpec};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, FitDataset};
pub use learners::{train_eval, LearnerKind, LearnerSpec, SyntheticLogLinear};
pub use ot::{transport, CostSpec, OtSolver, TransportResult};
pub use predictors::{PredictorKind, PredictorModel, TrainingTuple};
pub use projection::{ScalePair, Surrogate};
pub use selection::{
    search_min_budget, select_fixed_budget, BudgetSearchConfig, OptimizerConfig, SelectionResult,
};
