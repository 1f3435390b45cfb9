//! Joint log-density of the induction-outcome model.
//!
//! * [`spec`] — covariate → outcome wiring and hyperprior families.
//! * [`params`] — the unconstrained parameter layout and its transforms.
//! * [`data`] — the design prepared for fast repeated evaluation.
//! * [`density`] — priors, ordinal imputation with exact marginalization
//!   over a missing Position + Consistency score, and outcome likelihoods.

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::cohort::{preprocess_outcomes, Cohort, CohortError, DesignTable};

pub mod data;
pub mod density;
pub mod params;
pub mod spec;

pub use data::PreparedData;
pub use density::{prior_logdensity, Model};
pub use params::{Block, ParameterSpace, Parameterization, Params};
pub use spec::{Coefficient, Covariate, ModelSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite parameter at index {0}")]
    NonFiniteInput(usize),
    #[error("value outside its support: {0}")]
    OutOfSupport(String),
    #[error("row {0} out of range")]
    RowOutOfRange(usize),
    #[error("poscon value {0} outside 0..=4")]
    PosconOutOfRange(usize),
    #[error("covariate {covariate} is not wired to {outcome}")]
    NotWired { covariate: String, outcome: String },
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

/// Preprocesses `cohort` and builds the model for `spec`. The design table
/// carries the outcome transforms needed to map back to hours.
pub fn build_model(
    cohort: &Cohort,
    spec: ModelSpec,
    parameterization: Parameterization,
) -> Result<(Model, DesignTable), ModelError> {
    let table = preprocess_outcomes(cohort)?;
    let space = ParameterSpace::with_parameterization(spec, parameterization)?;
    let data = PreparedData::new(&table, &space)?;
    Ok((Model::new(space, data), table))
}
