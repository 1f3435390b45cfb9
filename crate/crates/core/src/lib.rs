//! Confounder-adjusted hierarchical Bayesian model for labor-induction
//! outcomes after prelabor rupture of membranes.
//!
//! The pipeline: [`cohort`] loads and preprocesses patient records,
//! [`model`] defines the joint log-density (with the partially observed
//! Position + Consistency score marginalized through an [`ordinal`]
//! regression), [`autodiff`] differentiates it, [`sampler`] runs NUTS,
//! and [`diagnostics`] summarizes the draws. [`simulate`] generates
//! synthetic cohorts from a known clinical decision process.

pub mod autodiff;
pub mod cohort;
pub mod diagnostics;
pub mod model;
pub mod ordinal;
pub mod sampler;
pub mod simulate;
