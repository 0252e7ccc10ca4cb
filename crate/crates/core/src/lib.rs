//! Population-adjusted indirect comparisons.
//!
//! Matching-adjusted indirect comparison (MAIC, first and second moment),
//! propensity score weighting (PSW) and unweighted comparisons of an IPD
//! trial against an aggregate-data trial, with bootstrap inference and a
//! reproducible Monte Carlo study harness.

pub mod dgm;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod weights;

pub use error::{Error, Result};
pub use model::{
    AggregateData, Anchoring, Arm, CovariateSet, EstimateRecord, EstimatorSpec, Method, MomentOrder, MomentVector,
    TrialIpd, TrialLabel,
};
