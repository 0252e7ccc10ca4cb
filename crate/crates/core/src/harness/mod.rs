//! Monte Carlo study driver: seeding, the estimator grid, parallel
//! execution and estimation on external data.

mod config;
mod external;
pub mod seed;
mod study;

pub use config::{Preset, StudyConfig, COVARIATES};
pub use external::{estimate_external, publish_aggregate, ExternalB, ExternalEstimate};
pub use study::{
    calibrated_dgm, dgm_truth, run_iteration, run_study, run_study_with, summarize_rows, DgmContext, IterationOutput,
    StudyOutput,
};
