//! Performance metrics over the Monte Carlo estimates of one study cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EstimateRecord, EstimatorSpec};

pub fn bias(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(estimates.iter().map(|e| e - truth).sum::<f64>() / estimates.len() as f64)
}

pub fn rmse(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mse = estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / estimates.len() as f64;
    Ok(mse.sqrt())
}

/// Mean model-based SE over the empirical SE, where the empirical SE is
/// taken about the truth with an `n - 1` divisor.
pub fn variability_ratio(ses: &[f64], estimates: &[f64], truth: f64) -> Result<f64> {
    if ses.len() != estimates.len() {
        return Err(Error::LengthMismatch(ses.len(), estimates.len()));
    }
    let n = estimates.len();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "variability ratio needs at least 2 estimates, got {n}"
        )));
    }
    let empirical = (estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / (n - 1) as f64).sqrt();
    if empirical == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(ses.iter().sum::<f64>() / n as f64 / empirical)
}

/// Share of 95% intervals `estimate +/- 1.96 se` that contain the truth.
pub fn coverage(estimates: &[f64], ses: &[f64], truth: f64) -> Result<f64> {
    if ses.len() != estimates.len() {
        return Err(Error::LengthMismatch(estimates.len(), ses.len()));
    }
    if estimates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let z = EstimateRecord::Z95;
    let hits = estimates
        .iter()
        .zip(ses)
        .filter(|(e, s)| *e - z * *s <= truth && truth <= *e + z * *s)
        .count();
    Ok(hits as f64 / estimates.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergencePolicy {
    #[default]
    ExcludeNonconverged,
    IncludeNonconverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsCell {
    pub dgm: u8,
    pub spec: EstimatorSpec,
    pub n_total: usize,
    pub n_converged: usize,
    pub bias: Option<f64>,
    pub rmse: Option<f64>,
    pub vr: Option<f64>,
    pub coverage: Option<f64>,
    pub truth: f64,
}

impl MetricsCell {
    /// Stable identifier `dgm<k>/<method>/<anchoring>/<adjustment>`.
    pub fn label(&self) -> String {
        format!("dgm{}/{}", self.dgm, self.spec)
    }
}

/// Aggregates the records of one cell. Non-converged records are always
/// counted in `n_total`; under the default policy they are left out of the
/// metrics. Records without an estimate never enter the metrics.
pub fn summarize_cell(
    dgm: u8,
    records: &[EstimateRecord],
    truth: f64,
    policy: ConvergencePolicy,
) -> Result<MetricsCell> {
    let first = records.first().ok_or(Error::EmptyInput)?;
    if let Some(other) = records.iter().find(|r| r.spec != first.spec) {
        return Err(Error::Invalid(format!(
            "records mix specs {} and {}",
            first.spec, other.spec
        )));
    }
    let n_converged = records.iter().filter(|r| r.converged).count();
    let used: Vec<&EstimateRecord> = records
        .iter()
        .filter(|r| r.converged || policy == ConvergencePolicy::IncludeNonconverged)
        .filter(|r| r.delta_hat.is_some())
        .collect();
    let estimates: Vec<f64> = used.iter().filter_map(|r| r.delta_hat).collect();
    let with_se: Vec<(f64, f64)> = used.iter().filter_map(|r| Some((r.delta_hat?, r.se?))).collect();
    let (e_se, ses): (Vec<f64>, Vec<f64>) = with_se.into_iter().unzip();
    Ok(MetricsCell {
        dgm,
        spec: first.spec.clone(),
        n_total: records.len(),
        n_converged,
        bias: bias(&estimates, truth).ok(),
        rmse: rmse(&estimates, truth).ok(),
        vr: variability_ratio(&ses, &e_se, truth).ok(),
        coverage: coverage(&e_se, &ses, truth).ok(),
        truth,
    })
}
