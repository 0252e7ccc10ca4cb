//! Weighting machines: logistic membership models for PSW and the
//! exponential-tilting moment solver for MAIC.

mod logistic;
mod maic;

pub use logistic::{fit_logistic, fit_logistic_from, LogisticFit, LogisticOptions};
pub use maic::{maic_weights, maic_weights_from, MaicOptions, UNATTAINABLE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovariateSet, Method};

/// Per-subject weights for the IPD trial together with fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    pub weights: Vec<f64>,
    /// Tilting coefficients, MAIC only.
    pub alpha: Option<Vec<f64>>,
    /// Fitted probability of trial-b membership, PSW only.
    pub propensity: Option<Vec<f64>>,
    /// Membership model coefficients, intercept first, PSW only.
    pub coefficients: Option<Vec<f64>>,
    pub converged: bool,
    pub ess: f64,
    pub method: Method,
    pub iterations: usize,
    pub diagnostic: Option<String>,
}

impl WeightFit {
    /// Weights rescaled to mean 1.
    pub fn normalized(&self) -> Vec<f64> {
        let mean = self.weights.iter().sum::<f64>() / self.weights.len() as f64;
        self.weights.iter().map(|w| w / mean).collect()
    }
}

/// Kish effective sample size, `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let (s, s2) = weights.iter().fold((0.0, 0.0), |(s, s2), &w| (s + w, s2 + w * w));
    if weights.is_empty() || s2 == 0.0 {
        return Err(Error::AllZeroWeights);
    }
    Ok(s * s / s2)
}

/// Trial-membership design for PSW: each covariate and its square, so the
/// logistic model nests assignment mechanisms that are quadratic in the
/// covariates without interactions. Squares are named `<name>^2`.
pub fn quadratic_design(features: &CovariateSet) -> Result<CovariateSet> {
    let p = features.ncols();
    let mut names = features.names().to_vec();
    names.extend(features.names().iter().map(|n| format!("{n}^2")));
    let mut values = Vec::with_capacity(features.nrows() * 2 * p);
    for i in 0..features.nrows() {
        let row = features.row(i);
        values.extend_from_slice(row);
        values.extend(row.iter().map(|x| x * x));
    }
    CovariateSet::new(names, values, features.nrows())
}

/// Odds of trial-b membership, `exp(linear predictor)`, for each trial-a subject.
pub fn psw_weights(fit: &LogisticFit, features_a: &CovariateSet) -> Result<WeightFit> {
    let features = features_a.select(&fit.feature_names)?;
    let lp: Vec<f64> = (0..features.nrows())
        .map(|i| fit.linear_predictor(features.row(i)))
        .collect();
    let weights: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let bad: Vec<usize> = weights
        .iter()
        .enumerate()
        .filter_map(|(i, w)| (!w.is_finite()).then_some(i))
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinitePredictor(bad));
    }
    let propensity = lp.iter().map(|&v| crate::dgm::logistic(v)).collect();
    let ess = effective_sample_size(&weights)?;
    Ok(WeightFit {
        weights,
        alpha: None,
        propensity: Some(propensity),
        coefficients: Some(fit.coefficients.clone()),
        converged: fit.converged,
        ess,
        method: Method::Psw,
        iterations: fit.iterations,
        diagnostic: fit.diagnostic.clone(),
    })
}
