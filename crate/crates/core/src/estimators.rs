//! Point estimates of the marginal A-versus-B effect in the trial-b population.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{bootstrap_arm_variances, combine_variance, BootstrapPlan};
use crate::model::{AggregateData, Anchoring, Arm, EstimateRecord, EstimatorSpec, Method, TrialIpd, TrialLabel};
use crate::weights::{
    effective_sample_size, fit_logistic_from, maic_weights_from, psw_weights, quadratic_design, LogisticOptions,
    MaicOptions, WeightFit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanKind {
    Observed,
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmMean {
    pub estimate: f64,
    pub kind: MeanKind,
}

/// Arm-level outcome means keyed by `(trial, arm)`.
pub type ArmMeans = BTreeMap<(TrialLabel, Arm), ArmMean>;

/// What the estimator may see of trial b.
#[derive(Debug, Clone, Copy)]
pub enum TrialBView<'a> {
    Ipd(&'a TrialIpd),
    Aggregate(&'a AggregateData),
}

/// Weighted mean of `outcome` over subjects in `arm`.
pub fn weighted_arm_mean(outcome: &[f64], arms: &[Arm], weights: &[f64], arm: Arm) -> Result<f64> {
    if outcome.len() != arms.len() || weights.len() != arms.len() {
        return Err(Error::LengthMismatch(outcome.len(), arms.len()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut present = false;
    for ((&y, &a), &w) in outcome.iter().zip(arms).zip(weights) {
        if a == arm {
            present = true;
            num += w * y;
            den += w;
        }
    }
    if !present {
        return Err(Error::MissingArm(arm.to_string()));
    }
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::DegenerateArmWeight(arm.to_string()));
    }
    Ok(num / den)
}

fn lookup(arms: &ArmMeans, trial: TrialLabel, arm: Arm) -> Result<f64> {
    arms.get(&(trial, arm))
        .map(|m| m.estimate)
        .ok_or_else(|| Error::MissingArm(format!("{arm} in trial {trial}")))
}

/// `mean_b(A) - mean_b(B)`, with the A mean coming from reweighted (or raw) trial a.
pub fn estimate_unanchored(arms: &ArmMeans) -> Result<f64> {
    Ok(lookup(arms, TrialLabel::A, Arm::A)? - lookup(arms, TrialLabel::B, Arm::B)?)
}

/// Difference in differences through the shared comparator C.
pub fn estimate_anchored(arms: &ArmMeans) -> Result<f64> {
    let a_side = lookup(arms, TrialLabel::A, Arm::A)? - lookup(arms, TrialLabel::A, Arm::C)?;
    let b_side = lookup(arms, TrialLabel::B, Arm::B)? - lookup(arms, TrialLabel::B, Arm::C)?;
    Ok(a_side - b_side)
}

pub fn estimate(arms: &ArmMeans, anchoring: Anchoring) -> Result<f64> {
    match anchoring {
        Anchoring::Anchored => estimate_anchored(arms),
        Anchoring::Unanchored => estimate_unanchored(arms),
    }
}

/// A point estimate before inference.
#[derive(Debug, Clone)]
pub struct PointEstimate {
    pub delta_hat: Option<f64>,
    pub arm_means: Option<ArmMeans>,
    pub weight_fit: Option<WeightFit>,
    pub ess: f64,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

/// Trial-a subjects and trial-b information restricted to the arms that the
/// anchoring uses. Unanchored analyses drop both C arms entirely.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub trial_a: TrialIpd,
    pub trial_b: PreparedB,
}

/// Trial b as the estimator sees it. Summary-only methods get an
/// [`AggregateData`]; when it was derived from simulated IPD, that IPD is
/// kept in `source` for bootstrap resampling only.
#[derive(Debug, Clone)]
pub enum PreparedB {
    Ipd(TrialIpd),
    Aggregate {
        summary: AggregateData,
        source: Option<TrialIpd>,
    },
}

impl PreparedB {
    pub fn as_view(&self) -> TrialBView<'_> {
        match self {
            PreparedB::Ipd(t) => TrialBView::Ipd(t),
            PreparedB::Aggregate { summary, .. } => TrialBView::Aggregate(summary),
        }
    }

    /// Individual data available for resampling, if any.
    pub fn resampling_source(&self) -> Option<&TrialIpd> {
        match self {
            PreparedB::Ipd(t) => Some(t),
            PreparedB::Aggregate { source, .. } => source.as_ref(),
        }
    }
}

pub fn prepare(spec: &EstimatorSpec, trial_a: &TrialIpd, trial_b: TrialBView<'_>) -> Result<Prepared> {
    spec.validate()?;
    let (a_arms, b_arms) = spec.anchoring.arms();
    let a = trial_a.restrict_arms(a_arms);
    for &arm in a_arms {
        if a.arm_count(arm) == 0 {
            return Err(Error::MissingArm(format!("{arm} in trial a")));
        }
    }
    a.covariates.select(&spec.adjustment_set)?;
    let b = match (spec.method, trial_b) {
        (Method::Psw, TrialBView::Ipd(t)) => {
            let t = t.restrict_arms(b_arms);
            t.covariates.select(&spec.adjustment_set)?;
            PreparedB::Ipd(t)
        }
        (Method::Psw, TrialBView::Aggregate(_)) => {
            return Err(Error::Invalid("PSW needs individual data for trial b".into()))
        }
        // Summary-only methods never see more than the trial-b summaries.
        (_, TrialBView::Ipd(t)) => {
            let t = t.restrict_arms(b_arms);
            PreparedB::Aggregate {
                summary: AggregateData::from_trial(&t)?,
                source: Some(t),
            }
        }
        (_, TrialBView::Aggregate(agd)) => PreparedB::Aggregate {
            summary: agd.clone(),
            source: None,
        },
    };
    match &b {
        PreparedB::Ipd(t) => {
            for &arm in b_arms {
                if t.arm_count(arm) == 0 {
                    return Err(Error::MissingArm(format!("{arm} in trial b")));
                }
            }
        }
        PreparedB::Aggregate { summary: agd, .. } => {
            for &arm in b_arms {
                agd.arm(arm)?;
            }
            agd.moments
                .project(&spec.adjustment_set, crate::model::MomentOrder::First)?;
        }
    }
    Ok(Prepared { trial_a: a, trial_b: b })
}

/// Fits trial-a weights for the spec. `Ok(None)` for the unweighted method.
///
/// The PSW membership model uses each adjustment covariate and its square.
/// A converged `start` fit of the same method seeds the solver.
pub fn fit_weights(
    spec: &EstimatorSpec,
    trial_a: &TrialIpd,
    trial_b: TrialBView<'_>,
    start: Option<&WeightFit>,
) -> Result<Option<WeightFit>> {
    let start = start.filter(|f| f.converged && f.method == spec.method);
    let features_a = trial_a.covariates.select(&spec.adjustment_set)?;
    match spec.method {
        Method::Unweighted => Ok(None),
        Method::Psw => {
            let TrialBView::Ipd(b) = trial_b else {
                return Err(Error::Invalid("PSW needs individual data for trial b".into()));
            };
            let features_a = quadratic_design(&features_a)?;
            let features_b = quadratic_design(&b.covariates.select(&spec.adjustment_set)?)?;
            let names = features_a.names().to_vec();
            let nrows = features_a.nrows() + features_b.nrows();
            let mut values = Vec::with_capacity(nrows * names.len());
            for i in 0..features_a.nrows() {
                values.extend_from_slice(features_a.row(i));
            }
            for i in 0..features_b.nrows() {
                values.extend_from_slice(features_b.row(i));
            }
            let stacked = crate::model::CovariateSet::new(names, values, nrows)?;
            let labels: Vec<bool> = (0..nrows).map(|i| i >= features_a.nrows()).collect();
            let fit = fit_logistic_from(
                &stacked,
                &labels,
                LogisticOptions::default(),
                start.and_then(|f| f.coefficients.as_deref()),
            )?;
            psw_weights(&fit, &features_a).map(Some)
        }
        Method::Maic1 | Method::Maic2 => {
            let TrialBView::Aggregate(agd) = trial_b else {
                return Err(Error::Invalid("MAIC takes trial-b summaries".into()));
            };
            let order = spec.method.moment_order().expect("MAIC has an order");
            maic_weights_from(
                &features_a,
                &agd.moments,
                order,
                MaicOptions::default(),
                start.and_then(|f| f.alpha.as_deref()),
            )
            .map(Some)
        }
    }
}

/// Outcome means for every arm the anchoring uses, given optional trial-a weights.
pub fn arm_means(
    anchoring: Anchoring,
    trial_a: &TrialIpd,
    weights: Option<&[f64]>,
    trial_b: TrialBView<'_>,
) -> Result<ArmMeans> {
    let (a_arms, b_arms) = anchoring.arms();
    let mut out = ArmMeans::new();
    for &arm in a_arms {
        let (estimate, kind) = match weights {
            Some(w) => (
                weighted_arm_mean(&trial_a.outcome, &trial_a.arms, w, arm)?,
                MeanKind::Weighted,
            ),
            None => (trial_a.arm_mean(arm)?, MeanKind::Observed),
        };
        out.insert((TrialLabel::A, arm), ArmMean { estimate, kind });
    }
    for &arm in b_arms {
        let estimate = match trial_b {
            TrialBView::Ipd(t) => t.arm_mean(arm)?,
            TrialBView::Aggregate(agd) => agd.arm(arm)?.mean,
        };
        out.insert(
            (TrialLabel::B, arm),
            ArmMean {
                estimate,
                kind: MeanKind::Observed,
            },
        );
    }
    Ok(out)
}

/// Point estimate on already prepared data. Weight-fit failures are
/// reported in the result rather than returned as errors.
pub fn point_estimate(spec: &EstimatorSpec, prepared: &Prepared) -> PointEstimate {
    let view = prepared.trial_b.as_view();
    let a = &prepared.trial_a;
    let fit = match fit_weights(spec, a, view, None) {
        Ok(f) => f,
        Err(e) => {
            return PointEstimate {
                delta_hat: None,
                arm_means: None,
                weight_fit: None,
                ess: 0.0,
                converged: false,
                diagnostic: Some(e.to_string()),
            }
        }
    };
    let (ess, converged, mut diagnostic) = match &fit {
        Some(f) => (f.ess, f.converged, f.diagnostic.clone()),
        None => (a.len() as f64, true, None),
    };
    let means = arm_means(spec.anchoring, a, fit.as_ref().map(|f| f.weights.as_slice()), view);
    let (delta_hat, arm_means) = match means {
        Ok(m) => (estimate(&m, spec.anchoring).ok(), Some(m)),
        Err(e) => {
            diagnostic.get_or_insert_with(|| e.to_string());
            (None, None)
        }
    };
    PointEstimate {
        delta_hat,
        arm_means,
        weight_fit: fit,
        ess,
        converged: converged && delta_hat.is_some(),
        diagnostic,
    }
}

/// A full estimate: point estimate, weights and bootstrap inference.
#[derive(Debug, Clone)]
pub struct EstimatorRun {
    pub record: EstimateRecord,
    pub point: PointEstimate,
    pub bootstrap: Option<crate::inference::BootstrapOutcome>,
}

/// Runs one estimator with bootstrap standard errors.
///
/// Only malformed input (missing arms or covariates, wrong view for the
/// method) is an error; solver failures produce a record with
/// `converged = false`.
pub fn run_estimator(
    spec: &EstimatorSpec,
    trial_a: &TrialIpd,
    trial_b: TrialBView<'_>,
    plan: &BootstrapPlan,
) -> Result<EstimatorRun> {
    let prepared = prepare(spec, trial_a, trial_b)?;
    let point = point_estimate(spec, &prepared);
    let mut record = EstimateRecord {
        spec: spec.clone(),
        delta_hat: point.delta_hat,
        se: None,
        ci_low: None,
        ci_high: None,
        ess: point.ess,
        converged: point.converged,
        iteration: 0,
        seed: plan.seed,
        link: "identity".into(),
        diagnostic: point.diagnostic.clone(),
    };
    let mut bootstrap = None;
    if point.delta_hat.is_some() {
        let boot = bootstrap_arm_variances(spec, &prepared, point.weight_fit.as_ref(), plan)?;
        if let Some(vars) = &boot.variances {
            let (se, _) = combine_variance(vars, spec.anchoring, point.delta_hat.unwrap_or(0.0))?;
            record.set_se(Some(se));
        }
        if !boot.reliable {
            record.converged = false;
            record.diagnostic.get_or_insert_with(|| {
                format!(
                    "bootstrap unreliable: {} of {} replicates failed",
                    boot.failed, boot.replicates
                )
            });
        }
        bootstrap = Some(boot);
    }
    Ok(EstimatorRun {
        record,
        point,
        bootstrap,
    })
}

/// Weighted trial-a covariate means; handy for balance diagnostics.
pub fn weighted_covariate_means(trial_a: &TrialIpd, weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    (0..trial_a.covariates.ncols())
        .map(|j| {
            trial_a
                .covariates
                .column(j)
                .zip(weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
                / total
        })
        .collect()
}

/// Kish ESS of a weight vector, or the count when unweighted.
pub fn ess_or_count(weights: Option<&[f64]>, n: usize) -> Result<f64> {
    weights.map_or(Ok(n as f64), effective_sample_size)
}
