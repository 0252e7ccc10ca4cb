//! Nonparametric bootstrap variances of arm means and their combination
//! into a standard error for the indirect comparison.
//!
//! Replicate `r` resamples trial a from sub-stream `2r` and trial b from
//! sub-stream `2r + 1` of the plan seed, each stratified by arm. Weighted
//! estimators refit their weights in every replicate; MAIC keeps the
//! trial-b moment targets fixed.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{fit_weights, weighted_arm_mean, Prepared, TrialBView};
use crate::harness::seed::{substream, Stream};
use crate::model::{Anchoring, Arm, EstimatorSpec, TrialIpd, TrialLabel};
use crate::weights::WeightFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub replicates: usize,
    pub seed: u64,
    /// Keep per-replicate arm means for export.
    pub keep_replicates: bool,
}

impl BootstrapPlan {
    pub const DEFAULT_REPLICATES: usize = 2000;

    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            keep_replicates: false,
        }
    }

    pub fn trial_a_stream(&self, replicate: usize) -> Stream {
        substream(self.seed, 2 * replicate as u64)
    }

    pub fn trial_b_stream(&self, replicate: usize) -> Stream {
        substream(self.seed, 2 * replicate as u64 + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub trial: TrialLabel,
    pub arm: Arm,
    pub mean: Option<f64>,
    pub converged: bool,
}

pub type ArmVariances = BTreeMap<(TrialLabel, Arm), f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutcome {
    /// `None` when fewer than two usable replicates remain.
    pub variances: Option<ArmVariances>,
    pub replicates: usize,
    pub failed: usize,
    /// False when more than half of the replicates failed to refit weights.
    pub reliable: bool,
    pub rows: Vec<ReplicateRow>,
}

/// Resamples subjects with replacement within each arm, keeping arm sizes.
pub fn resample_by_arm<R: Rng + ?Sized>(trial: &TrialIpd, rng: &mut R) -> TrialIpd {
    let mut rows = Vec::with_capacity(trial.len());
    for arm in Arm::ALL {
        let idx = trial.arm_indices(arm);
        if idx.is_empty() {
            continue;
        }
        rows.extend((0..idx.len()).map(|_| idx[rng.random_range(0..idx.len())]));
    }
    trial.take_rows(&rows)
}

pub fn sample_variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
}

/// Bootstrap variance of each observed arm mean of trial b.
///
/// This is the same resampling the estimators use for trial b, so the
/// result can be published as `variance_of_mean` in aggregate data and
/// reproduces the in-memory inference exactly.
pub fn observed_arm_variances(trial_b: &TrialIpd, plan: &BootstrapPlan) -> Result<BTreeMap<Arm, f64>> {
    let arms: Vec<Arm> = Arm::ALL.into_iter().filter(|&a| trial_b.arm_count(a) > 0).collect();
    let mut draws: BTreeMap<Arm, Vec<f64>> = arms.iter().map(|&a| (a, Vec::new())).collect();
    for r in 0..plan.replicates {
        let resampled = resample_by_arm(trial_b, &mut plan.trial_b_stream(r));
        for &arm in &arms {
            draws.get_mut(&arm).expect("arm").push(resampled.arm_mean(arm)?);
        }
    }
    draws
        .into_iter()
        .map(|(arm, v)| {
            sample_variance(&v)
                .map(|var| (arm, var))
                .ok_or(Error::Invalid("need at least 2 bootstrap replicates".into()))
        })
        .collect()
}

/// Bootstrap variance of every arm mean the estimate uses. Weight refits
/// start from `point_fit`, the fit on the original sample.
pub fn bootstrap_arm_variances(
    spec: &EstimatorSpec,
    prepared: &Prepared,
    point_fit: Option<&WeightFit>,
    plan: &BootstrapPlan,
) -> Result<BootstrapOutcome> {
    if plan.replicates == 0 {
        return Err(Error::Invalid("bootstrap needs at least 1 replicate".into()));
    }
    let (a_arms, b_arms) = spec.anchoring.arms();
    let b_source = prepared.trial_b.resampling_source();
    let mut draws: BTreeMap<(TrialLabel, Arm), Vec<f64>> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut failed = 0;

    for r in 0..plan.replicates {
        let a_rep = resample_by_arm(&prepared.trial_a, &mut plan.trial_a_stream(r));
        let b_rep = b_source.map(|b| resample_by_arm(b, &mut plan.trial_b_stream(r)));
        let view = match (&b_rep, prepared.trial_b.as_view()) {
            (Some(b), TrialBView::Ipd(_)) => TrialBView::Ipd(b),
            (_, fixed) => fixed,
        };
        let a_means: Option<Vec<f64>> = match fit_weights(spec, &a_rep, view, point_fit) {
            Ok(None) => a_arms.iter().map(|&arm| a_rep.arm_mean(arm).ok()).collect(),
            Ok(Some(fit)) if fit.converged => a_arms
                .iter()
                .map(|&arm| weighted_arm_mean(&a_rep.outcome, &a_rep.arms, &fit.weights, arm).ok())
                .collect(),
            _ => None,
        };
        let ok = a_means.is_some();
        if !ok {
            failed += 1;
        }
        for (k, &arm) in a_arms.iter().enumerate() {
            let mean = a_means.as_ref().map(|m| m[k]);
            if let Some(m) = mean {
                draws.entry((TrialLabel::A, arm)).or_default().push(m);
            }
            if plan.keep_replicates {
                rows.push(ReplicateRow {
                    replicate: r,
                    trial: TrialLabel::A,
                    arm,
                    mean,
                    converged: ok,
                });
            }
        }
        if let Some(b) = &b_rep {
            for &arm in b_arms {
                let m = b.arm_mean(arm)?;
                draws.entry((TrialLabel::B, arm)).or_default().push(m);
                if plan.keep_replicates {
                    rows.push(ReplicateRow {
                        replicate: r,
                        trial: TrialLabel::B,
                        arm,
                        mean: Some(m),
                        converged: true,
                    });
                }
            }
        }
    }

    let mut variances = ArmVariances::new();
    let mut complete = true;
    for &arm in a_arms {
        match draws.get(&(TrialLabel::A, arm)).and_then(|v| sample_variance(v)) {
            Some(v) => {
                variances.insert((TrialLabel::A, arm), v);
            }
            None => complete = false,
        }
    }
    for &arm in b_arms {
        let v = match b_source {
            Some(_) => draws.get(&(TrialLabel::B, arm)).and_then(|v| sample_variance(v)),
            None => match prepared.trial_b.as_view() {
                TrialBView::Aggregate(agd) => Some(
                    agd.arm(arm)?
                        .variance_of_mean
                        .ok_or_else(|| Error::MissingArmVariance(arm.to_string()))?,
                ),
                TrialBView::Ipd(_) => None,
            },
        };
        match v {
            Some(v) => {
                variances.insert((TrialLabel::B, arm), v);
            }
            None => complete = false,
        }
    }
    Ok(BootstrapOutcome {
        variances: complete.then_some(variances),
        replicates: plan.replicates,
        failed,
        reliable: 2 * failed <= plan.replicates,
        rows,
    })
}

/// Standard error as the square root of the summed arm variances, with the
/// 95% normal interval around `estimate`.
pub fn combine_variance(
    arm_variances: &ArmVariances,
    anchoring: Anchoring,
    estimate: f64,
) -> Result<(f64, (f64, f64))> {
    let (a_arms, b_arms) = anchoring.arms();
    let mut total = 0.0;
    for (trial, arms) in [(TrialLabel::A, a_arms), (TrialLabel::B, b_arms)] {
        for &arm in arms {
            total += arm_variances
                .get(&(trial, arm))
                .ok_or_else(|| Error::MissingArmVariance(format!("{arm} in trial {trial}")))?;
        }
    }
    let se = total.sqrt();
    let z = crate::model::EstimateRecord::Z95;
    Ok((se, (estimate - z * se, estimate + z * se)))
}
