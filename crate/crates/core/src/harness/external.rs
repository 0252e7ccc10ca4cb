use crate::error::Result;
use crate::estimators::{run_estimator, TrialBView};
use crate::inference::{observed_arm_variances, BootstrapPlan, ReplicateRow};
use crate::io::{weight_rows, WeightRow};
use crate::model::{AggregateData, Anchoring, EstimateRecord, EstimatorSpec, TrialIpd};

/// Trial b as supplied by the user.
#[derive(Debug, Clone)]
pub enum ExternalB {
    Aggregate(AggregateData),
    Ipd(TrialIpd),
}

impl ExternalB {
    fn view(&self) -> TrialBView<'_> {
        match self {
            ExternalB::Aggregate(agd) => TrialBView::Aggregate(agd),
            ExternalB::Ipd(t) => TrialBView::Ipd(t),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExternalEstimate {
    pub record: EstimateRecord,
    pub weights: Vec<WeightRow>,
    pub replicates: Vec<ReplicateRow>,
}

/// Runs one estimator on user data. Weight rows cover the trial-a subjects
/// the estimator used.
pub fn estimate_external(
    trial_a: &TrialIpd,
    trial_b: &ExternalB,
    spec: &EstimatorSpec,
    plan: &BootstrapPlan,
) -> Result<ExternalEstimate> {
    let run = run_estimator(spec, trial_a, trial_b.view(), plan)?;
    let weights = match &run.point.weight_fit {
        Some(fit) => {
            let (a_arms, _) = spec.anchoring.arms();
            weight_rows(&trial_a.restrict_arms(a_arms), fit)
        }
        None => Vec::new(),
    };
    Ok(ExternalEstimate {
        record: run.record,
        weights,
        replicates: run.bootstrap.map(|b| b.rows).unwrap_or_default(),
    })
}

/// The aggregate data an analysis of `trial_b` under `anchoring` would
/// publish: moments and arm means over the arms it uses, with bootstrap
/// variances of the arm means drawn exactly as the estimators draw them.
pub fn publish_aggregate(trial_b: &TrialIpd, anchoring: Anchoring, plan: &BootstrapPlan) -> Result<AggregateData> {
    let (_, b_arms) = anchoring.arms();
    let used = trial_b.restrict_arms(b_arms);
    let mut agd = AggregateData::from_trial(&used)?;
    for (arm, var) in observed_arm_variances(&used, plan)? {
        if let Some(summary) = agd.arms.get_mut(&arm) {
            summary.variance_of_mean = Some(var);
        }
    }
    Ok(agd)
}
