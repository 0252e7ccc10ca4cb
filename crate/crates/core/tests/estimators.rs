use paic::estimators::{run_estimator, TrialBView};
use paic::inference::{resample_by_arm, BootstrapPlan};
use paic::model::covariate_moments;
use paic::weights::{fit_logistic, maic_weights, maic_weights_from, LogisticOptions, MaicOptions, UNATTAINABLE};
use paic::{AggregateData, Anchoring, Arm, CovariateSet, EstimatorSpec, Method, MomentOrder, TrialIpd};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A randomized trial with `n` subjects per arm, covariates drawn as
/// `shift + N(0, 1)` and outcome `x1 + 2 x2 + (arm effect) + noise`.
fn trial(id: &str, arms: [Arm; 2], n: usize, shift: f64, seed: u64) -> TrialIpd {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::new();
    let mut arm_col = Vec::new();
    let mut outcome = Vec::new();
    for &arm in &arms {
        for _ in 0..n {
            let x1 = shift + rng.sample::<f64, _>(StandardNormal);
            let x2 = shift + rng.sample::<f64, _>(StandardNormal);
            let effect = match arm {
                Arm::A => 1.0 + 2.0 * x1,
                Arm::B => 1.0,
                Arm::C => 0.0,
            };
            values.extend([x1, x2]);
            arm_col.push(arm);
            outcome.push(x1 + 2.0 * x2 + effect + rng.sample::<f64, _>(StandardNormal));
        }
    }
    let rows = arm_col.len();
    TrialIpd {
        trial_id: id.into(),
        ids: (0..rows as u64).map(|i| i + seed * 100_000).collect(),
        covariates: CovariateSet::new(vec!["x1".into(), "x2".into()], values, rows).unwrap(),
        arms: arm_col,
        outcome,
    }
}

fn weighted_mean(values: impl Iterator<Item = f64>, w: &[f64]) -> f64 {
    values.zip(w).map(|(x, w)| x * w).sum::<f64>() / w.iter().sum::<f64>()
}

#[test]
fn logistic_fit_matches_saturated_closed_form() {
    // One binary covariate: the MLE reproduces the group log-odds exactly.
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (group, n, positives) in [(0.0, 40, 10), (1.0, 60, 45)] {
        for i in 0..n {
            x.push(group);
            y.push(i < positives);
        }
    }
    let features = CovariateSet::new(vec!["g".into()], x, 100).unwrap();
    let fit = fit_logistic(&features, &y, LogisticOptions::default()).unwrap();
    let logit = |p: f64| (p / (1.0 - p)).ln();
    assert!(fit.converged);
    assert!((fit.coefficients[0] - logit(0.25)).abs() < 1e-8);
    assert!((fit.coefficients[1] - (logit(0.75) - logit(0.25))).abs() < 1e-8);
}

#[test]
fn maic_binary_covariate_matches_closed_form() {
    // Weights exp(alpha g): the weighted share of g = 1 is
    // n1 e^alpha / (n0 + n1 e^alpha), solved for alpha.
    let (n0, n1, m) = (70.0, 30.0, 0.6);
    let x: Vec<f64> = (0..100).map(|i| if i < 70 { 0.0 } else { 1.0 }).collect();
    let features = CovariateSet::new(vec!["g".into()], x, 100).unwrap();
    let mut target = covariate_moments(&features, MomentOrder::First).unwrap();
    target.means = vec![m];
    let fit = maic_weights(&features, &target, MomentOrder::First, MaicOptions::default()).unwrap();
    let alpha = (m * n0 / ((1.0 - m) * n1)).ln();
    assert!(fit.converged);
    assert!((fit.alpha.unwrap()[0] - alpha).abs() < 1e-8);
}

#[test]
fn maic2_matches_means_and_variances() {
    let a = trial("a", [Arm::A, Arm::C], 200, 0.0, 1);
    let b = trial("b", [Arm::B, Arm::C], 200, 0.4, 2);
    let target = covariate_moments(&b.covariates, MomentOrder::Second).unwrap();
    let fit = maic_weights(&a.covariates, &target, MomentOrder::Second, MaicOptions::default()).unwrap();
    assert!(fit.converged);
    for j in 0..2 {
        let m = weighted_mean(a.covariates.column(j), &fit.weights);
        let sq = weighted_mean(a.covariates.column(j).map(|x| x * x), &fit.weights);
        let vb = target.variances.as_ref().unwrap()[j];
        assert!((m - target.means[j]).abs() < 1e-6);
        assert!((sq - (vb + target.means[j].powi(2))).abs() < 1e-6);
    }
}

#[test]
fn maic_weights_are_uniform_at_own_moments() {
    let a = trial("a", [Arm::A, Arm::C], 150, 0.0, 3);
    let mut target = covariate_moments(&a.covariates, MomentOrder::Second).unwrap();
    // Targets carry n - 1 variances; uniform weights reproduce the 1/n ones.
    let n = a.len() as f64;
    target.variances.iter_mut().flatten().for_each(|v| *v *= (n - 1.0) / n);
    for order in [MomentOrder::First, MomentOrder::Second] {
        let fit = maic_weights(&a.covariates, &target, order, MaicOptions::default()).unwrap();
        let w = fit.normalized();
        assert!(w.iter().all(|w| (w - 1.0).abs() < 1e-8));
        assert!((fit.ess - 300.0).abs() < 1e-6);
    }
}

#[test]
fn maic_reports_target_outside_the_hull() {
    let a = trial("a", [Arm::A, Arm::C], 100, 0.0, 4);
    let mut target = covariate_moments(&a.covariates, MomentOrder::First).unwrap();
    target.means[0] = a.covariates.column(0).fold(f64::NEG_INFINITY, f64::max) + 0.5;
    let fit = maic_weights(&a.covariates, &target, MomentOrder::First, MaicOptions::default()).unwrap();
    assert!(!fit.converged);
    assert_eq!(fit.diagnostic.as_deref(), Some(UNATTAINABLE));
}

#[test]
fn warm_started_maic_converges_immediately() {
    let a = trial("a", [Arm::A, Arm::C], 250, 0.0, 5);
    let b = trial("b", [Arm::B, Arm::C], 250, 0.5, 6);
    let target = covariate_moments(&b.covariates, MomentOrder::Second).unwrap();
    let opts = MaicOptions::default();
    let cold = maic_weights(&a.covariates, &target, MomentOrder::Second, opts).unwrap();
    let warm = maic_weights_from(&a.covariates, &target, MomentOrder::Second, opts, cold.alpha.as_deref()).unwrap();
    assert!(warm.converged);
    assert!(warm.iterations <= 1, "{} iterations", warm.iterations);
    for (x, y) in warm.weights.iter().zip(&cold.weights) {
        assert!((x / y - 1.0).abs() < 1e-6);
    }
}

#[test]
fn psw_is_nearly_unweighted_without_population_difference() {
    let a = trial("a", [Arm::A, Arm::C], 1000, 0.0, 7);
    let b = trial("b", [Arm::B, Arm::C], 1000, 0.0, 8);
    let plan = BootstrapPlan::new(20, 1);
    let psw = EstimatorSpec::new(Method::Psw, Anchoring::Anchored, ["x1", "x2"]).unwrap();
    let raw = EstimatorSpec::new(Method::Unweighted, Anchoring::Anchored, Vec::<String>::new()).unwrap();
    let w = run_estimator(&psw, &a, TrialBView::Ipd(&b), &plan).unwrap();
    let u = run_estimator(&raw, &a, TrialBView::Ipd(&b), &plan).unwrap();
    assert!(w.record.converged);
    assert!(w.record.ess > 0.9 * 2000.0, "ess {}", w.record.ess);
    let diff = w.record.delta_hat.unwrap() - u.record.delta_hat.unwrap();
    assert!(diff.abs() < 0.1, "psw minus unweighted {diff}");
}

#[test]
fn unweighted_estimates_match_hand_computed_arm_means() {
    let a = trial("a", [Arm::A, Arm::C], 50, 0.0, 9);
    let b = trial("b", [Arm::B, Arm::C], 50, 0.0, 10);
    let plan = BootstrapPlan::new(10, 2);
    let mean = |t: &TrialIpd, arm| {
        let idx = t.arm_indices(arm);
        idx.iter().map(|&i| t.outcome[i]).sum::<f64>() / idx.len() as f64
    };
    let anchored = (mean(&a, Arm::A) - mean(&a, Arm::C)) - (mean(&b, Arm::B) - mean(&b, Arm::C));
    let unanchored = mean(&a, Arm::A) - mean(&b, Arm::B);
    for (anchoring, expected) in [(Anchoring::Anchored, anchored), (Anchoring::Unanchored, unanchored)] {
        let spec = EstimatorSpec::new(Method::Unweighted, anchoring, Vec::<String>::new()).unwrap();
        let got = run_estimator(&spec, &a, TrialBView::Ipd(&b), &plan).unwrap().record;
        assert!((got.delta_hat.unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn bootstrap_se_matches_analytic_standard_error() {
    // For raw arm means the bootstrap variance estimates s^2 / n per arm.
    let a = trial("a", [Arm::A, Arm::C], 250, 0.0, 11);
    let b = trial("b", [Arm::B, Arm::C], 250, 0.0, 12);
    let plan = BootstrapPlan::new(2000, 3);
    let spec = EstimatorSpec::new(Method::Unweighted, Anchoring::Anchored, Vec::<String>::new()).unwrap();
    let rec = run_estimator(&spec, &a, TrialBView::Ipd(&b), &plan).unwrap().record;
    let arm_var = |t: &TrialIpd, arm| {
        let y: Vec<f64> = t.arm_indices(arm).iter().map(|&i| t.outcome[i]).collect();
        let n = y.len() as f64;
        let m = y.iter().sum::<f64>() / n;
        y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0) / n
    };
    let analytic = arm_var(&a, Arm::A) + arm_var(&a, Arm::C) + arm_var(&b, Arm::B) + arm_var(&b, Arm::C);
    let ratio = rec.se.unwrap().powi(2) / analytic;
    assert!((ratio - 1.0).abs() < 0.1, "variance ratio {ratio}");
    let se = rec.se.unwrap();
    assert!((rec.ci_high.unwrap() - rec.ci_low.unwrap() - 2.0 * 1.96 * se).abs() < 1e-12);
}

#[test]
fn constant_outcomes_have_zero_standard_error() {
    let mut a = trial("a", [Arm::A, Arm::C], 40, 0.0, 13);
    let mut b = trial("b", [Arm::B, Arm::C], 40, 0.3, 14);
    a.outcome.iter_mut().for_each(|y| *y = 2.0);
    b.outcome.iter_mut().for_each(|y| *y = 1.0);
    let spec = EstimatorSpec::new(Method::Maic1, Anchoring::Unanchored, ["x1"]).unwrap();
    let rec = run_estimator(&spec, &a, TrialBView::Ipd(&b), &BootstrapPlan::new(50, 4))
        .unwrap()
        .record;
    assert!((rec.delta_hat.unwrap() - 1.0).abs() < 1e-12);
    assert!(rec.se.unwrap().abs() < 1e-12);
}

#[test]
fn resampling_keeps_arm_sizes() {
    let a = trial("a", [Arm::A, Arm::C], 37, 0.0, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = resample_by_arm(&a, &mut rng);
    assert_eq!(r.arm_count(Arm::A), 37);
    assert_eq!(r.arm_count(Arm::C), 37);
    // Every resampled subject keeps its arm.
    for (i, id) in r.ids.iter().enumerate() {
        let src = a.ids.iter().position(|x| x == id).unwrap();
        assert_eq!(a.arms[src], r.arms[i]);
        assert_eq!(a.outcome[src], r.outcome[i]);
    }
}

#[test]
fn psw_rejects_summary_only_trial_b() {
    let a = trial("a", [Arm::A, Arm::C], 30, 0.0, 16);
    let b = trial("b", [Arm::B, Arm::C], 30, 0.0, 17);
    let agd = AggregateData::from_trial(&b).unwrap();
    let spec = EstimatorSpec::new(Method::Psw, Anchoring::Anchored, ["x1"]).unwrap();
    assert!(run_estimator(&spec, &a, TrialBView::Aggregate(&agd), &BootstrapPlan::new(5, 0)).is_err());
}

#[test]
fn summary_trial_b_needs_published_variances() {
    let a = trial("a", [Arm::A, Arm::C], 30, 0.0, 18);
    let b = trial("b", [Arm::B, Arm::C], 30, 0.0, 19);
    let agd = AggregateData::from_trial(&b).unwrap();
    let spec = EstimatorSpec::new(Method::Maic1, Anchoring::Anchored, ["x1"]).unwrap();
    let err = run_estimator(&spec, &a, TrialBView::Aggregate(&agd), &BootstrapPlan::new(5, 0)).unwrap_err();
    assert!(matches!(err, paic::Error::MissingArmVariance(_)));
}
