//! The eight data-generating mechanisms of the simulation study.
//!
//! Every mechanism draws two i.i.d. covariates, assigns trial membership
//! through a logistic model `P(T = b | x) = g(delta * (c * beta0 + s(x)))`,
//! randomizes arms 1:1 inside each trial and generates outcomes from
//!
//! ```text
//! Y = x1 + 2 x2 + (1 + 2 x1) I(Z = A) + I(Z = B) + eps,   eps ~ N(0, 1)
//! ```
//!
//! so `x1` is both prognostic and an effect modifier while `x2` is
//! prognostic only. The intercept `beta0` is calibrated per mechanism so
//! that half of the population belongs to trial b.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arm, CovariateSet, TrialIpd, TrialLabel};

pub const SUPERPOPULATION_N: usize = 2_000_000;
pub const CALIBRATION_TOLERANCE: f64 = 1e-4;
const TRUNCATION_POINT: f64 = 5.0;
const BRACKET_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateFamily {
    /// N(0, 1).
    Normal,
    /// LogNormal(0, 0.5), right-truncated at 5 by `min(x, 5)`.
    TruncLognormal,
    /// Equal mixture of N(0, 0.5) and N(3, 0.5).
    BimodalTight,
    /// Equal mixture of N(0, 1) and N(3, 1).
    BimodalWide,
}

/// How the second parameter of the normal and log-normal families is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadReading {
    #[default]
    StandardDeviation,
    Variance,
}

impl SpreadReading {
    fn sd(self, param: f64) -> f64 {
        match self {
            SpreadReading::StandardDeviation => param,
            SpreadReading::Variance => param.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgmSpec {
    pub id: u8,
    pub family: CovariateFamily,
    /// Direction of the assignment mechanism, +1 or -1.
    pub delta: f64,
    pub beta0: Option<f64>,
    pub spread: SpreadReading,
}

impl DgmSpec {
    pub fn new(id: u8) -> Result<Self> {
        let (family, delta) = match id {
            1 => (CovariateFamily::Normal, 1.0),
            2 => (CovariateFamily::Normal, -1.0),
            3 => (CovariateFamily::TruncLognormal, -1.0),
            4 => (CovariateFamily::TruncLognormal, 1.0),
            5 => (CovariateFamily::BimodalTight, 1.0),
            6 => (CovariateFamily::BimodalTight, -1.0),
            7 => (CovariateFamily::BimodalWide, 1.0),
            8 => (CovariateFamily::BimodalWide, -1.0),
            _ => return Err(Error::Invalid(format!("DGM id must be 1..8, got {id}"))),
        };
        Ok(Self {
            id,
            family,
            delta,
            beta0: None,
            spread: SpreadReading::default(),
        })
    }

    pub fn all() -> Vec<Self> {
        (1..=8).map(|id| Self::new(id).expect("valid id")).collect()
    }

    pub fn with_beta0(mut self, beta0: f64) -> Self {
        self.beta0 = Some(beta0);
        self
    }

    pub fn with_spread(mut self, spread: SpreadReading) -> Self {
        self.spread = spread;
        self
    }

    /// Even-numbered mechanisms restrict the overlap of trial b with trial a.
    pub fn positivity_violation(&self) -> bool {
        self.id.is_multiple_of(2)
    }

    fn beta0_coefficient(&self) -> f64 {
        match self.family {
            CovariateFamily::Normal => 1.0,
            CovariateFamily::TruncLognormal => 2.0,
            CovariateFamily::BimodalTight | CovariateFamily::BimodalWide => 0.5,
        }
    }

    /// Covariate part of the assignment score, before the intercept and the sign.
    fn covariate_score(&self, x1: f64, x2: f64) -> f64 {
        match self.family {
            // The second covariate enters linearly here: `x2 - 0.5 x2`.
            CovariateFamily::Normal => x1 - 0.5 * x1 * x1 + x2 - 0.5 * x2,
            CovariateFamily::TruncLognormal => 2.0 * x1 + 2.0 * x2,
            CovariateFamily::BimodalTight | CovariateFamily::BimodalWide => {
                0.5 * x1 - 0.5 * x1 * x1 + 0.5 * x2 - 0.5 * x2 * x2
            }
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        match self.family {
            CovariateFamily::Normal => z,
            CovariateFamily::TruncLognormal => (self.spread.sd(0.5) * z).exp().min(TRUNCATION_POINT),
            CovariateFamily::BimodalTight | CovariateFamily::BimodalWide => {
                let param = if self.family == CovariateFamily::BimodalTight {
                    0.5
                } else {
                    1.0
                };
                let centre = if rng.random::<bool>() { 3.0 } else { 0.0 };
                centre + self.spread.sd(param) * z
            }
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Signed assignment score `delta * (c * beta0 + s(x1, x2))`; `P(T = b) = logistic(score)`.
pub fn linear_predictor(dgm: &DgmSpec, x1: f64, x2: f64) -> Result<f64> {
    let beta0 = dgm.beta0.ok_or(Error::UncalibratedDgm(dgm.id))?;
    Ok(dgm.delta * (dgm.beta0_coefficient() * beta0 + dgm.covariate_score(x1, x2)))
}

pub fn sample_covariates<R: Rng + ?Sized>(dgm: &DgmSpec, n: usize, rng: &mut R) -> Result<CovariateSet> {
    if n == 0 {
        return Err(Error::Invalid("sample size must be positive".into()));
    }
    let mut values = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        values.push(dgm.draw(rng));
    }
    CovariateSet::new(vec!["x1".into(), "x2".into()], values, n)
}

/// Finds the offset `b` with `mean_i logistic(sign * (coef * b + score_i)) = 0.5`.
///
/// The mean is monotone in `b`, so a bracket is grown geometrically from
/// [-1, 1] and then bisected to machine precision.
pub fn calibrate_offset(scores: &[f64], coef: f64, sign: f64, tolerance: f64) -> Option<f64> {
    let excess = |b: f64| {
        let s: f64 = scores.iter().map(|&v| logistic(sign * (coef * b + v))).sum();
        s / scores.len() as f64 - 0.5
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    let (mut f_lo, mut f_hi) = (excess(lo), excess(hi));
    while f_lo.signum() == f_hi.signum() && f_lo != 0.0 && f_hi != 0.0 {
        if hi >= BRACKET_LIMIT {
            return None;
        }
        lo *= 2.0;
        hi *= 2.0;
        f_lo = excess(lo);
        f_hi = excess(hi);
    }
    if f_lo == 0.0 {
        return Some(lo);
    }
    if f_hi == 0.0 {
        return Some(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = excess(mid);
        if f_mid == 0.0 {
            return Some(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    let root = 0.5 * (lo + hi);
    (excess(root).abs() <= tolerance).then_some(root)
}

/// Calibrates `beta0` on a fresh covariate sample so that the marginal
/// probability of trial-b membership is 0.5.
pub fn calibrate_beta0<R: Rng + ?Sized>(
    dgm: &DgmSpec,
    n_calibration: usize,
    tolerance: f64,
    rng: &mut R,
) -> Result<f64> {
    if tolerance <= 0.0 {
        return Err(Error::Invalid("tolerance must be positive".into()));
    }
    let cov = sample_covariates(dgm, n_calibration, rng)?;
    let scores: Vec<f64> = (0..cov.nrows())
        .map(|i| dgm.covariate_score(cov.get(i, 0), cov.get(i, 1)))
        .collect();
    calibrate_offset(&scores, dgm.beta0_coefficient(), dgm.delta, tolerance).ok_or(Error::CalibrationFailed(dgm.id))
}

/// A large population from which trials are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperPopulation {
    pub covariates: CovariateSet,
    pub trial: Vec<TrialLabel>,
    pub pi: Vec<f64>,
}

impl SuperPopulation {
    pub fn len(&self) -> usize {
        self.trial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trial.is_empty()
    }

    pub fn stratum(&self, label: TrialLabel) -> Vec<usize> {
        self.trial
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == label).then_some(i))
            .collect()
    }
}

pub fn generate_superpopulation<R: Rng + ?Sized>(dgm: &DgmSpec, n: usize, rng: &mut R) -> Result<SuperPopulation> {
    if dgm.beta0.is_none() {
        return Err(Error::UncalibratedDgm(dgm.id));
    }
    let covariates = sample_covariates(dgm, n, rng)?;
    let mut pi = Vec::with_capacity(n);
    let mut trial = Vec::with_capacity(n);
    for i in 0..n {
        let p = logistic(linear_predictor(dgm, covariates.get(i, 0), covariates.get(i, 1))?);
        pi.push(p);
        trial.push(if rng.random::<f64>() < p {
            TrialLabel::B
        } else {
            TrialLabel::A
        });
    }
    Ok(SuperPopulation { covariates, trial, pi })
}

pub fn simulate_outcome(x1: f64, x2: f64, arm: Arm, noise: f64) -> f64 {
    let treat_a = if arm == Arm::A { 1.0 + 2.0 * x1 } else { 0.0 };
    let treat_b = if arm == Arm::B { 1.0 } else { 0.0 };
    x1 + 2.0 * x2 + treat_a + treat_b + noise
}

/// Index lists of the two trial strata, computed once per population.
#[derive(Debug, Clone)]
pub struct Strata {
    a: Vec<usize>,
    b: Vec<usize>,
}

impl Strata {
    pub fn new(pop: &SuperPopulation) -> Self {
        Self {
            a: pop.stratum(TrialLabel::A),
            b: pop.stratum(TrialLabel::B),
        }
    }
}

/// Draws one two-arm trial from each stratum of the population.
///
/// `sampling` selects subjects and outcome noise; `assignment` randomizes
/// arms 1:1 within each trial.
pub fn sample_trials<R: Rng + ?Sized>(
    pop: &SuperPopulation,
    strata: &Strata,
    n_per_arm: usize,
    sampling: &mut R,
    assignment: &mut R,
) -> Result<(TrialIpd, TrialIpd)> {
    let a = draw_trial(pop, &strata.a, "a", [Arm::A, Arm::C], n_per_arm, sampling, assignment)?;
    let b = draw_trial(pop, &strata.b, "b", [Arm::B, Arm::C], n_per_arm, sampling, assignment)?;
    Ok((a, b))
}

fn draw_trial<R: Rng + ?Sized>(
    pop: &SuperPopulation,
    stratum: &[usize],
    label: &str,
    arms: [Arm; 2],
    n_per_arm: usize,
    sampling: &mut R,
    assignment: &mut R,
) -> Result<TrialIpd> {
    let size = 2 * n_per_arm;
    if n_per_arm == 0 || stratum.len() < size {
        return Err(Error::InsufficientStratum {
            trial: label.into(),
            needed: size,
            available: stratum.len(),
        });
    }
    let rows: Vec<usize> = index::sample(sampling, stratum.len(), size)
        .into_iter()
        .map(|k| stratum[k])
        .collect();
    let mut allocation: Vec<Arm> = (0..size)
        .map(|k| if k < n_per_arm { arms[0] } else { arms[1] })
        .collect();
    allocation.shuffle(assignment);
    let covariates = pop.covariates.take_rows(&rows);
    let outcome = (0..size)
        .map(|k| {
            let noise: f64 = sampling.sample(StandardNormal);
            simulate_outcome(covariates.get(k, 0), covariates.get(k, 1), allocation[k], noise)
        })
        .collect();
    Ok(TrialIpd {
        trial_id: label.into(),
        ids: rows.iter().map(|&r| r as u64).collect(),
        covariates,
        arms: allocation,
        outcome,
    })
}

/// Marginal effect of A versus B in the trial-b population, noise excluded.
pub fn true_effect<R: Rng + ?Sized>(dgm: &DgmSpec, n: usize, rng: &mut R) -> Result<f64> {
    let pop = generate_superpopulation(dgm, n, rng)?;
    effect_in_population(&pop)
}

/// Mean of `Y(A) - Y(B)` over the trial-b stratum of an existing population.
pub fn effect_in_population(pop: &SuperPopulation) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in pop.stratum(TrialLabel::B) {
        let (x1, x2) = (pop.covariates.get(i, 0), pop.covariates.get(i, 1));
        total += simulate_outcome(x1, x2, Arm::A, 0.0) - simulate_outcome(x1, x2, Arm::B, 0.0);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoSubjects);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::seed::substream;

    #[test]
    fn dgm1_centre_is_even_odds() {
        let d = DgmSpec::new(1).unwrap().with_beta0(0.0);
        let lp = linear_predictor(&d, 0.0, 0.0).unwrap();
        assert_eq!(lp, 0.0);
        assert_eq!(logistic(lp), 0.5);
    }

    #[test]
    fn delta_flip_negates_predictor() {
        let d1 = DgmSpec::new(1).unwrap().with_beta0(0.3);
        let d2 = DgmSpec::new(2).unwrap().with_beta0(0.3);
        for (x1, x2) in [(0.1, -2.0), (1.5, 0.7), (-0.4, 3.0)] {
            let l1 = linear_predictor(&d1, x1, x2).unwrap();
            let l2 = linear_predictor(&d2, x1, x2).unwrap();
            assert_eq!(l1, -l2);
            assert!((logistic(l2) - (1.0 - logistic(l1))).abs() < 1e-15);
        }
    }

    #[test]
    fn dgm3_substitution() {
        let b = 0.7;
        let d = DgmSpec::new(3).unwrap().with_beta0(b);
        assert!((linear_predictor(&d, 1.0, 1.0).unwrap() - (-(2.0 * b + 4.0))).abs() < 1e-15);
    }

    #[test]
    fn uncalibrated_predictor_errors() {
        let d = DgmSpec::new(5).unwrap();
        assert!(matches!(linear_predictor(&d, 0.0, 0.0), Err(Error::UncalibratedDgm(5))));
    }

    #[test]
    fn positivity_flags_follow_ids() {
        for d in DgmSpec::all() {
            assert_eq!(d.positivity_violation(), [2, 4, 6, 8].contains(&d.id));
        }
        assert!(DgmSpec::new(9).is_err());
    }

    #[test]
    fn outcome_formula() {
        assert_eq!(simulate_outcome(0.0, 0.0, Arm::C, 0.0), 0.0);
        assert_eq!(simulate_outcome(1.0, 1.0, Arm::A, 0.0), 6.0);
        assert_eq!(simulate_outcome(1.0, 1.0, Arm::B, 0.0), 4.0);
        assert_eq!(simulate_outcome(1.0, 1.0, Arm::C, 0.5), 3.5);
    }

    #[test]
    fn degenerate_offset_is_zero() {
        let scores = vec![0.0; 1000];
        let b = calibrate_offset(&scores, 1.0, 1.0, 1e-12).unwrap();
        assert!(b.abs() < 1e-12);
        let b = calibrate_offset(&scores, 0.5, -1.0, 1e-12).unwrap();
        assert!(b.abs() < 1e-12);
    }

    #[test]
    fn unreachable_offset_fails() {
        // Zero coefficient: the mean never moves.
        let scores = vec![3.0; 10];
        assert!(calibrate_offset(&scores, 0.0, 1.0, 1e-6).is_none());
    }

    #[test]
    fn truncation_caps_lognormal() {
        let mut rng = substream(1, 0);
        for id in [3, 4] {
            let d = DgmSpec::new(id).unwrap();
            let cov = sample_covariates(&d, 200_000, &mut rng).unwrap();
            let max = (0..2)
                .flat_map(|j| cov.column(j).collect::<Vec<_>>())
                .fold(f64::MIN, f64::max);
            assert!(max <= 5.0);
            let d = d.with_spread(SpreadReading::Variance);
            let cov = sample_covariates(&d, 200_000, &mut rng).unwrap();
            let max = cov.column(0).fold(f64::MIN, f64::max);
            assert_eq!(max, 5.0);
        }
    }

    #[test]
    fn zero_sample_rejected() {
        let mut rng = substream(1, 0);
        assert!(sample_covariates(&DgmSpec::new(1).unwrap(), 0, &mut rng).is_err());
    }

    #[test]
    fn insufficient_stratum_errors() {
        let d = DgmSpec::new(1).unwrap().with_beta0(0.0);
        let mut rng = substream(3, 0);
        let pop = generate_superpopulation(&d, 100, &mut rng).unwrap();
        let strata = Strata::new(&pop);
        let mut r2 = substream(3, 1);
        let err = sample_trials(&pop, &strata, 100, &mut rng, &mut r2).unwrap_err();
        assert!(matches!(err, Error::InsufficientStratum { .. }));
    }
}
