//! Domain types shared across the crate: trial data, moment summaries,
//! estimator specifications and estimate records.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment arm. Trial a randomizes A vs C, trial b randomizes B vs C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    A,
    B,
    C,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::A, Arm::B, Arm::C];
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Arm::A => "A",
            Arm::B => "B",
            Arm::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Arm::A),
            "B" | "b" => Ok(Arm::B),
            "C" | "c" => Ok(Arm::C),
            other => Err(Error::Invalid(format!("unknown arm `{other}`"))),
        }
    }
}

/// Which side of the indirect comparison a quantity belongs to: the IPD
/// trial (a) or the target trial (b).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    A,
    B,
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialLabel::A => "a",
            TrialLabel::B => "b",
        })
    }
}

/// Named covariate columns stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSet {
    names: Vec<String>,
    values: Vec<f64>,
    nrows: usize,
}

impl CovariateSet {
    /// Builds a covariate matrix from row-major values. Every value must be finite.
    pub fn new(names: Vec<String>, values: Vec<f64>, nrows: usize) -> Result<Self> {
        let ncols = names.len();
        if values.len() != nrows * ncols {
            return Err(Error::LengthMismatch(values.len(), nrows * ncols));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos / ncols, pos % ncols);
            return Err(Error::Validation {
                row,
                field: names[col].clone(),
                message: "non-finite value".into(),
            });
        }
        Ok(Self { names, values, nrows })
    }

    pub fn from_columns(names: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::LengthMismatch(names.len(), columns.len()));
        }
        let nrows = columns.first().map_or(0, Vec::len);
        if let Some(bad) = columns.iter().find(|c| c.len() != nrows) {
            return Err(Error::LengthMismatch(bad.len(), nrows));
        }
        let mut values = Vec::with_capacity(nrows * columns.len());
        for i in 0..nrows {
            values.extend(columns.iter().map(|c| c[i]));
        }
        Self::new(names, values, nrows)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.ncols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ncols() + j]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        let p = self.ncols();
        self.values.iter().skip(j).step_by(p.max(1)).copied().take(self.nrows)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Keeps only the named columns, in the requested order.
    pub fn select<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.column_index(n.as_ref()).ok_or_else(|| Error::MissingCovariate {
                    name: n.as_ref().to_string(),
                    available: self.names.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(self.nrows * idx.len());
        for i in 0..self.nrows {
            let row = self.row(i);
            values.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(Self {
            names: names.iter().map(|n| n.as_ref().to_string()).collect(),
            values,
            nrows: self.nrows,
        })
    }

    pub fn take_rows(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.ncols());
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        Self {
            names: self.names.clone(),
            values,
            nrows: rows.len(),
        }
    }
}

/// Individual patient data for one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialIpd {
    pub trial_id: String,
    pub ids: Vec<u64>,
    pub covariates: CovariateSet,
    pub arms: Vec<Arm>,
    pub outcome: Vec<f64>,
}

impl TrialIpd {
    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }

    pub fn arm_indices(&self, arm: Arm) -> Vec<usize> {
        self.arms
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == arm).then_some(i))
            .collect()
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.arms.iter().filter(|&&a| a == arm).count()
    }

    pub fn take_rows(&self, rows: &[usize]) -> Self {
        Self {
            trial_id: self.trial_id.clone(),
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            covariates: self.covariates.take_rows(rows),
            arms: rows.iter().map(|&i| self.arms[i]).collect(),
            outcome: rows.iter().map(|&i| self.outcome[i]).collect(),
        }
    }

    /// Drops every subject whose arm is not in `keep`.
    pub fn restrict_arms(&self, keep: &[Arm]) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.arms[i])).collect();
        self.take_rows(&rows)
    }

    pub fn arm_mean(&self, arm: Arm) -> Result<f64> {
        let idx = self.arm_indices(arm);
        if idx.is_empty() {
            return Err(Error::MissingArm(arm.to_string()));
        }
        Ok(idx.iter().map(|&i| self.outcome[i]).sum::<f64>() / idx.len() as f64)
    }
}

/// Checks lengths, finiteness and arm membership. Returns the trial unchanged on success.
pub fn validate_trial(ipd: TrialIpd, expected_arms: &[Arm]) -> Result<TrialIpd> {
    let n = ipd.arms.len();
    if ipd.outcome.len() != n {
        return Err(Error::LengthMismatch(ipd.outcome.len(), n));
    }
    if ipd.ids.len() != n {
        return Err(Error::LengthMismatch(ipd.ids.len(), n));
    }
    if ipd.covariates.nrows() != n {
        return Err(Error::LengthMismatch(ipd.covariates.nrows(), n));
    }
    for (row, y) in ipd.outcome.iter().enumerate() {
        if !y.is_finite() {
            return Err(Error::Validation {
                row,
                field: "y".into(),
                message: "non-finite value".into(),
            });
        }
    }
    for i in 0..n {
        for (j, v) in ipd.covariates.row(i).iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Validation {
                    row: i,
                    field: ipd.covariates.names()[j].clone(),
                    message: "non-finite value".into(),
                });
            }
        }
    }
    for (row, arm) in ipd.arms.iter().enumerate() {
        if !expected_arms.contains(arm) {
            return Err(Error::Validation {
                row,
                field: "arm".into(),
                message: format!("unknown arm {arm} for trial {}", ipd.trial_id),
            });
        }
    }
    for &arm in expected_arms {
        if ipd.arm_count(arm) == 0 {
            return Err(Error::Validation {
                row: n,
                field: "arm".into(),
                message: format!("empty arm {arm} in trial {}", ipd.trial_id),
            });
        }
    }
    Ok(ipd)
}

/// Number of moments matched per covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentOrder {
    First = 1,
    Second = 2,
}

/// Per-covariate means and (for second-order summaries) sample variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub variances: Option<Vec<f64>>,
    pub n: usize,
}

impl MomentVector {
    pub fn order(&self) -> MomentOrder {
        if self.variances.is_some() {
            MomentOrder::Second
        } else {
            MomentOrder::First
        }
    }

    /// Restricts to the named covariates and to the requested order.
    pub fn project<S: AsRef<str>>(&self, names: &[S], order: MomentOrder) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.names
                    .iter()
                    .position(|m| m == n.as_ref())
                    .ok_or_else(|| Error::MissingCovariate {
                        name: n.as_ref().to_string(),
                        available: self.names.clone(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let variances = match order {
            MomentOrder::First => None,
            MomentOrder::Second => {
                let v = self
                    .variances
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("second-order matching needs covariate variances".into()))?;
                Some(idx.iter().map(|&j| v[j]).collect())
            }
        };
        Ok(Self {
            names: names.iter().map(|n| n.as_ref().to_string()).collect(),
            means: idx.iter().map(|&j| self.means[j]).collect(),
            variances,
            n: self.n,
        })
    }
}

/// Column means, plus `n - 1` divisor variances when `order` is second.
pub fn covariate_moments(covariates: &CovariateSet, order: MomentOrder) -> Result<MomentVector> {
    let n = covariates.nrows();
    if n == 0 {
        return Err(Error::NoSubjects);
    }
    if order == MomentOrder::Second && n < 2 {
        return Err(Error::VarianceUndefined(n));
    }
    let p = covariates.ncols();
    let means: Vec<f64> = (0..p).map(|j| covariates.column(j).sum::<f64>() / n as f64).collect();
    let variances = (order == MomentOrder::Second).then(|| {
        (0..p)
            .map(|j| {
                let m = means[j];
                covariates.column(j).map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
            })
            .collect()
    });
    Ok(MomentVector {
        names: covariates.names().to_vec(),
        means,
        variances,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub mean: f64,
    pub n: usize,
    /// Variance of the arm mean; needed for inference when only summaries exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_of_mean: Option<f64>,
}

/// Published-style summary of a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateData {
    pub trial_id: String,
    pub moments: MomentVector,
    pub arms: BTreeMap<Arm, ArmSummary>,
}

impl AggregateData {
    /// Summarizes a trial at second order (first order if it has a single subject).
    pub fn from_trial(ipd: &TrialIpd) -> Result<Self> {
        let order = if ipd.len() >= 2 {
            MomentOrder::Second
        } else {
            MomentOrder::First
        };
        let moments = covariate_moments(&ipd.covariates, order)?;
        let mut arms = BTreeMap::new();
        for arm in Arm::ALL {
            let n = ipd.arm_count(arm);
            if n > 0 {
                arms.insert(
                    arm,
                    ArmSummary {
                        mean: ipd.arm_mean(arm)?,
                        n,
                        variance_of_mean: None,
                    },
                );
            }
        }
        Ok(Self {
            trial_id: ipd.trial_id.clone(),
            moments,
            arms,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::Invalid(format!(
                "aggregate data for trial {} has no arm summaries",
                self.trial_id
            )));
        }
        if let Some((arm, _)) = self.arms.iter().find(|(_, s)| s.n == 0) {
            return Err(Error::Invalid(format!("arm {arm} has n = 0")));
        }
        if self.moments.n == 0 {
            return Err(Error::Invalid("aggregate data has n = 0".into()));
        }
        if let Some(v) = &self.moments.variances {
            if v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
                return Err(Error::Invalid("negative or non-finite variance".into()));
            }
        }
        Ok(())
    }

    pub fn arm(&self, arm: Arm) -> Result<&ArmSummary> {
        self.arms.get(&arm).ok_or_else(|| Error::MissingArm(arm.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Unweighted,
    Psw,
    Maic1,
    Maic2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Unweighted, Method::Psw, Method::Maic1, Method::Maic2];

    pub fn moment_order(self) -> Option<MomentOrder> {
        match self {
            Method::Maic1 => Some(MomentOrder::First),
            Method::Maic2 => Some(MomentOrder::Second),
            _ => None,
        }
    }

    pub fn is_weighted(self) -> bool {
        self != Method::Unweighted
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Unweighted => "unweighted",
            Method::Psw => "psw",
            Method::Maic1 => "maic1",
            Method::Maic2 => "maic2",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unweighted" => Ok(Method::Unweighted),
            "psw" => Ok(Method::Psw),
            "maic1" | "maic-1" => Ok(Method::Maic1),
            "maic2" | "maic-2" => Ok(Method::Maic2),
            other => Err(Error::Invalid(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchoring {
    Anchored,
    Unanchored,
}

impl Anchoring {
    /// Arms used from trial a and trial b.
    pub fn arms(self) -> (&'static [Arm], &'static [Arm]) {
        match self {
            Anchoring::Anchored => (&[Arm::A, Arm::C], &[Arm::B, Arm::C]),
            Anchoring::Unanchored => (&[Arm::A], &[Arm::B]),
        }
    }
}

impl fmt::Display for Anchoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Anchoring::Anchored => "anchored",
            Anchoring::Unanchored => "unanchored",
        })
    }
}

impl FromStr for Anchoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "anchored" => Ok(Anchoring::Anchored),
            "unanchored" => Ok(Anchoring::Unanchored),
            other => Err(Error::Invalid(format!("unknown anchoring `{other}`"))),
        }
    }
}

/// One estimator configuration: method, anchoring and adjustment covariates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub method: Method,
    pub anchoring: Anchoring,
    pub adjustment_set: Vec<String>,
}

impl EstimatorSpec {
    pub fn new<S: Into<String>>(
        method: Method,
        anchoring: Anchoring,
        adjustment_set: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let spec = Self {
            method,
            anchoring,
            adjustment_set: adjustment_set.into_iter().map(Into::into).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let empty = self.adjustment_set.is_empty();
        match (self.method, empty) {
            (Method::Unweighted, false) => Err(Error::Invalid("unweighted estimator takes no adjustment set".into())),
            (m, true) if m.is_weighted() => Err(Error::Invalid(format!("{m} requires a non-empty adjustment set"))),
            _ => Ok(()),
        }
    }

    /// Adjustment set rendered as `x1;x2`, or `none`.
    pub fn adjustment_label(&self) -> String {
        if self.adjustment_set.is_empty() {
            "none".into()
        } else {
            self.adjustment_set.join(";")
        }
    }

    pub fn parse_adjustment(label: &str) -> Vec<String> {
        let label = label.trim();
        if label.is_empty() || label == "none" {
            return Vec::new();
        }
        label
            .split([';', ',', '+'])
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.method, self.anchoring, self.adjustment_label())
    }
}

/// One treatment-effect estimate with its uncertainty and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub spec: EstimatorSpec,
    pub delta_hat: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub ess: f64,
    pub converged: bool,
    pub iteration: usize,
    pub seed: u64,
    pub link: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl EstimateRecord {
    pub const Z95: f64 = 1.96;

    /// Sets the standard error and the matching 95% interval.
    pub fn set_se(&mut self, se: Option<f64>) {
        self.se = se;
        match (self.delta_hat, se) {
            (Some(d), Some(s)) => {
                self.ci_low = Some(d - Self::Z95 * s);
                self.ci_high = Some(d + Self::Z95 * s);
            }
            _ => {
                self.ci_low = None;
                self.ci_high = None;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_col(values: &[f64]) -> CovariateSet {
        CovariateSet::from_columns(vec!["x1".into()], &[values.to_vec()]).unwrap()
    }

    fn trial(arms: Vec<Arm>, outcome: Vec<f64>) -> TrialIpd {
        let n = arms.len();
        TrialIpd {
            trial_id: "a".into(),
            ids: (0..n as u64).collect(),
            covariates: one_col(&vec![0.0; n]),
            arms,
            outcome,
        }
    }

    #[test]
    fn first_order_mean() {
        let m = covariate_moments(&one_col(&[1.0, 2.0, 3.0]), MomentOrder::First).unwrap();
        assert_eq!(m.means, vec![2.0]);
        assert!(m.variances.is_none());
        assert_eq!(m.order(), MomentOrder::First);
    }

    #[test]
    fn second_order_uses_sample_divisor() {
        let m = covariate_moments(&one_col(&[0.0, 0.0, 2.0, 2.0]), MomentOrder::Second).unwrap();
        assert_eq!(m.means, vec![1.0]);
        assert!((m.variances.unwrap()[0] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_column_has_zero_variance() {
        let m = covariate_moments(&one_col(&[5.0, 5.0]), MomentOrder::Second).unwrap();
        assert_eq!(m.means, vec![5.0]);
        assert_eq!(m.variances.unwrap(), vec![0.0]);
    }

    #[test]
    fn moment_errors() {
        assert!(matches!(
            covariate_moments(&one_col(&[]), MomentOrder::First),
            Err(Error::NoSubjects)
        ));
        assert!(matches!(
            covariate_moments(&one_col(&[1.0]), MomentOrder::Second),
            Err(Error::VarianceUndefined(1))
        ));
    }

    #[test]
    fn non_finite_covariate_names_row() {
        let err = CovariateSet::new(vec!["x1".into(), "x2".into()], vec![0.0, 1.0, f64::NAN, 2.0], 2).unwrap_err();
        match err {
            Error::Validation { row, field, .. } => {
                assert_eq!(row, 1);
                assert_eq!(field, "x1");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn validate_accepts_well_formed_trial() {
        let t = trial(vec![Arm::A, Arm::C, Arm::A, Arm::C], vec![1.0, 2.0, 3.0, 4.0]);
        let out = validate_trial(t.clone(), &[Arm::A, Arm::C]).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn validate_rejects_unknown_arm() {
        let t = trial(vec![Arm::A, Arm::B, Arm::C], vec![1.0, 2.0, 3.0]);
        let err = validate_trial(t, &[Arm::A, Arm::C]).unwrap_err();
        match err {
            Error::Validation { row, message, .. } => {
                assert_eq!(row, 1);
                assert!(message.contains("unknown arm"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn validate_rejects_non_finite_outcome() {
        let t = trial(vec![Arm::A, Arm::C, Arm::C], vec![1.0, f64::INFINITY, 3.0]);
        let err = validate_trial(t, &[Arm::A, Arm::C]).unwrap_err();
        assert!(matches!(err, Error::Validation { row: 1, ref field, .. } if field == "y"));
    }

    #[test]
    fn validate_rejects_empty_arm() {
        let t = trial(vec![Arm::A, Arm::A], vec![1.0, 2.0]);
        let err = validate_trial(t, &[Arm::A, Arm::C]).unwrap_err();
        assert!(err.to_string().contains("empty arm"));
    }

    #[test]
    fn spec_adjustment_rules() {
        assert!(EstimatorSpec::new(Method::Unweighted, Anchoring::Anchored, ["x1"]).is_err());
        assert!(EstimatorSpec::new::<String>(Method::Maic1, Anchoring::Anchored, []).is_err());
        let s = EstimatorSpec::new(Method::Psw, Anchoring::Unanchored, ["x1", "x2"]).unwrap();
        assert_eq!(s.adjustment_label(), "x1;x2");
        assert_eq!(EstimatorSpec::parse_adjustment("x1;x2"), s.adjustment_set);
        assert!(EstimatorSpec::parse_adjustment("none").is_empty());
    }

    #[test]
    fn ci_tracks_se() {
        let mut r = EstimateRecord {
            spec: EstimatorSpec::new::<String>(Method::Unweighted, Anchoring::Anchored, []).unwrap(),
            delta_hat: Some(1.0),
            se: None,
            ci_low: None,
            ci_high: None,
            ess: 1.0,
            converged: true,
            iteration: 0,
            seed: 0,
            link: "identity".into(),
            diagnostic: None,
        };
        r.set_se(Some(0.5));
        assert_eq!(r.ci_low, Some(1.0 - 0.98));
        assert_eq!(r.ci_high, Some(1.0 + 0.98));
        assert!(r.ci_low <= r.ci_high);
    }
}
