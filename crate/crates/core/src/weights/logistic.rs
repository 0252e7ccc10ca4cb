use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CovariateSet;

/// Linear predictors beyond this magnitude give fitted probabilities within
/// about 1e-10 of 0 or 1.
const SEPARATION_PREDICTOR: f64 = 23.0;
const RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub max_iter: usize,
    pub score_tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            score_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept first, then one slope per feature column.
    pub coefficients: Vec<f64>,
    pub feature_names: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub max_abs_score: f64,
    pub diagnostic: Option<String>,
}

impl LogisticFit {
    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }

    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        self.coefficients[0] + self.coefficients[1..].iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
    }
}

struct State {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
    max_abs_lp: f64,
}

fn evaluate(features: &CovariateSet, labels: &[bool], beta: &DVector<f64>, with_derivatives: bool) -> State {
    let k = beta.len();
    let mut loglik = 0.0;
    let mut score = vec![0.0; k];
    // Lower triangle of the information matrix, row by row.
    let mut tri = vec![0.0; k * (k + 1) / 2];
    let mut max_abs_lp = 0.0f64;
    let mut log_block = 1.0f64;
    let mut x = vec![1.0; k];
    for (i, &y) in labels.iter().enumerate() {
        x[1..].copy_from_slice(features.row(i));
        let lp: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        max_abs_lp = max_abs_lp.max(lp.abs());
        // log P(y | x) = y * lp - log(1 + e^lp), with e = exp(-|lp|).
        let e = (-lp.abs()).exp();
        loglik += if y { lp } else { 0.0 } - lp.max(0.0);
        // Factors lie in (1, 2], so a block of 64 cannot overflow.
        log_block *= 1.0 + e;
        if i % 64 == 63 {
            loglik -= log_block.ln();
            log_block = 1.0;
        }
        if with_derivatives {
            let p = if lp >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            let resid = if y { 1.0 } else { 0.0 } - p;
            let w = p * (1.0 - p);
            let mut idx = 0;
            for a in 0..k {
                score[a] += x[a] * resid;
                let wa = w * x[a];
                for (t, xb) in tri[idx..=idx + a].iter_mut().zip(&x) {
                    *t += wa * xb;
                }
                idx += a + 1;
            }
        }
    }
    loglik -= log_block.ln();
    let mut info = DMatrix::zeros(k, k);
    let mut idx = 0;
    for a in 0..k {
        for b in 0..=a {
            info[(a, b)] = tri[idx];
            info[(b, a)] = tri[idx];
            idx += 1;
        }
    }
    State {
        loglik,
        score: DVector::from_vec(score),
        info,
        max_abs_lp,
    }
}

fn solve(info: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = info.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let jittered = info + DMatrix::identity(info.nrows(), info.ncols()) * RIDGE;
    jittered.cholesky().map(|ch| ch.solve(rhs))
}

/// Design columns that are (numerically) linear combinations of each other.
fn rank_deficient(info: &DMatrix<f64>) -> bool {
    let d = info.diagonal();
    if d.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return true;
    }
    let scaled = DMatrix::from_fn(info.nrows(), info.ncols(), |a, b| info[(a, b)] / (d[a] * d[b]).sqrt());
    match scaled.cholesky() {
        None => true,
        Some(ch) => ch.l().diagonal().iter().any(|p| p * p < 1e-12),
    }
}

/// Maximum-likelihood logistic regression with an intercept, fitted by
/// Newton-Raphson with step halving on the log-likelihood.
///
/// Non-convergence (including complete or quasi-complete separation) is
/// reported through `converged = false`; only an information matrix that is
/// singular at the starting point is an error.
pub fn fit_logistic(features: &CovariateSet, labels: &[bool], opts: LogisticOptions) -> Result<LogisticFit> {
    fit_logistic_from(features, labels, opts, None)
}

/// [`fit_logistic`] started from `start` (intercept first) instead of zero.
pub fn fit_logistic_from(
    features: &CovariateSet,
    labels: &[bool],
    opts: LogisticOptions,
    start: Option<&[f64]>,
) -> Result<LogisticFit> {
    let n = labels.len();
    if features.nrows() != n {
        return Err(Error::LengthMismatch(features.nrows(), n));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives < 2 || n - positives < 2 {
        return Err(Error::Invalid(
            "logistic regression needs at least 2 subjects per label".into(),
        ));
    }
    let k = features.ncols() + 1;
    let mut beta = match start {
        Some(b) if b.len() == k && b.iter().all(|v| v.is_finite()) => DVector::from_column_slice(b),
        _ => DVector::zeros(k),
    };
    let mut state = evaluate(features, labels, &beta, true);
    if rank_deficient(&state.info) {
        return Err(Error::SingularFit);
    }
    let mut iterations = 0;
    let mut diagnostic = None;
    let mut converged = false;

    loop {
        let max_abs_score = state.score.amax();
        if max_abs_score <= opts.score_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            diagnostic = Some("maximum iterations reached".to_string());
            break;
        }
        let Some(step) = solve(&state.info, &state.score) else {
            if iterations == 0 {
                return Err(Error::SingularFit);
            }
            diagnostic = Some("information matrix became singular".to_string());
            break;
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate = &beta + &step * t;
            let trial = evaluate(features, labels, &candidate, true);
            if trial.loglik.is_finite() && trial.loglik >= state.loglik - 1e-12 * state.loglik.abs() {
                accepted = Some((candidate, trial));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        let Some(next) = accepted else {
            diagnostic = Some("line search failed".to_string());
            break;
        };
        (beta, state) = next;
    }

    if state.max_abs_lp > SEPARATION_PREDICTOR {
        converged = false;
        diagnostic = Some("fitted probabilities numerically 0 or 1 (separation)".to_string());
    }

    Ok(LogisticFit {
        coefficients: beta.iter().copied().collect(),
        feature_names: features.names().to_vec(),
        converged,
        iterations,
        max_abs_score: state.score.amax(),
        diagnostic,
    })
}
