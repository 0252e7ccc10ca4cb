//! Method-of-moments weights by exponential tilting.
//!
//! With centred moment rows `r_i`, the weights are `w_i = exp(alpha . r_i)`
//! where `alpha` minimizes the convex objective `Q(alpha) = sum_i w_i`. At the
//! minimum the gradient `sum_i w_i r_i` vanishes, i.e. the weighted moments
//! equal the targets. Work is done on `log Q` with a max-shift so that large
//! `alpha` never overflows; gradient and Hessian are divided by `Q`, which
//! leaves the Newton direction unchanged.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{effective_sample_size, WeightFit};
use crate::error::{Error, Result};
use crate::model::{CovariateSet, Method, MomentOrder, MomentVector};

pub const UNATTAINABLE: &str = "moment target unattainable";
const ARMIJO: f64 = 1e-4;
/// Newton decrement below which the line search is skipped.
const FLAT_DECREMENT: f64 = 1e-12;
/// Pivot of the weighted covariance of the moment rows, relative to their
/// unweighted variances, below which the weights are treated as collapsed
/// onto a face of the convex hull.
const COLLAPSE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaicOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for MaicOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-8,
        }
    }
}

/// Centred moment rows: `x - mean` for each covariate and, at second
/// order, `x^2 - (variance + mean^2)`.
fn moment_rows(features: &CovariateSet, target: &MomentVector) -> (Vec<f64>, usize) {
    let p = features.ncols();
    let second = target.variances.as_ref();
    let k = if second.is_some() { 2 * p } else { p };
    let mut rows = Vec::with_capacity(features.nrows() * k);
    for i in 0..features.nrows() {
        let x = features.row(i);
        rows.extend((0..p).map(|j| x[j] - target.means[j]));
        if let Some(v) = second {
            rows.extend((0..p).map(|j| x[j] * x[j] - (v[j] + target.means[j] * target.means[j])));
        }
    }
    (rows, k)
}

struct Tilt {
    log_q: f64,
    shift: f64,
    scaled: Vec<f64>,
}

fn tilt(rows: &[f64], k: usize, alpha: &[f64]) -> Tilt {
    let scores: Vec<f64> = rows
        .chunks_exact(k)
        .map(|r| r.iter().zip(alpha).map(|(a, b)| a * b).sum())
        .collect();
    let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = scores.iter().map(|s| (s - shift).exp()).collect();
    let total: f64 = scaled.iter().sum();
    Tilt {
        log_q: shift + total.ln(),
        shift,
        scaled,
    }
}

/// Normalized gradient (weighted mean of the rows) and normalized Hessian
/// (weighted second moment of the rows).
fn derivatives(rows: &[f64], k: usize, t: &Tilt) -> (DVector<f64>, DMatrix<f64>) {
    let mut total = 0.0;
    let mut g = vec![0.0; k];
    let mut tri = vec![0.0; k * (k + 1) / 2];
    for (r, &w) in rows.chunks_exact(k).zip(&t.scaled) {
        if w == 0.0 {
            continue;
        }
        total += w;
        let mut idx = 0;
        for a in 0..k {
            let wa = w * r[a];
            g[a] += wa;
            for (h, rb) in tri[idx..=idx + a].iter_mut().zip(r) {
                *h += wa * rb;
            }
            idx += a + 1;
        }
    }
    let mut h = DMatrix::zeros(k, k);
    let mut idx = 0;
    for a in 0..k {
        for b in 0..=a {
            h[(a, b)] = tri[idx] / total;
            h[(b, a)] = tri[idx] / total;
            idx += 1;
        }
    }
    (DVector::from_vec(g) / total, h)
}

fn collapsed(h: &DMatrix<f64>, g: &DVector<f64>, scale: &DVector<f64>) -> bool {
    let mut cov = h - g * g.transpose();
    for a in 0..cov.nrows() {
        for b in 0..cov.ncols() {
            cov[(a, b)] /= (scale[a] * scale[b]).sqrt();
        }
    }
    match cov.cholesky() {
        None => true,
        Some(ch) => ch.l().diagonal().iter().any(|d| d.is_nan() || d * d < COLLAPSE),
    }
}

/// Finds `alpha` so that the `exp(alpha . r_i)`-weighted moments of
/// `features` equal `target` at the requested order.
///
/// Infeasible targets (outside the convex hull of the moment rows) make the
/// weights collapse onto a face of the hull; this is reported as
/// `converged = false` with the diagnostic [`UNATTAINABLE`].
pub fn maic_weights(
    features: &CovariateSet,
    target: &MomentVector,
    order: MomentOrder,
    opts: MaicOptions,
) -> Result<WeightFit> {
    maic_weights_from(features, target, order, opts, None)
}

/// [`maic_weights`] started from `start` instead of `alpha = 0`.
pub fn maic_weights_from(
    features: &CovariateSet,
    target: &MomentVector,
    order: MomentOrder,
    opts: MaicOptions,
    start: Option<&[f64]>,
) -> Result<WeightFit> {
    if features.nrows() < 2 {
        return Err(Error::Invalid("MAIC needs at least 2 subjects".into()));
    }
    let target = target.project(features.names(), order)?;
    let (rows, k) = moment_rows(features, &target);
    let zero = vec![0.0; k];
    let scale = {
        let (g, h) = derivatives(&rows, k, &tilt(&rows, k, &zero));
        (h - &g * g.transpose()).diagonal().map(|v| v.max(f64::MIN_POSITIVE))
    };
    let mut alpha = match start {
        Some(a) if a.len() == k && a.iter().all(|v| v.is_finite()) => a.to_vec(),
        _ => zero,
    };
    let mut t = tilt(&rows, k, &alpha);
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;

    loop {
        let (g, h) = derivatives(&rows, k, &t);
        if !g.iter().all(|v| v.is_finite()) || !t.log_q.is_finite() {
            diagnostic = Some(UNATTAINABLE.to_string());
            break;
        }
        if collapsed(&h, &g, &scale) {
            diagnostic = Some(UNATTAINABLE.to_string());
            break;
        }
        if g.amax() <= opts.grad_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            diagnostic = Some("maximum iterations reached".to_string());
            break;
        }
        let Some(ch) = h.clone().cholesky() else {
            diagnostic = Some(UNATTAINABLE.to_string());
            break;
        };
        let direction = -ch.solve(&g);
        let slope = g.dot(&direction);
        let mut step = 1.0;
        let mut accepted = None;
        if -slope < FLAT_DECREMENT {
            // log Q cannot resolve the decrease any more; the quadratic
            // model is exact to rounding, so take the Newton step.
            let candidate: Vec<f64> = alpha.iter().zip(direction.iter()).map(|(a, d)| a + d).collect();
            let next = tilt(&rows, k, &candidate);
            if next.log_q.is_finite() {
                accepted = Some((candidate, next));
            }
        }
        for _ in 0..60 {
            if accepted.is_some() {
                break;
            }
            let candidate: Vec<f64> = alpha.iter().zip(direction.iter()).map(|(a, d)| a + step * d).collect();
            let next = tilt(&rows, k, &candidate);
            if next.log_q.is_finite() && next.log_q <= t.log_q + ARMIJO * step * slope {
                accepted = Some((candidate, next));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((a, next)) => {
                alpha = a;
                t = next;
            }
            None => {
                diagnostic = Some(UNATTAINABLE.to_string());
                break;
            }
        }
    }

    // exp(alpha . r_i) when representable, otherwise the same weights up to
    // a common factor.
    let factor = t.shift.exp();
    let weights: Vec<f64> = if factor.is_finite() && factor > 0.0 {
        let w: Vec<f64> = t.scaled.iter().map(|s| s * factor).collect();
        if w.iter().all(|v| v.is_finite()) && w.iter().any(|&v| v > 0.0) {
            w
        } else {
            t.scaled.clone()
        }
    } else {
        t.scaled.clone()
    };
    let ess = effective_sample_size(&weights)?;
    let method = match order {
        MomentOrder::First => Method::Maic1,
        MomentOrder::Second => Method::Maic2,
    };
    Ok(WeightFit {
        weights,
        alpha: Some(alpha),
        propensity: None,
        coefficients: None,
        converged,
        ess,
        method,
        iterations,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::covariate_moments;

    fn column(x: &[f64]) -> CovariateSet {
        CovariateSet::from_columns(vec!["x".into()], &[x.to_vec()]).unwrap()
    }

    fn mean_target(m: f64) -> MomentVector {
        MomentVector {
            names: vec!["x".into()],
            means: vec![m],
            variances: None,
            n: 100,
        }
    }

    #[test]
    fn sample_mean_target_gives_zero_alpha() {
        let x = [0.3, 1.7, 2.2, -0.4, 0.9];
        let cov = column(&x);
        let target = covariate_moments(&cov, MomentOrder::First).unwrap();
        let fit = maic_weights(&cov, &target, MomentOrder::First, MaicOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.alpha.unwrap()[0].abs() < 1e-12);
        assert!(fit.weights.iter().all(|w| (w - 1.0).abs() < 1e-12));
        assert!((fit.ess - 5.0).abs() < 1e-9);
    }

    #[test]
    fn one_dimensional_root_matches_bisection() {
        let x = [0.0, 1.0, 2.0];
        let fit = maic_weights(
            &column(&x),
            &mean_target(1.5),
            MomentOrder::First,
            MaicOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        // Oracle: bisection on the estimating equation.
        let score = |a: f64| x.iter().map(|v| (a * (v - 1.5)).exp() * (v - 1.5)).sum::<f64>();
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let alpha = fit.alpha.as_ref().unwrap()[0];
        assert!((alpha - 0.5 * (lo + hi)).abs() < 1e-6);
        let wm: f64 = fit.weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() / fit.weights.iter().sum::<f64>();
        assert!((wm - 1.5).abs() < 1e-8);
    }

    #[test]
    fn target_outside_range_is_unattainable() {
        let fit = maic_weights(
            &column(&[0.0, 1.0, 2.0]),
            &mean_target(3.0),
            MomentOrder::First,
            MaicOptions::default(),
        )
        .unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.diagnostic.as_deref(), Some(UNATTAINABLE));
    }

    #[test]
    fn target_on_hull_boundary_is_unattainable() {
        let fit = maic_weights(
            &column(&[0.0, 1.0, 2.0]),
            &mean_target(2.0),
            MomentOrder::First,
            MaicOptions::default(),
        )
        .unwrap();
        assert!(!fit.converged);
    }

    #[test]
    fn second_order_matches_variance() {
        let x: Vec<f64> = (0..50).map(|i| f64::from(i) / 10.0).collect();
        let target = MomentVector {
            names: vec!["x".into()],
            means: vec![2.0],
            variances: Some(vec![1.0]),
            n: 100,
        };
        let fit = maic_weights(&column(&x), &target, MomentOrder::Second, MaicOptions::default()).unwrap();
        assert!(fit.converged, "{:?}", fit.diagnostic);
        let s: f64 = fit.weights.iter().sum();
        let m1: f64 = fit.weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() / s;
        let m2: f64 = fit.weights.iter().zip(&x).map(|(w, v)| w * v * v).sum::<f64>() / s;
        assert!((m1 - 2.0).abs() < 1e-6);
        assert!((m2 - 5.0).abs() < 1e-6 * 5.0);
    }

    #[test]
    fn second_order_requires_variances() {
        let err = maic_weights(
            &column(&[0.0, 1.0]),
            &mean_target(0.5),
            MomentOrder::Second,
            MaicOptions::default(),
        );
        assert!(err.is_err());
    }
}
