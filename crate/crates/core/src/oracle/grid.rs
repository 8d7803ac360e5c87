use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::centralized::StackedModel;
use crate::phase::PhasePrior;
use crate::scada::RectPrior;

use super::OracleError;

/// Exact posterior of s on a θ grid, marginalized by quadrature.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    /// Grid nodes per PMU slot.
    pub axes: Vec<Vec<f64>>,
    /// Grid points as θ per slot, in nesting order.
    pub points: Vec<Vec<f64>>,
    /// Normalized mixture weights, one per grid point.
    pub weights: Vec<f64>,
    pub cond_means: Vec<DVector<f64>>,
    pub cond_covs: Vec<DMatrix<f64>>,
    /// MMSE estimate `E[s | z]`.
    pub mean: DVector<f64>,
    /// `Cov[s | z]`.
    pub cov: DMatrix<f64>,
    /// `Σ w_k P_k`, the expected conditional covariance.
    pub within_cov: DMatrix<f64>,
}

/// Nodes and quadrature weights on `[lo, hi]`: Simpson for odd counts,
/// trapezoid otherwise. A point prior yields one node.
fn axis(prior: &PhasePrior, resolution: usize) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = prior.bounds();
    if lo == hi {
        return (vec![lo], vec![1.0]);
    }
    let n = resolution;
    let h = (hi - lo) / (n - 1) as f64;
    let nodes = (0..n).map(|k| lo + k as f64 * h).collect();
    let w = (0..n)
        .map(|k| {
            let end = k == 0 || k == n - 1;
            if n % 2 == 1 && n >= 3 {
                if end {
                    h / 3.0
                } else if k % 2 == 1 {
                    4.0 * h / 3.0
                } else {
                    2.0 * h / 3.0
                }
            } else if end {
                h / 2.0
            } else {
                h
            }
        })
        .collect();
    (nodes, w)
}

fn ln_prior(prior: &PhasePrior, t: f64) -> f64 {
    match prior {
        PhasePrior::Truncated(d) if !d.is_uniform() => -(t - d.v()).powi(2) / (2.0 * d.c()),
        _ => 0.0,
    }
}

/// `(ln N(z; Aŝ, R + AΓAᵀ), μ, P)` for the linear model with fixed phases,
/// in covariance (gain) form.
fn conditional(
    model: &StackedModel,
    prior: &RectPrior,
    theta: &[f64],
) -> Result<(f64, DVector<f64>, DMatrix<f64>), OracleError> {
    let a = model.effective_h(theta);
    let ag = &a * &prior.gamma;
    let mut s = &ag * a.transpose();
    for (k, r) in model.r.iter().enumerate() {
        s[(k, k)] += r;
    }
    let chol = Cholesky::new(s).ok_or(OracleError::NotPositiveDefinite)?;
    let d = &model.z - &a * &prior.s_hat;
    let sd = chol.solve(&d);
    let ln_det: f64 = chol.l().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
    let m = d.len() as f64;
    let ll = -0.5 * (m * (2.0 * std::f64::consts::PI).ln() + ln_det + d.dot(&sd));
    let mu = &prior.s_hat + ag.transpose() * sd;
    let p = &prior.gamma - ag.transpose() * chol.solve(&ag);
    Ok((ll, mu, (&p + p.transpose()) * 0.5))
}

/// Grid MMSE with the PMU slots nested in slot order.
pub fn grid_mmse(
    model: &StackedModel,
    prior: &RectPrior,
    priors: &[PhasePrior],
    resolution: usize,
) -> Result<GridPosterior, OracleError> {
    let order: Vec<usize> = (0..priors.len()).collect();
    grid_mmse_nested(model, prior, priors, resolution, &order)
}

/// Grid MMSE with the outermost loop over slot `order[0]`.
pub fn grid_mmse_nested(
    model: &StackedModel,
    prior: &RectPrior,
    priors: &[PhasePrior],
    resolution: usize,
    order: &[usize],
) -> Result<GridPosterior, OracleError> {
    let k = model.num_pmus();
    if k > 2 {
        return Err(OracleError::TooManyPhases(k));
    }
    if priors.len() != k {
        return Err(OracleError::PriorCount {
            expected: k,
            got: priors.len(),
        });
    }
    if resolution < 2 {
        return Err(OracleError::Resolution(resolution));
    }
    let axes: Vec<(Vec<f64>, Vec<f64>)> = priors.iter().map(|p| axis(p, resolution)).collect();

    // enumerate grid points with the first slot of `order` outermost
    let mut points: Vec<(Vec<f64>, f64)> = vec![(vec![0.0; k], 0.0)];
    for &slot in order {
        let (nodes, w) = &axes[slot];
        let mut next = Vec::with_capacity(points.len() * nodes.len());
        for (theta, lw) in &points {
            for (t, q) in nodes.iter().zip(w) {
                let mut th = theta.clone();
                th[slot] = *t;
                next.push((th, lw + q.ln() + ln_prior(&priors[slot], *t)));
            }
        }
        points = next;
    }

    let evals: Vec<Result<(f64, DVector<f64>, DMatrix<f64>), OracleError>> = points
        .par_iter()
        .map(|(theta, lw)| conditional(model, prior, theta).map(|(ll, mu, p)| (ll + lw, mu, p)))
        .collect();
    let mut logw = Vec::with_capacity(evals.len());
    let mut cond_means = Vec::with_capacity(evals.len());
    let mut cond_covs = Vec::with_capacity(evals.len());
    for e in evals {
        let (l, mu, p) = e?;
        logw.push(l);
        cond_means.push(mu);
        cond_covs.push(p);
    }
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

    let n = prior.s_hat.len();
    let mut mean = DVector::zeros(n);
    let mut within = DMatrix::zeros(n, n);
    let mut second = DMatrix::zeros(n, n);
    for ((w, mu), p) in weights.iter().zip(&cond_means).zip(&cond_covs) {
        mean += mu * *w;
        within += p * *w;
        second += (mu * mu.transpose()) * *w;
    }
    let cov = &within + second - &mean * mean.transpose();
    Ok(GridPosterior {
        axes: axes.into_iter().map(|(n, _)| n).collect(),
        points: points.into_iter().map(|(t, _)| t).collect(),
        weights,
        cond_means,
        cond_covs,
        mean,
        cov: (&cov + cov.transpose()) * 0.5,
        within_cov: within,
    })
}
