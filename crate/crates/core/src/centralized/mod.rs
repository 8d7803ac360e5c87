//! Whole-network estimators: WLS with fixed phase, centralized variational
//! inference, alternating minimization, and the evidence lower bound.

mod stacked;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2};
use thiserror::Error;

use crate::network::BusId;
use crate::phase::{PhaseBelief, PhaseError, PhasePrior};
use crate::scada::RectPrior;

pub use stacked::{LocalModel, StackedModel};

#[derive(Debug, Error, PartialEq)]
pub enum EstimateError {
    #[error("reading supplied for bus {0}, which has no PMU")]
    UnexpectedReading(BusId),
    #[error("no reading for PMU bus {0}")]
    MissingReading(BusId),
    #[error("reading at bus {bus} has {got} entries, expected {expected}")]
    ReadingLength {
        bus: BusId,
        expected: usize,
        got: usize,
    },
    #[error("noise level {sigma} at bus {bus} is not positive")]
    BadSigma { bus: BusId, sigma: f64 },
    #[error("{got} phase priors given for {expected} PMUs")]
    PhasePriorCount { expected: usize, got: usize },
    #[error("prior has dimension {got}, model expects {expected}")]
    PriorDimension { expected: usize, got: usize },
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error(transparent)]
    Phase(#[from] PhaseError),
}

/// Gaussian prior `N(ŝ, Γ)` with its precision and log-determinant.
#[derive(Debug, Clone)]
pub struct PriorPrecision {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub ln_det_cov: f64,
}

impl PriorPrecision {
    pub fn new(prior: &RectPrior) -> Result<Self, EstimateError> {
        let chol = Cholesky::new(prior.gamma.clone())
            .ok_or(EstimateError::NotPositiveDefinite("prior covariance"))?;
        let inv = chol.inverse();
        Ok(Self {
            mean: prior.s_hat.clone(),
            cov: prior.gamma.clone(),
            precision: (&inv + inv.transpose()) * 0.5,
            ln_det_cov: ln_det(&chol),
        })
    }

    /// The prior given by its precision matrix instead of its covariance.
    pub fn from_precision(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self, EstimateError> {
        let precision = (&precision + precision.transpose()) * 0.5;
        let chol = Cholesky::new(precision.clone())
            .ok_or(EstimateError::NotPositiveDefinite("prior precision"))?;
        let cov = chol.inverse();
        Ok(Self {
            mean,
            cov: (&cov + cov.transpose()) * 0.5,
            precision,
            ln_det_cov: -ln_det(&chol),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, model: &StackedModel) -> Result<(), EstimateError> {
        if self.dim() != model.state_dim() {
            return Err(EstimateError::PriorDimension {
                expected: model.state_dim(),
                got: self.dim(),
            });
        }
        Ok(())
    }
}

fn ln_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// A Gaussian over the full rectangular state.
#[derive(Debug, Clone)]
pub struct GaussianState {
    pub mu: DVector<f64>,
    pub p: DMatrix<f64>,
    pub ln_det_p: f64,
}

impl GaussianState {
    pub fn from_prior(prior: &PriorPrecision) -> Self {
        Self {
            mu: prior.mean.clone(),
            p: prior.cov.clone(),
            ln_det_p: prior.ln_det_cov,
        }
    }

    pub fn mean_block(&self, i: usize) -> [f64; 2] {
        [self.mu[2 * i], self.mu[2 * i + 1]]
    }

    pub fn cov_block(&self, j: usize, k: usize) -> Matrix2<f64> {
        self.p.fixed_view::<2, 2>(2 * j, 2 * k).into_owned()
    }
}

/// The centralized variational posterior `q(s) Π q(θ_i)`.
#[derive(Debug, Clone)]
pub struct CentralizedPosterior {
    pub state: GaussianState,
    /// One belief per PMU slot.
    pub phase: Vec<PhaseBelief>,
}

impl CentralizedPosterior {
    pub fn mu(&self) -> &DVector<f64> {
        &self.state.mu
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.state.p
    }

    /// Diagonal of Ω = E{Θ}, one entry per stacked row.
    pub fn omega(&self, model: &StackedModel) -> DVector<f64> {
        model.per_row(&self.phase.iter().map(|b| b.mean).collect::<Vec<_>>())
    }

    /// Diagonal of Λ = E{Θ²}, one entry per stacked row.
    pub fn lambda(&self, model: &StackedModel) -> DVector<f64> {
        model.per_row(&self.phase.iter().map(|b| b.second).collect::<Vec<_>>())
    }

    pub fn phase_means(&self) -> Vec<f64> {
        self.phase.iter().map(|b| b.mean).collect()
    }
}

/// The Gaussian q(s) for given phase moments, in information form:
/// `P⁻¹ = Γ⁻¹ + Gᵀ(Λ−Ω²)R⁻¹G + (H+ΩG)ᵀR⁻¹(H+ΩG)` and
/// `P⁻¹μ = Γ⁻¹ŝ + (H+ΩG)ᵀR⁻¹z`.
pub fn cvi_update_s(
    model: &StackedModel,
    prior: &PriorPrecision,
    phase: &[PhaseBelief],
) -> Result<GaussianState, EstimateError> {
    prior.check(model)?;
    if phase.len() != model.num_pmus() {
        return Err(EstimateError::PhasePriorCount {
            expected: model.num_pmus(),
            got: phase.len(),
        });
    }
    let means: Vec<f64> = phase.iter().map(|b| b.mean).collect();
    let vars: Vec<f64> = phase.iter().map(|b| b.variance()).collect();
    let a = model.effective_h(&means);
    let inv_r = model.r.map(|x| 1.0 / x);
    let var_rows = model.per_row(&vars).component_mul(&inv_r);

    let mut info = prior.precision.clone();
    let mut ra = a.clone();
    let mut dg = model.g.clone();
    for (r, (mut row_a, mut row_g)) in ra.row_iter_mut().zip(dg.row_iter_mut()).enumerate() {
        row_a *= inv_r[r];
        row_g *= var_rows[r];
    }
    info += a.transpose() * &ra;
    if vars.iter().any(|&v| v > 0.0) {
        info += model.g.transpose() * &dg;
    }
    let info = (&info + info.transpose()) * 0.5;
    let rhs = &prior.precision * &prior.mean + ra.transpose() * &model.z;

    let chol =
        Cholesky::new(info).ok_or(EstimateError::NotPositiveDefinite("posterior precision"))?;
    let mu = chol.solve(&rhs);
    let p = chol.inverse();
    Ok(GaussianState {
        mu,
        p: (&p + p.transpose()) * 0.5,
        ln_det_p: -ln_det(&chol),
    })
}

/// Gaussian posterior of s with the phase errors fixed at `theta` (zero when absent).
pub fn wls_estimate(
    model: &StackedModel,
    prior: &PriorPrecision,
    theta: Option<&[f64]>,
) -> Result<GaussianState, EstimateError> {
    let zeros = vec![0.0; model.num_pmus()];
    let theta = theta.unwrap_or(&zeros);
    let phase: Vec<PhaseBelief> = theta.iter().map(|&t| PhaseBelief::point(t)).collect();
    cvi_update_s(model, prior, &phase)
}

/// The q(θ_i) update for every PMU against the full covariance of q(s).
pub fn cvi_update_theta(
    model: &StackedModel,
    priors: &[PhasePrior],
    state: &GaussianState,
) -> Result<Vec<PhaseBelief>, EstimateError> {
    model.check_phase_priors(priors)?;
    model
        .locals()
        .iter()
        .zip(priors)
        .map(|(l, prior)| {
            let (mu, cov) = l.moments(|j| state.mean_block(j), |j, k| state.cov_block(j, k));
            Ok(l.phase_update(prior, &mu, &cov)?)
        })
        .collect()
}

/// Evidence lower bound of `q(s) Π q(θ_i)`; `cov(j, k)` are the blocks of the
/// covariance of q(s) that the likelihood sees, `trace_prec_cov` is
/// `tr(Γ⁻¹ Cov)` and `ln_det_cov` the log-determinant of that covariance.
pub(crate) fn elbo_parts(
    model: &StackedModel,
    prior: &PriorPrecision,
    priors: &[PhasePrior],
    mu: &DVector<f64>,
    cov: impl Fn(usize, usize) -> Matrix2<f64> + Copy,
    trace_prec_cov: f64,
    ln_det_cov: f64,
    phase: &[PhaseBelief],
) -> Result<f64, EstimateError> {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let n = mu.len() as f64;
    let mut total = 0.0;
    for ((l, prior_theta), belief) in model.locals().iter().zip(priors).zip(phase) {
        let (mu_l, cov_l) = l.moments(|j| [mu[2 * j], mu[2 * j + 1]], cov);
        total += l.expected_loglik(belief, &mu_l, &cov_l);
        total += prior_theta.expected_log_pdf(belief)?;
        total += belief.entropy()?;
    }
    let d = mu - &prior.mean;
    let quad = d.dot(&(&prior.precision * &d));
    total -= 0.5 * (n * ln_2pi + prior.ln_det_cov + trace_prec_cov + quad);
    total += 0.5 * (n * (1.0 + ln_2pi) + ln_det_cov);
    Ok(total)
}

pub fn elbo(
    model: &StackedModel,
    prior: &PriorPrecision,
    priors: &[PhasePrior],
    state: &GaussianState,
    phase: &[PhaseBelief],
) -> Result<f64, EstimateError> {
    model.check_phase_priors(priors)?;
    let trace = prior.precision.component_mul(&state.p).sum();
    elbo_parts(
        model,
        prior,
        priors,
        &state.mu,
        |j, k| state.cov_block(j, k),
        trace,
        state.ln_det_p,
        phase,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterOptions {
    pub max_iter: usize,
    /// Threshold on ‖Δμ‖∞ between iterations.
    pub tol: f64,
}

impl Default for IterOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CviIteration {
    pub mu: DVector<f64>,
    pub phase_mean: Vec<f64>,
    /// ELBO after the q(θ) half step (equal to `elbo` for the initial entry).
    pub elbo_after_theta: f64,
    pub elbo: f64,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct CviRun {
    pub posterior: CentralizedPosterior,
    /// Entry 0 is the prior; entry k follows iteration k.
    pub trace: Vec<CviIteration>,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternates the q(θ) and q(s) updates from `q(s) = p(s)` until μ settles.
pub fn cvi_run(
    model: &StackedModel,
    prior: &PriorPrecision,
    priors: &[PhasePrior],
    opts: IterOptions,
) -> Result<CviRun, EstimateError> {
    prior.check(model)?;
    model.check_phase_priors(priors)?;
    let mut state = GaussianState::from_prior(prior);
    let mut phase = priors
        .iter()
        .map(|p| p.belief())
        .collect::<Result<Vec<_>, _>>()?;
    let initial = elbo(model, prior, priors, &state, &phase)?;
    let mut trace = vec![CviIteration {
        mu: state.mu.clone(),
        phase_mean: phase.iter().map(|b| b.mean).collect(),
        elbo_after_theta: initial,
        elbo: initial,
        delta: f64::INFINITY,
    }];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        phase = cvi_update_theta(model, priors, &state)?;
        let half = elbo(model, prior, priors, &state, &phase)?;
        let next = cvi_update_s(model, prior, &phase)?;
        let delta = (&next.mu - &state.mu).amax();
        state = next;
        trace.push(CviIteration {
            mu: state.mu.clone(),
            phase_mean: phase.iter().map(|b| b.mean).collect(),
            elbo_after_theta: half,
            elbo: elbo(model, prior, priors, &state, &phase)?,
            delta,
        });
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(CviRun {
        posterior: CentralizedPosterior { state, phase },
        trace,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct AmIteration {
    pub mu: DVector<f64>,
    pub theta: Vec<f64>,
    /// Log joint density (up to a constant) after the θ half step.
    pub objective: f64,
    /// Log joint after the s half step, before θ moves.
    pub objective_after_s: f64,
}

#[derive(Debug, Clone)]
pub struct AmRun {
    pub state: GaussianState,
    pub theta: Vec<f64>,
    /// Entry 0 is the prior mean with the initial phase guess.
    pub trace: Vec<AmIteration>,
    pub iterations: usize,
    pub converged: bool,
}

impl AmRun {
    pub fn s_hat(&self) -> &DVector<f64> {
        &self.state.mu
    }
}

/// Mode of a phase prior, used to start the alternation.
fn prior_mode(prior: &PhasePrior) -> f64 {
    match *prior {
        PhasePrior::Point(x) => x,
        PhasePrior::Truncated(d) if d.is_uniform() => 0.5 * (d.lo() + d.hi()),
        PhasePrior::Truncated(d) => d.v().clamp(d.lo(), d.hi()),
    }
}

/// `ln p(θ)` up to its normalizer (zero for flat or point priors).
fn prior_quadratic(prior: &PhasePrior, theta: f64) -> f64 {
    match *prior {
        PhasePrior::Truncated(d) if !d.is_uniform() => -(theta - d.v()).powi(2) / (2.0 * d.c()),
        _ => 0.0,
    }
}

/// Log joint `ln p(z|θ,s) + ln p(s) + Σ ln p(θ_i)` without constants.
pub fn am_objective(
    model: &StackedModel,
    prior: &PriorPrecision,
    priors: &[PhasePrior],
    s: &DVector<f64>,
    theta: &[f64],
) -> f64 {
    let d = s - &prior.mean;
    let resid = &model.z - model.effective_h(theta) * s;
    let data: f64 = resid
        .iter()
        .zip(model.r.iter())
        .map(|(e, r)| e * e / r)
        .sum();
    let phase: f64 = priors
        .iter()
        .zip(theta)
        .map(|(p, &t)| prior_quadratic(p, t))
        .sum();
    -0.5 * d.dot(&(&prior.precision * &d)) - 0.5 * data + phase
}

/// Exact maximizer in θ of the log joint with s fixed, clipped to the prior support.
fn am_theta_step(l: &LocalModel, prior: &PhasePrior, s: &DVector<f64>) -> f64 {
    let mut local = DVector::zeros(l.width());
    for (k, &j) in l.cols.iter().enumerate() {
        local[2 * k] = s[2 * j];
        local[2 * k + 1] = s[2 * j + 1];
    }
    let a = l.h() * &local;
    let b = l.g() * &local;
    let inv = 1.0 / (l.sigma * l.sigma);
    let mut precision = b.dot(&b) * inv;
    let mut info = b.dot(&(l.z() - a)) * inv;
    let d = match *prior {
        PhasePrior::Point(x) => return x,
        PhasePrior::Truncated(d) => d,
    };
    if !d.is_uniform() {
        precision += 1.0 / d.c();
        info += d.v() / d.c();
    }
    if precision > 0.0 {
        (info / precision).clamp(d.lo(), d.hi())
    } else {
        prior_mode(prior)
    }
}

/// Alternating maximization of the log joint over s (WLS with fixed Θ) and θ.
pub fn am_estimate(
    model: &StackedModel,
    prior: &PriorPrecision,
    priors: &[PhasePrior],
    opts: IterOptions,
) -> Result<AmRun, EstimateError> {
    prior.check(model)?;
    model.check_phase_priors(priors)?;
    let mut theta: Vec<f64> = priors.iter().map(prior_mode).collect();
    let mut state = GaussianState::from_prior(prior);
    let start = am_objective(model, prior, priors, &state.mu, &theta);
    let mut trace = vec![AmIteration {
        mu: state.mu.clone(),
        theta: theta.clone(),
        objective: start,
        objective_after_s: start,
    }];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let next = wls_estimate(model, prior, Some(&theta))?;
        let delta = (&next.mu - &state.mu).amax();
        state = next;
        let after_s = am_objective(model, prior, priors, &state.mu, &theta);
        theta = model
            .locals()
            .iter()
            .zip(priors)
            .map(|(l, p)| am_theta_step(l, p, &state.mu))
            .collect();
        trace.push(AmIteration {
            mu: state.mu.clone(),
            theta: theta.clone(),
            objective: am_objective(model, prior, priors, &state.mu, &theta),
            objective_after_s: after_s,
        });
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(AmRun {
        state,
        theta,
        trace,
        iterations,
        converged,
    })
}
