//! Priors and variational beliefs over per-PMU sampling phase errors.

use thiserror::Error;

use crate::truncnorm::{TruncNormError, TruncatedGaussian};

#[derive(Debug, Error, PartialEq)]
pub enum PhaseError {
    #[error(transparent)]
    TruncNorm(#[from] TruncNormError),
    #[error("phase data precision {0} is negative")]
    NegativePrecision(f64),
    #[error("phase posterior variance {0} is not positive")]
    NonPositiveVariance(f64),
}

/// Prior on one PMU's phase error: a truncated Gaussian, or a point mass
/// (the collapsed prior used when the phase error is known exactly).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhasePrior {
    Truncated(TruncatedGaussian),
    Point(f64),
}

impl PhasePrior {
    /// Uniform on `[-bound, bound]`; a point mass at zero when `bound == 0`.
    pub fn uniform(bound: f64) -> Result<Self, PhaseError> {
        if bound == 0.0 {
            Ok(Self::Point(0.0))
        } else {
            Ok(Self::Truncated(TruncatedGaussian::uniform(-bound, bound)?))
        }
    }

    pub fn truncated(lo: f64, hi: f64, v: f64, c: f64) -> Result<Self, PhaseError> {
        Ok(Self::Truncated(TruncatedGaussian::new(lo, hi, v, c)?))
    }

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Self::Truncated(d) => (d.lo(), d.hi()),
            Self::Point(x) => (*x, *x),
        }
    }

    /// The prior itself as a belief.
    pub fn belief(&self) -> Result<PhaseBelief, PhaseError> {
        match *self {
            Self::Truncated(d) => PhaseBelief::from_distribution(d),
            Self::Point(x) => Ok(PhaseBelief::point(x)),
        }
    }

    /// Combines the prior with a Gaussian likelihood in θ of precision
    /// `data_precision` and information `data_info` (i.e. `exp(info θ − prec θ²/2)`).
    pub fn posterior(&self, data_precision: f64, data_info: f64) -> Result<PhaseBelief, PhaseError> {
        if data_precision < 0.0 {
            return Err(PhaseError::NegativePrecision(data_precision));
        }
        let d = match *self {
            Self::Point(x) => return Ok(PhaseBelief::point(x)),
            Self::Truncated(d) => d,
        };
        let prior_precision = if d.is_uniform() { 0.0 } else { 1.0 / d.c() };
        let prior_info = if d.is_uniform() { 0.0 } else { d.v() / d.c() };
        let precision = prior_precision + data_precision;
        if precision == 0.0 {
            return PhaseBelief::from_distribution(d);
        }
        let c = 1.0 / precision;
        if !(c > 0.0) || !c.is_finite() {
            return Err(PhaseError::NonPositiveVariance(c));
        }
        let v = c * (prior_info + data_info);
        PhaseBelief::from_distribution(TruncatedGaussian::new(d.lo(), d.hi(), v, c)?)
    }

    /// `E_q[ln p(θ)]`; zero for a point prior, whose belief is the same point.
    pub fn expected_log_pdf(&self, q: &PhaseBelief) -> Result<f64, PhaseError> {
        match self {
            Self::Point(_) => Ok(0.0),
            Self::Truncated(d) => Ok(d.expected_log_pdf(q.mean, q.second)?),
        }
    }
}

/// `b(θ_i)`: a truncated Gaussian with cached moments ϖ (`mean`) and τ (`second`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseBelief {
    dist: Option<TruncatedGaussian>,
    pub mean: f64,
    pub second: f64,
}

impl PhaseBelief {
    pub fn from_distribution(d: TruncatedGaussian) -> Result<Self, PhaseError> {
        let m = d.moments()?;
        Ok(Self {
            dist: Some(d),
            mean: m.mean,
            second: m.second,
        })
    }

    pub fn point(x: f64) -> Self {
        Self {
            dist: None,
            mean: x,
            second: x * x,
        }
    }

    pub fn distribution(&self) -> Option<&TruncatedGaussian> {
        self.dist.as_ref()
    }

    pub fn is_point(&self) -> bool {
        self.dist.is_none()
    }

    /// τ − ϖ², floored at zero.
    pub fn variance(&self) -> f64 {
        (self.second - self.mean * self.mean).max(0.0)
    }

    /// Entropy in nats; zero for a point mass (it cancels against the point prior).
    pub fn entropy(&self) -> Result<f64, PhaseError> {
        match &self.dist {
            Some(d) => Ok(d.entropy()?),
            None => Ok(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bound_collapses_to_point() {
        let p = PhasePrior::uniform(0.0).unwrap();
        assert_eq!(p, PhasePrior::Point(0.0));
        let b = p.posterior(5.0, 1.0).unwrap();
        assert!(b.is_point());
        assert_eq!((b.mean, b.second), (0.0, 0.0));
    }

    #[test]
    fn no_data_returns_prior() {
        let p = PhasePrior::truncated(-0.1, 0.1, 0.02, 0.003).unwrap();
        assert_eq!(p.posterior(0.0, 0.0).unwrap(), p.belief().unwrap());
        let u = PhasePrior::uniform(0.1).unwrap();
        assert_eq!(u.posterior(0.0, 0.0).unwrap(), u.belief().unwrap());
    }

    #[test]
    fn precision_combines() {
        let p = PhasePrior::truncated(-1.0, 1.0, 0.1, 0.5).unwrap();
        let b = p.posterior(2.0, 0.6).unwrap();
        let d = b.distribution().unwrap();
        assert!((d.c() - 1.0 / 4.0).abs() < 1e-15);
        assert!((d.v() - 0.25 * (0.2 + 0.6)).abs() < 1e-15);
        assert!(p.posterior(-1.0, 0.0).is_err());
    }
}
