use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::centralized::LocalModel;
use crate::distributed::StateBelief;
use crate::phase::PhaseBelief;

use super::OracleError;

/// Which variable the expected log-likelihood is viewed as a function of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadTarget {
    /// The PMU's own phase error; the states are averaged out.
    Theta,
    /// The state of bus index `i ∈ M(j)`; the phase and the other states are averaged out.
    State(usize),
}

/// Quadratic `c + ηᵀx − ½xᵀΛx` fitted to a Monte-Carlo expected log-likelihood.
///
/// Layout of `coef`/`stderr`: for [`QuadTarget::Theta`] `[c, η, Λ]`, for
/// [`QuadTarget::State`] `[c, η₁, η₂, Λ₁₁, Λ₁₂, Λ₂₂]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFit {
    pub coef: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl QuadraticFit {
    pub fn info(&self) -> &[f64] {
        match self.coef.len() {
            3 => &self.coef[1..2],
            _ => &self.coef[1..3],
        }
    }

    pub fn precision_matrix(&self) -> Matrix2<f64> {
        let c = &self.coef;
        Matrix2::new(c[3], c[4], c[4], c[5])
    }
}

fn draw_state<R: Rng + ?Sized>(b: &StateBelief, rng: &mut R) -> Vector2<f64> {
    let l = b
        .p
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(Matrix2::zeros);
    let e = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
    b.mu + l * e
}

/// Monte-Carlo estimate of `E[ln p(z_j | θ_j, s_{M(j)})]` as a function of
/// the target, with every other variable drawn from its belief.
///
/// For each sample the log-likelihood is exactly quadratic in the target, so
/// a least-squares fit on a small grid recovers that sample's coefficients;
/// their sample mean and standard error are returned.
pub fn mc_loglik_quadratic<R: Rng + ?Sized>(
    local: &LocalModel,
    target: QuadTarget,
    beliefs: &[StateBelief],
    phase: &PhaseBelief,
    n_samples: usize,
    rng: &mut R,
) -> Result<QuadraticFit, OracleError> {
    if n_samples < 2 {
        return Err(OracleError::Samples(n_samples));
    }
    let pos = match target {
        QuadTarget::Theta => None,
        QuadTarget::State(i) => Some(local.position(i).ok_or(OracleError::NotInFragment(i))?),
    };
    // design matrix over grid offsets d from the expansion point x0
    let (offsets, x0): (Vec<Vec<f64>>, Vec<f64>) = match pos {
        None => (
            (-2..=2).map(|k| vec![0.02 * k as f64]).collect(),
            vec![phase.mean],
        ),
        Some(p) => {
            let mut g = Vec::new();
            for a in -1..=1 {
                for b in -1..=1 {
                    g.push(vec![0.05 * a as f64, 0.05 * b as f64]);
                }
            }
            let m = beliefs[local.cols[p]].mu;
            (g, vec![m[0], m[1]])
        }
    };
    let basis = |d: &[f64]| -> Vec<f64> {
        if d.len() == 1 {
            vec![1.0, d[0], -0.5 * d[0] * d[0]]
        } else {
            vec![1.0, d[0], d[1], -0.5 * d[0] * d[0], -d[0] * d[1], -0.5 * d[1] * d[1]]
        }
    };
    let rows: Vec<Vec<f64>> = offsets.iter().map(|d| basis(d)).collect();
    let x = DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c]);
    let pinv = (x.transpose() * &x)
        .try_inverse()
        .ok_or(OracleError::NotPositiveDefinite)?
        * x.transpose();

    let k = rows[0].len();
    let mut mean = vec![0.0; k];
    let mut m2 = vec![0.0; k];
    let var = local.sigma * local.sigma;
    let norm = -0.5 * local.rows() as f64 * (2.0 * std::f64::consts::PI * var).ln();
    let mut s = DVector::zeros(local.width());
    let mut y = DVector::zeros(offsets.len());
    // the likelihood is evaluated through residuals that are affine in the offset
    let mut base = DVector::zeros(local.rows());
    let mut slope = DMatrix::zeros(local.rows(), 2);
    for count in 1..=n_samples {
        for (q, &j) in local.cols.iter().enumerate() {
            if Some(q) != pos {
                let v = draw_state(&beliefs[j], rng);
                s[2 * q] = v[0];
                s[2 * q + 1] = v[1];
            }
        }
        let theta = match phase.distribution() {
            Some(d) if pos.is_some() => d.sample(rng),
            _ => phase.mean,
        };
        match pos {
            None => {
                // r(θ) = z − Hs − θ·Gs
                let gs = local.g() * &s;
                base.copy_from(&(local.z() - local.h() * &s - &gs * x0[0]));
                slope.column_mut(0).copy_from(&gs);
            }
            Some(p) => {
                s[2 * p] = x0[0];
                s[2 * p + 1] = x0[1];
                let a = local.h() + local.g() * theta;
                base.copy_from(&(local.z() - &a * &s));
                slope.copy_from(&a.columns(2 * p, 2));
            }
        }
        for (r, d) in offsets.iter().enumerate() {
            let mut sq = 0.0;
            for row in 0..base.len() {
                let mut e = base[row] - slope[(row, 0)] * d[0];
                if d.len() == 2 {
                    e -= slope[(row, 1)] * d[1];
                }
                sq += e * e;
            }
            y[r] = norm - sq / (2.0 * var);
        }
        let local_coef = &pinv * &y;
        // move the expansion point from x0 to the origin
        let coef: Vec<f64> = if pos.is_none() {
            let (c, e, l) = (local_coef[0], local_coef[1], local_coef[2]);
            let t = x0[0];
            vec![c - e * t - 0.5 * l * t * t, e + l * t, l]
        } else {
            let lam = Matrix2::new(local_coef[3], local_coef[4], local_coef[4], local_coef[5]);
            let e = Vector2::new(local_coef[1], local_coef[2]);
            let p0 = Vector2::new(x0[0], x0[1]);
            let eta = e + lam * p0;
            let c = local_coef[0] - e.dot(&p0) - 0.5 * p0.dot(&(lam * p0));
            vec![c, eta[0], eta[1], lam[(0, 0)], lam[(0, 1)], lam[(1, 1)]]
        };
        for (i, v) in coef.iter().enumerate() {
            let delta = v - mean[i];
            mean[i] += delta / count as f64;
            m2[i] += delta * (v - mean[i]);
        }
    }
    let n = n_samples as f64;
    let stderr = m2.iter().map(|m| (m / (n - 1.0) / n).sqrt()).collect();
    Ok(QuadraticFit { coef: mean, stderr })
}
