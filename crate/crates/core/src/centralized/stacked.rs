use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::measurement::PmuReading;
use crate::network::{all_measurement_models, BusId, BusMeasurementModel, NetworkCase};
use crate::phase::{PhaseBelief, PhaseError, PhasePrior};

use super::EstimateError;

/// The model of one PMU bus restricted to the state columns it touches.
#[derive(Debug, Clone)]
pub struct LocalModel {
    /// Bus index of the PMU.
    pub bus: usize,
    /// Bus indices of M(i), ascending; local column `2k..2k+2` is bus `cols[k]`.
    pub cols: Vec<usize>,
    pub sigma: f64,
    /// First row in the stacked observation vector.
    pub row: usize,
    h: DMatrix<f64>,
    g: DMatrix<f64>,
    z: DVector<f64>,
    // Gram matrices and projections used by every update
    hth: DMatrix<f64>,
    cross: DMatrix<f64>,
    gtg: DMatrix<f64>,
    htz: DVector<f64>,
    gtz: DVector<f64>,
}

impl LocalModel {
    fn new(m: &BusMeasurementModel, reading: &PmuReading, row: usize) -> Self {
        let rows = m.rows();
        let width = 2 * m.neighbors.len();
        let mut h = DMatrix::zeros(rows, width);
        let mut g = DMatrix::zeros(rows, width);
        for k in 0..m.neighbors.len() {
            h.view_mut((0, 2 * k), (rows, 2)).copy_from(&m.h[k]);
            g.view_mut((0, 2 * k), (rows, 2)).copy_from(&m.g[k]);
        }
        Self::from_parts(m.index, m.neighbors.clone(), h, g, reading.z.clone(), reading.sigma, row)
    }

    /// Builds a local model from its matrices; `h` and `g` have two columns per entry of `cols`.
    pub fn from_parts(
        bus: usize,
        cols: Vec<usize>,
        h: DMatrix<f64>,
        g: DMatrix<f64>,
        z: DVector<f64>,
        sigma: f64,
        row: usize,
    ) -> Self {
        let hg = h.transpose() * &g;
        Self {
            bus,
            cols,
            sigma,
            row,
            hth: h.transpose() * &h,
            cross: &hg + hg.transpose(),
            gtg: g.transpose() * &g,
            htz: h.transpose() * &z,
            gtz: g.transpose() * &z,
            h,
            g,
            z,
        }
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    /// The 2×2 block of `E[(H+θG)ᵀ(H+θG)]` pairing local positions `a` and `b`,
    /// for phase moments `w = E[θ]` and `t = E[θ²]`.
    pub fn gram_block(&self, a: usize, b: usize, w: f64, t: f64) -> Matrix2<f64> {
        let (r, c) = (2 * a, 2 * b);
        self.hth.fixed_view::<2, 2>(r, c) + self.cross.fixed_view::<2, 2>(r, c) * w + self.gtg.fixed_view::<2, 2>(r, c) * t
    }

    /// Rows `2a..2a+2` of `(H + wG)ᵀz`.
    pub fn projection(&self, a: usize, w: f64) -> Vector2<f64> {
        self.htz.fixed_rows::<2>(2 * a) + self.gtz.fixed_rows::<2>(2 * a) * w
    }

    pub fn rows(&self) -> usize {
        self.z.len()
    }

    pub fn width(&self) -> usize {
        2 * self.cols.len()
    }

    /// Position of bus index `j` among the columns.
    pub fn position(&self, j: usize) -> Option<usize> {
        self.cols.binary_search(&j).ok()
    }

    /// Local mean and covariance, with `cov(j, k)` giving the 2×2 covariance
    /// block between bus indices `j` and `k`.
    pub fn moments(
        &self,
        mean: impl Fn(usize) -> [f64; 2],
        cov: impl Fn(usize, usize) -> Matrix2<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let w = self.width();
        let mut mu = DVector::zeros(w);
        for (k, &j) in self.cols.iter().enumerate() {
            let m = mean(j);
            mu[2 * k] = m[0];
            mu[2 * k + 1] = m[1];
        }
        let mut c = DMatrix::zeros(w, w);
        for (a, &j) in self.cols.iter().enumerate() {
            for (b, &k) in self.cols.iter().enumerate() {
                c.fixed_view_mut::<2, 2>(2 * a, 2 * b).copy_from(&cov(j, k));
            }
        }
        (mu, c)
    }

    /// Coefficients of θ in `E_q(s)[ln p(z|θ, s)]`: the precision
    /// `(‖Gμ‖² + tr(GᵀGΣ))/σ²` and the information `((z − Hμ)ᵀGμ − tr(GᵀHΣ))/σ²`.
    pub fn phase_statistics(&self, mu: &DVector<f64>, cov: &DMatrix<f64>) -> (f64, f64) {
        let inv = 1.0 / (self.sigma * self.sigma);
        let gm = &self.g * mu;
        let resid = &self.z - &self.h * mu;
        let a2 = gm.norm_squared() + self.gtg.component_mul(cov).sum();
        let a1 = resid.dot(&gm) - 0.5 * self.cross.component_mul(cov).sum();
        (a2 * inv, a1 * inv)
    }

    /// The q(θ) coordinate update.
    pub fn phase_update(
        &self,
        prior: &PhasePrior,
        mu: &DVector<f64>,
        cov: &DMatrix<f64>,
    ) -> Result<PhaseBelief, PhaseError> {
        let (precision, info) = self.phase_statistics(mu, cov);
        prior.posterior(precision, info)
    }

    /// `E_q[ln p(z|θ, s)]` under a phase belief and local state moments.
    ///
    /// Evaluated around the mean residual `z − (H + E[θ]G)μ`, which is of the
    /// order of the noise; expanding `‖z‖²` instead loses the result to cancellation.
    pub fn expected_loglik(&self, phase: &PhaseBelief, mu: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let var = self.sigma * self.sigma;
        let m = self.rows() as f64;
        let (w, t) = (phase.mean, phase.second);
        let gm = &self.g * mu;
        let resid = &self.z - &self.h * mu - &gm * w;
        let quad = resid.norm_squared()
            + phase.variance() * gm.norm_squared()
            + self.hth.component_mul(cov).sum()
            + w * self.cross.component_mul(cov).sum()
            + t * self.gtg.component_mul(cov).sum();
        -0.5 * m * (2.0 * std::f64::consts::PI * var).ln() - quad / (2.0 * var)
    }
}

/// The whole-network PMU model `z = (H + ΘG)s + w`, `w ~ N(0, R)`.
///
/// PMU buses are stacked in ascending bus order; the "slot" of a PMU is its
/// position in that order.
#[derive(Debug, Clone)]
pub struct StackedModel {
    num_buses: usize,
    models: Vec<BusMeasurementModel>,
    locals: Vec<LocalModel>,
    slot_of_bus: Vec<Option<usize>>,
    pub z: DVector<f64>,
    pub h: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// Diagonal of R.
    pub r: DVector<f64>,
}

impl StackedModel {
    pub fn new(
        case: &NetworkCase,
        readings: &BTreeMap<BusId, PmuReading>,
    ) -> Result<Self, EstimateError> {
        for id in readings.keys() {
            if !case.pmu_buses().contains(id) {
                return Err(EstimateError::UnexpectedReading(*id));
            }
        }
        let models = all_measurement_models(case);
        let n = case.num_buses();
        let mut locals = Vec::new();
        let mut slot_of_bus = vec![None; n];
        let mut row = 0;
        for m in models.iter().filter(|m| !m.is_stub()) {
            let reading = readings
                .get(&m.bus)
                .ok_or(EstimateError::MissingReading(m.bus))?;
            if reading.z.len() != m.rows() {
                return Err(EstimateError::ReadingLength {
                    bus: m.bus,
                    expected: m.rows(),
                    got: reading.z.len(),
                });
            }
            if !(reading.sigma > 0.0) || !reading.sigma.is_finite() {
                return Err(EstimateError::BadSigma {
                    bus: m.bus,
                    sigma: reading.sigma,
                });
            }
            slot_of_bus[m.index] = Some(locals.len());
            locals.push(LocalModel::new(m, reading, row));
            row += m.rows();
        }

        let mut z = DVector::zeros(row);
        let mut h = DMatrix::zeros(row, 2 * n);
        let mut g = DMatrix::zeros(row, 2 * n);
        let mut r = DVector::zeros(row);
        for l in &locals {
            let rows = l.rows();
            z.rows_mut(l.row, rows).copy_from(l.z());
            r.rows_mut(l.row, rows).fill(l.sigma * l.sigma);
            for (k, &j) in l.cols.iter().enumerate() {
                h.view_mut((l.row, 2 * j), (rows, 2))
                    .copy_from(&l.h().columns(2 * k, 2));
                g.view_mut((l.row, 2 * j), (rows, 2))
                    .copy_from(&l.g().columns(2 * k, 2));
            }
        }
        Ok(Self {
            num_buses: n,
            models,
            locals,
            slot_of_bus,
            z,
            h,
            g,
            r,
        })
    }

    pub fn num_buses(&self) -> usize {
        self.num_buses
    }

    pub fn state_dim(&self) -> usize {
        2 * self.num_buses
    }

    pub fn num_pmus(&self) -> usize {
        self.locals.len()
    }

    pub fn locals(&self) -> &[LocalModel] {
        &self.locals
    }

    pub fn local(&self, slot: usize) -> &LocalModel {
        &self.locals[slot]
    }

    /// Per-bus models in bus order, stubs for buses without a PMU.
    pub fn bus_models(&self) -> &[BusMeasurementModel] {
        &self.models
    }

    pub fn slot_of(&self, bus: usize) -> Option<usize> {
        self.slot_of_bus[bus]
    }

    /// Expands one value per PMU slot to one value per stacked row.
    pub fn per_row(&self, per_slot: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.z.len());
        for (l, &v) in self.locals.iter().zip(per_slot) {
            out.rows_mut(l.row, l.rows()).fill(v);
        }
        out
    }

    /// `H + ΘG` for phase values given per slot.
    pub fn effective_h(&self, theta: &[f64]) -> DMatrix<f64> {
        let rows = self.per_row(theta);
        let mut scaled = self.g.clone();
        for (r, mut row) in scaled.row_iter_mut().enumerate() {
            row *= rows[r];
        }
        &self.h + scaled
    }

    /// Checks that a prior list has one entry per PMU.
    pub fn check_phase_priors(&self, priors: &[PhasePrior]) -> Result<(), EstimateError> {
        if priors.len() != self.num_pmus() {
            return Err(EstimateError::PhasePriorCount {
                expected: self.num_pmus(),
                got: priors.len(),
            });
        }
        Ok(())
    }
}
