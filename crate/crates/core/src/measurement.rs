//! Ground-truth states and synthetic PMU/SCADA observations.

use std::collections::BTreeMap;

use nalgebra::{Complex, DVector, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{kappa_between, BusId, NetworkCase};
use crate::scada::{MeasurementFunction, ScadaModel};

#[derive(Debug, Error, PartialEq)]
pub enum MeasurementError {
    #[error("no phase error given for PMU bus {0}")]
    MissingTheta(BusId),
    #[error("no noise level given for PMU bus {0}")]
    MissingSigma(BusId),
    #[error("noise level {0} is not usable (must be finite and non-negative)")]
    BadNoise(f64),
    #[error("state covers {got} buses, case has {expected}")]
    StateSize { expected: usize, got: usize },
}

/// Polar voltage per bus, in case bus order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueState {
    pub magnitude: Vec<f64>,
    pub angle: Vec<f64>,
}

impl TrueState {
    pub fn from_case(case: &NetworkCase) -> Self {
        Self {
            magnitude: case.buses().iter().map(|b| b.vm).collect(),
            angle: case.buses().iter().map(|b| b.va).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.magnitude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitude.is_empty()
    }

    pub fn rect(&self, i: usize) -> Vector2<f64> {
        let (s, c) = self.angle[i].sin_cos();
        Vector2::new(self.magnitude[i] * c, self.magnitude[i] * s)
    }

    /// Stacked rectangular state `s`.
    pub fn rect_vector(&self) -> DVector<f64> {
        DVector::from_fn(2 * self.len(), |k, _| self.rect(k / 2)[k % 2])
    }

    /// Stacked polar state `ξ = [A_1, φ_1, …]`.
    pub fn polar_vector(&self) -> DVector<f64> {
        DVector::from_fn(2 * self.len(), |k, _| {
            if k % 2 == 0 {
                self.magnitude[k / 2]
            } else {
                self.angle[k / 2]
            }
        })
    }

    fn phasor(&self, i: usize) -> Complex<f64> {
        Complex::from_polar(self.magnitude[i], self.angle[i])
    }
}

/// Variance of the reference-angle pseudo-measurement: small enough to pin
/// the rotation, large enough to keep the prior covariance well conditioned.
pub const REFERENCE_VARIANCE: f64 = 1e-12;

fn symmetric_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    2.0 * rng.random::<f64>() - 1.0
}

/// Scales every magnitude by `1+u` and shifts every angle by `u·max(|φ|, 0.1)`,
/// with independent `u ~ U(−fraction, fraction)`. The first bus is the angle
/// reference: its draw is consumed but its angle is kept.
pub fn perturb_state<R: Rng + ?Sized>(case: &NetworkCase, fraction: f64, rng: &mut R) -> TrueState {
    let mut state = TrueState::from_case(case);
    for i in 0..state.len() {
        let u = fraction * symmetric_unit(rng);
        state.magnitude[i] *= 1.0 + u;
        let u = fraction * symmetric_unit(rng);
        if i > 0 {
            state.angle[i] += u * state.angle[i].abs().max(0.1);
        }
    }
    state
}

/// Independent uniform phase errors on `[−bound, bound]` for every PMU bus.
pub fn draw_phase_errors<R: Rng + ?Sized>(
    case: &NetworkCase,
    bound: f64,
    rng: &mut R,
) -> BTreeMap<BusId, f64> {
    case.pmu_buses()
        .iter()
        .map(|&id| {
            let u = symmetric_unit(rng);
            (id, if bound == 0.0 { 0.0 } else { bound * u })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmuReading {
    /// Voltage pair, then one current pair per adjacent bus in ascending order.
    pub z: DVector<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScadaReading {
    pub zeta: DVector<f64>,
    /// Diagonal of W.
    pub variances: DVector<f64>,
}

/// Everything an estimator sees, plus the true phase errors for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub pmu: BTreeMap<BusId, PmuReading>,
    pub scada: ScadaReading,
    pub theta_true: BTreeMap<BusId, f64>,
}

impl MeasurementSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("measurement set serializes")
    }

    pub fn from_json(source: &str) -> serde_json::Result<Self> {
        serde_json::from_str(source)
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    std * rng.sample::<f64, _>(StandardNormal)
}

/// Noise-free readings of the exact (nonlinear in θ) PMU model at bus index `i`.
pub fn exact_pmu_at(case: &NetworkCase, state: &TrueState, i: usize, theta: f64) -> DVector<f64> {
    let rot = Complex::from_polar(1.0, theta);
    let adjacent = case.adjacent(i);
    let mut z = DVector::zeros(2 + 2 * adjacent.len());
    let e_i = state.phasor(i);
    let x = rot * e_i;
    z[0] = x.re;
    z[1] = x.im;
    for (k, &j) in adjacent.iter().enumerate() {
        let kap = kappa_between(case, i, j);
        let y = rot
            * (Complex::new(kap.k1, kap.k2) * e_i - Complex::new(kap.k3, kap.k4) * state.phasor(j));
        z[2 + 2 * k] = y.re;
        z[3 + 2 * k] = y.im;
    }
    z
}

/// PMU readings with phase error and additive Gaussian noise for every PMU bus.
pub fn exact_pmu<R: Rng + ?Sized>(
    case: &NetworkCase,
    state: &TrueState,
    theta: &BTreeMap<BusId, f64>,
    sigma: &BTreeMap<BusId, f64>,
    rng: &mut R,
) -> Result<BTreeMap<BusId, PmuReading>, MeasurementError> {
    if state.len() != case.num_buses() {
        return Err(MeasurementError::StateSize {
            expected: case.num_buses(),
            got: state.len(),
        });
    }
    let mut out = BTreeMap::new();
    for &id in case.pmu_buses() {
        let th = *theta.get(&id).ok_or(MeasurementError::MissingTheta(id))?;
        let sd = *sigma.get(&id).ok_or(MeasurementError::MissingSigma(id))?;
        if !(sd >= 0.0) || !sd.is_finite() {
            return Err(MeasurementError::BadNoise(sd));
        }
        let i = case.index_of(id).expect("pmu bus in case");
        let mut z = exact_pmu_at(case, state, i, th);
        z.iter_mut().for_each(|v| *v += gaussian(rng, sd));
        out.insert(id, PmuReading { z, sigma: sd });
    }
    Ok(out)
}

/// The RTU measurement suite of [`ScadaModel`] at the true state, with i.i.d.
/// `N(0, noise_std²)` noise. The reference angle row is exact and carries
/// [`REFERENCE_VARIANCE`].
pub fn scada_measure<R: Rng + ?Sized>(
    case: &NetworkCase,
    state: &TrueState,
    noise_std: f64,
    rng: &mut R,
) -> Result<ScadaReading, MeasurementError> {
    if !(noise_std > 0.0) || !noise_std.is_finite() {
        return Err(MeasurementError::BadNoise(noise_std));
    }
    if state.len() != case.num_buses() {
        return Err(MeasurementError::StateSize {
            expected: case.num_buses(),
            got: state.len(),
        });
    }
    let model = ScadaModel::new(case);
    let mut zeta = model.eval(&state.polar_vector());
    let reference = model.reference_row();
    for (k, v) in zeta.iter_mut().enumerate() {
        let e = gaussian(rng, noise_std);
        if k != reference {
            *v += e;
        }
    }
    let mut variances = DVector::from_element(zeta.len(), noise_std * noise_std);
    variances[reference] = REFERENCE_VARIANCE;
    Ok(ScadaReading { zeta, variances })
}

/// Simulates a full measurement set with the same PMU noise level everywhere.
pub fn simulate<R: Rng + ?Sized>(
    case: &NetworkCase,
    state: &TrueState,
    theta_bound: f64,
    sigma_pmu: f64,
    sigma_scada: f64,
    rng: &mut R,
) -> Result<MeasurementSet, MeasurementError> {
    let theta_true = draw_phase_errors(case, theta_bound, rng);
    let sigma = case.pmu_buses().iter().map(|&id| (id, sigma_pmu)).collect();
    let scada = scada_measure(case, state, sigma_scada, rng)?;
    let pmu = exact_pmu(case, state, &theta_true, &sigma, rng)?;
    Ok(MeasurementSet {
        pmu,
        scada,
        theta_true,
    })
}
