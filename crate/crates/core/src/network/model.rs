use nalgebra::{DVector, Dyn, Matrix2, OMatrix, Vector2, U2};
use thiserror::Error;

use super::case::{Branch, Bus, BusId, NetworkCase};

/// A `2|M(i)| x 2` coefficient block mapping one bus state onto a PMU's readings.
pub type Block = OMatrix<f64, Dyn, U2>;

/// Multiplication by the imaginary unit on a rectangular pair: `j(a + jb) = -b + ja`.
pub const ROTATE: Matrix2<f64> = Matrix2::new(0.0, -1.0, 1.0, 0.0);

/// Per-side branch coefficients folding admittance, shunt and transformer ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Kappa {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
}

impl Kappa {
    /// Coefficients for side `i` of a branch given the ratio magnitudes
    /// |ρ_ij|, |ρ_ji|, the phase shift seen from side `i`, the series admittance
    /// `g + jb` and the shunt susceptance of bus `i`.
    pub fn from_parts(rho_ij: f64, rho_ji: f64, shift: f64, g: f64, b: f64, shunt: f64) -> Self {
        let (s, c) = shift.sin_cos();
        let rr = rho_ij * rho_ji;
        Self {
            k1: rho_ij * rho_ij * g,
            k2: rho_ij * rho_ij * (b + shunt),
            k3: rr * (c * g - s * b),
            k4: rr * (c * b + s * g),
        }
    }

    fn add(&mut self, other: Kappa) {
        self.k1 += other.k1;
        self.k2 += other.k2;
        self.k3 += other.k3;
        self.k4 += other.k4;
    }

    /// Current-row block multiplying the state of the measuring bus.
    pub fn self_block(&self) -> Matrix2<f64> {
        Matrix2::new(self.k1, -self.k2, self.k2, self.k1)
    }

    /// Current-row block multiplying the state of the far bus.
    pub fn far_block(&self) -> Matrix2<f64> {
        Matrix2::new(-self.k3, self.k4, -self.k4, -self.k3)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("bus {bus} is not an endpoint of branch {from}-{to}")]
    NotAnEndpoint { bus: BusId, from: BusId, to: BusId },
    #[error("bus {0} has no PMU")]
    NotPmuBus(BusId),
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
}

/// Coefficients of `branch` seen from `bus_side`, which must be one of its endpoints.
///
/// The `from` side carries the tap: |ρ| = 1/tap there and 1 on the `to` side,
/// and the phase shift flips sign on the `to` side.
pub fn kappa(branch: &Branch, bus_side: &Bus) -> Result<Kappa, ModelError> {
    let inv_tap = 1.0 / branch.tap;
    if bus_side.id == branch.from {
        Ok(Kappa::from_parts(
            inv_tap,
            1.0,
            branch.shift,
            branch.g,
            branch.b,
            bus_side.shunt_b,
        ))
    } else if bus_side.id == branch.to {
        Ok(Kappa::from_parts(
            1.0,
            inv_tap,
            -branch.shift,
            branch.g,
            branch.b,
            bus_side.shunt_b,
        ))
    } else {
        Err(ModelError::NotAnEndpoint {
            bus: bus_side.id,
            from: branch.from,
            to: branch.to,
        })
    }
}

/// Summed coefficients of every branch between `i` and `j`, seen from `i`.
pub fn kappa_between(case: &NetworkCase, i: usize, j: usize) -> Kappa {
    let mut total = Kappa::default();
    for &k in case.incident_branches(i) {
        let (f, t) = case.endpoints(k);
        if (f == i && t == j) || (f == j && t == i) {
            total.add(kappa(&case.branches()[k], case.bus(i)).expect("incident branch"));
        }
    }
    total
}

/// The linear PMU model at one bus: `z_i = Σ_j (H_ij + θ_i G_ij) s_j + w_i`.
///
/// `neighbors` is M(i) in ascending order and includes the bus itself. Row 0-1
/// hold the voltage pair, rows `2k+2..2k+4` the current toward the k-th adjacent
/// bus. A bus without a PMU carries a stub with no blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BusMeasurementModel {
    pub bus: BusId,
    pub index: usize,
    pub neighbors: Vec<usize>,
    pub h: Vec<Block>,
    pub g: Vec<Block>,
}

impl BusMeasurementModel {
    pub fn stub(case: &NetworkCase, index: usize) -> Self {
        Self {
            bus: case.bus(index).id,
            index,
            neighbors: case.closed_neighborhood(index),
            h: Vec::new(),
            g: Vec::new(),
        }
    }

    pub fn is_stub(&self) -> bool {
        self.h.is_empty()
    }

    /// Number of readings, `2|M(i)|`, or zero for a stub.
    pub fn rows(&self) -> usize {
        if self.is_stub() {
            0
        } else {
            2 * self.neighbors.len()
        }
    }

    /// Position of bus index `j` inside M(i).
    pub fn position(&self, j: usize) -> Option<usize> {
        self.neighbors.binary_search(&j).ok()
    }

    /// Position of the measuring bus itself inside M(i).
    pub fn self_position(&self) -> usize {
        self.position(self.index).expect("M(i) contains i")
    }

    /// `Σ_j (H_ij + θ G_ij) s_j` with `state(j)` giving the rectangular state of bus index `j`.
    pub fn predict(&self, theta: f64, state: impl Fn(usize) -> Vector2<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows());
        for (pos, &j) in self.neighbors.iter().enumerate() {
            let s = state(j);
            out += (&self.h[pos] + &self.g[pos] * theta) * s;
        }
        out
    }
}

pub fn build_measurement_model(
    case: &NetworkCase,
    id: BusId,
) -> Result<BusMeasurementModel, ModelError> {
    let i = case.index_of(id).ok_or(ModelError::UnknownBus(id))?;
    if !case.is_pmu(i) {
        return Err(ModelError::NotPmuBus(id));
    }
    let neighbors = case.closed_neighborhood(i);
    let rows = 2 * neighbors.len();
    let mut h = vec![Block::zeros(rows); neighbors.len()];
    let self_pos = neighbors.binary_search(&i).expect("M(i) contains i");
    h[self_pos]
        .fixed_view_mut::<2, 2>(0, 0)
        .copy_from(&Matrix2::identity());

    for (k, &j) in case.adjacent(i).iter().enumerate() {
        let row = 2 + 2 * k;
        let kap = kappa_between(case, i, j);
        let far_pos = neighbors.binary_search(&j).expect("adjacent bus in M(i)");
        h[self_pos]
            .fixed_view_mut::<2, 2>(row, 0)
            .copy_from(&kap.self_block());
        h[far_pos]
            .fixed_view_mut::<2, 2>(row, 0)
            .copy_from(&kap.far_block());
    }

    // A phase error rotates every reading, so each G row pair is ROTATE times the H row pair.
    let g = h
        .iter()
        .map(|blk| {
            let mut out = Block::zeros(rows);
            for r in (0..rows).step_by(2) {
                let rotated = ROTATE * blk.fixed_view::<2, 2>(r, 0);
                out.fixed_view_mut::<2, 2>(r, 0).copy_from(&rotated);
            }
            out
        })
        .collect();

    Ok(BusMeasurementModel {
        bus: id,
        index: i,
        neighbors,
        h,
        g,
    })
}

/// One model per bus in index order; buses without a PMU get stubs.
pub fn all_measurement_models(case: &NetworkCase) -> Vec<BusMeasurementModel> {
    (0..case.num_buses())
        .map(|i| {
            if case.is_pmu(i) {
                build_measurement_model(case, case.bus(i).id).expect("pmu bus")
            } else {
                BusMeasurementModel::stub(case, i)
            }
        })
        .collect()
}
