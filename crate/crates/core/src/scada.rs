//! The legacy SCADA estimator: the nonlinear RTU measurement function in
//! polar coordinates, Gauss–Newton iterative reweighted least squares, and the
//! linearized polar-to-rectangular transform that yields the Gaussian prior
//! for the PMU stage.

use nalgebra::{Complex, DMatrix, DVector, Matrix2, Vector2};
use thiserror::Error;

use crate::network::{kappa, Kappa, NetworkCase};

#[derive(Debug, Error, PartialEq)]
pub enum ScadaError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("measurement variance {value} at row {row} is not positive")]
    NonPositiveVariance { row: usize, value: f64 },
    #[error("normal matrix is rank deficient (null space dimension {null_dim})")]
    RankDeficient { null_dim: usize },
    #[error("objective grew for 3 consecutive iterations (stopped at iteration {iteration})")]
    Diverged { iteration: usize },
    #[error("bus index {index} has non-positive magnitude {value}")]
    NonPositiveMagnitude { index: usize, value: f64 },
}

/// A differentiable measurement function `ζ = g(ξ) + n`.
pub trait MeasurementFunction {
    fn state_dim(&self) -> usize;
    fn measurement_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Per branch end: the end bus, the far bus, and `I = own·V_end − far·V_far`.
#[derive(Debug, Clone, Copy)]
struct BranchEnd {
    bus: usize,
    other: usize,
    own: Complex<f64>,
    far: Complex<f64>,
}

impl BranchEnd {
    fn new(bus: usize, other: usize, k: Kappa) -> Self {
        Self {
            bus,
            other,
            own: Complex::new(k.k1, k.k2),
            far: Complex::new(k.k3, k.k4),
        }
    }
}

/// RTU measurement suite of a network, in polar state `ξ = [A_1, φ_1, …]`.
///
/// Rows, in order: for every bus `|V|`, `P` injection, `Q` injection; for
/// every branch `P`, `Q` at the from end then `P`, `Q` at the to end; and a
/// final angle reading of the first bus that fixes the rotational reference.
#[derive(Debug, Clone)]
pub struct ScadaModel {
    num_buses: usize,
    /// Two ends per branch, branch order preserved.
    ends: Vec<BranchEnd>,
}

impl ScadaModel {
    pub fn new(case: &NetworkCase) -> Self {
        let mut ends = Vec::with_capacity(2 * case.branches().len());
        for (k, br) in case.branches().iter().enumerate() {
            let (f, t) = case.endpoints(k);
            let kf = kappa(br, case.bus(f)).expect("endpoint");
            let kt = kappa(br, case.bus(t)).expect("endpoint");
            ends.push(BranchEnd::new(f, t, kf));
            ends.push(BranchEnd::new(t, f, kt));
        }
        Self {
            num_buses: case.num_buses(),
            ends,
        }
    }

    pub fn num_buses(&self) -> usize {
        self.num_buses
    }

    /// Row of the `|V|` reading of bus `i`; P and Q injections follow.
    pub fn bus_row(&self, i: usize) -> usize {
        3 * i
    }

    /// Row of the from-end `P` flow of branch `k`; `Q`, to-end `P`, `Q` follow.
    pub fn branch_row(&self, k: usize) -> usize {
        3 * self.num_buses + 4 * k
    }

    pub fn reference_row(&self) -> usize {
        3 * self.num_buses + 2 * self.ends.len()
    }

    fn voltages(&self, x: &DVector<f64>) -> Vec<Complex<f64>> {
        (0..self.num_buses)
            .map(|i| Complex::from_polar(x[2 * i], x[2 * i + 1]))
            .collect()
    }

    fn end_power(end: &BranchEnd, v: &[Complex<f64>]) -> Complex<f64> {
        let current = end.own * v[end.bus] - end.far * v[end.other];
        v[end.bus] * current.conj()
    }
}

impl MeasurementFunction for ScadaModel {
    fn state_dim(&self) -> usize {
        2 * self.num_buses
    }

    fn measurement_dim(&self) -> usize {
        3 * self.num_buses + 2 * self.ends.len() + 1
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let v = self.voltages(x);
        let mut out = DVector::zeros(self.measurement_dim());
        for i in 0..self.num_buses {
            out[3 * i] = x[2 * i];
        }
        for (e, end) in self.ends.iter().enumerate() {
            let s = Self::end_power(end, &v);
            let row = 3 * self.num_buses + 2 * e;
            out[row] = s.re;
            out[row + 1] = s.im;
            out[3 * end.bus + 1] += s.re;
            out[3 * end.bus + 2] += s.im;
        }
        out[self.reference_row()] = x[1];
        out
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let v = self.voltages(x);
        let mut jac = DMatrix::zeros(self.measurement_dim(), self.state_dim());
        for i in 0..self.num_buses {
            jac[(3 * i, 2 * i)] = 1.0;
        }
        let j = Complex::new(0.0, 1.0);
        for (e, end) in self.ends.iter().enumerate() {
            let (b, o) = (end.bus, end.other);
            let current = end.own * v[b] - end.far * v[o];
            // derivatives of V w.r.t. magnitude and angle
            let dv_b = [v[b] / x[2 * b], j * v[b]];
            let dv_o = [v[o] / x[2 * o], j * v[o]];
            let flow_row = 3 * self.num_buses + 2 * e;
            for q in 0..2 {
                let ds_own = dv_b[q] * current.conj() + v[b] * (end.own * dv_b[q]).conj();
                let ds_far = v[b] * (-(end.far * dv_o[q])).conj();
                for (row, ds, col) in [
                    (flow_row, ds_own, 2 * b + q),
                    (flow_row, ds_far, 2 * o + q),
                    (3 * b + 1, ds_own, 2 * b + q),
                    (3 * b + 1, ds_far, 2 * o + q),
                ] {
                    jac[(row, col)] += ds.re;
                    jac[(row + 1, col)] += ds.im;
                }
            }
        }
        jac[(self.reference_row(), 1)] = 1.0;
        jac
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrwlsOptions {
    pub max_iter: usize,
    /// Convergence threshold on the infinity norm of the Gauss–Newton step.
    pub tol: f64,
}

impl Default for IrwlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

/// SCADA estimate `ξ̂` with covariance `Υ = (∇gᵀ W⁻¹ ∇g)⁻¹` at `ξ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarEstimate {
    pub xi: DVector<f64>,
    pub upsilon: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct IrwlsReport {
    pub estimate: PolarEstimate,
    pub iterations: usize,
    pub converged: bool,
    /// `½‖ζ − g(ξ)‖²_{W⁻¹}` at the start and after every accepted step.
    pub objective: Vec<f64>,
}

fn weighted_objective(residual: &DVector<f64>, inv_w: &DVector<f64>) -> f64 {
    0.5 * residual
        .iter()
        .zip(inv_w.iter())
        .map(|(r, w)| r * r * w)
        .sum::<f64>()
}

/// `Jᵀ W⁻¹ J` for diagonal `W⁻¹`.
fn normal_matrix(jac: &DMatrix<f64>, inv_w: &DVector<f64>) -> DMatrix<f64> {
    let mut weighted = jac.clone();
    for (r, mut row) in weighted.row_iter_mut().enumerate() {
        row *= inv_w[r];
    }
    jac.transpose() * weighted
}

fn rank_deficiency(normal: &DMatrix<f64>) -> usize {
    let eig = normal.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, &e| m.max(e.abs()));
    eig.iter()
        .filter(|&&e| e <= 1e-12 * max.max(f64::MIN_POSITIVE))
        .count()
        .max(1)
}

fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, ScadaError> {
    match m.clone().cholesky() {
        Some(ch) => {
            let inv = ch.inverse();
            Ok((&inv + inv.transpose()) * 0.5)
        }
        None => Err(ScadaError::RankDeficient {
            null_dim: rank_deficiency(m),
        }),
    }
}

/// Gauss–Newton on `½‖ζ − g(ξ)‖²_{W⁻¹}` with step halving on objective increase.
/// `w` is the diagonal of the noise covariance.
pub fn irwls_estimate(
    model: &impl MeasurementFunction,
    zeta: &DVector<f64>,
    w: &DVector<f64>,
    init: DVector<f64>,
    opts: IrwlsOptions,
) -> Result<IrwlsReport, ScadaError> {
    let (m, n) = (model.measurement_dim(), model.state_dim());
    for (expected, got) in [(m, zeta.len()), (m, w.len()), (n, init.len())] {
        if expected != got {
            return Err(ScadaError::DimensionMismatch { expected, got });
        }
    }
    if let Some((row, &value)) = w.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
        return Err(ScadaError::NonPositiveVariance { row, value });
    }
    let inv_w = w.map(|x| 1.0 / x);

    let mut xi = init;
    let mut residual = zeta - model.eval(&xi);
    let mut objective = vec![weighted_objective(&residual, &inv_w)];
    let mut growth = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let jac = model.jacobian(&xi);
        let normal = normal_matrix(&jac, &inv_w);
        let rhs = jac.transpose() * residual.component_mul(&inv_w);
        let chol = normal.clone().cholesky().ok_or_else(|| ScadaError::RankDeficient {
            null_dim: rank_deficiency(&normal),
        })?;
        let step = chol.solve(&rhs);
        let step_norm = step.amax();

        let current = *objective.last().expect("non-empty");
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=10 {
            let trial = &xi + &step * scale;
            let trial_res = zeta - model.eval(&trial);
            let trial_obj = weighted_objective(&trial_res, &inv_w);
            if trial_obj <= current {
                accepted = Some((trial, trial_res, trial_obj));
                break;
            }
            scale *= 0.5;
        }

        match accepted {
            Some((trial, res, obj)) => {
                xi = trial;
                residual = res;
                objective.push(obj);
                growth = 0;
            }
            None if step_norm < opts.tol.sqrt() => {
                // already at the numerical floor of the objective
                converged = true;
                break;
            }
            None => {
                growth += 1;
                if growth >= 3 {
                    return Err(ScadaError::Diverged {
                        iteration: iterations,
                    });
                }
                xi += &step * scale;
                residual = zeta - model.eval(&xi);
                objective.push(weighted_objective(&residual, &inv_w));
            }
        }
        if step_norm * scale < opts.tol {
            converged = true;
            break;
        }
    }

    let jac = model.jacobian(&xi);
    let upsilon = invert_spd(&normal_matrix(&jac, &inv_w))?;
    Ok(IrwlsReport {
        estimate: PolarEstimate { xi, upsilon },
        iterations,
        converged,
        objective,
    })
}

/// Flat start `[A_i, φ_i] = [1, 0]`.
pub fn flat_start(num_buses: usize) -> DVector<f64> {
    DVector::from_fn(2 * num_buses, |k, _| if k % 2 == 0 { 1.0 } else { 0.0 })
}

/// Gaussian prior on the rectangular state: mean `ŝ` and covariance `Γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RectPrior {
    pub s_hat: DVector<f64>,
    pub gamma: DMatrix<f64>,
}

impl RectPrior {
    pub fn new(s_hat: DVector<f64>, gamma: DMatrix<f64>) -> Self {
        Self { s_hat, gamma }
    }

    pub fn num_buses(&self) -> usize {
        self.s_hat.len() / 2
    }

    /// γ_i, the prior mean of bus `i`.
    pub fn mean_block(&self, i: usize) -> Vector2<f64> {
        self.s_hat.fixed_rows::<2>(2 * i).into_owned()
    }

    /// Γ_i, the diagonal covariance block of bus `i`.
    pub fn cov_block(&self, i: usize) -> Matrix2<f64> {
        self.gamma.fixed_view::<2, 2>(2 * i, 2 * i).into_owned()
    }

    /// The prior with every cross-bus covariance block dropped.
    pub fn block_diagonal(&self) -> RectPrior {
        let n = self.num_buses();
        let mut gamma = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            gamma
                .fixed_view_mut::<2, 2>(2 * i, 2 * i)
                .copy_from(&self.cov_block(i));
        }
        RectPrior::new(self.s_hat.clone(), gamma)
    }
}

/// Jacobian block of `(A, φ) ↦ (A cos φ, A sin φ)`.
pub fn polar_jacobian(magnitude: f64, angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -magnitude * s, s, magnitude * c)
}

/// `ŝ = T(ξ̂)` and `Γ = ∇T Υ ∇Tᵀ`, linearized at `ξ̂`.
pub fn polar_to_rect(p: &PolarEstimate) -> Result<RectPrior, ScadaError> {
    let n = p.xi.len() / 2;
    let mut s_hat = DVector::zeros(2 * n);
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        let (a, phi) = (p.xi[2 * i], p.xi[2 * i + 1]);
        if !(a > 0.0) {
            return Err(ScadaError::NonPositiveMagnitude { index: i, value: a });
        }
        s_hat[2 * i] = a * phi.cos();
        s_hat[2 * i + 1] = a * phi.sin();
        jac.fixed_view_mut::<2, 2>(2 * i, 2 * i)
            .copy_from(&polar_jacobian(a, phi));
    }
    let gamma = &jac * &p.upsilon * jac.transpose();
    let gamma = (&gamma + gamma.transpose()) * 0.5;
    Ok(RectPrior { s_hat, gamma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// `ζ = M ξ` with a fixed full-rank `M`.
    struct Linear(DMatrix<f64>);

    impl MeasurementFunction for Linear {
        fn state_dim(&self) -> usize {
            self.0.ncols()
        }
        fn measurement_dim(&self) -> usize {
            self.0.nrows()
        }
        fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
            &self.0 * x
        }
        fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
            self.0.clone()
        }
    }

    #[test]
    fn linear_model_converges_in_one_step() {
        let m = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let model = Linear(m.clone());
        let zeta = DVector::from_vec(vec![1.0, 2.0, 2.5, 0.3]);
        let w = DVector::from_vec(vec![1.0, 2.0, 0.5, 1.0]);
        let report =
            irwls_estimate(&model, &zeta, &w, DVector::zeros(2), IrwlsOptions::default()).unwrap();
        let winv = DMatrix::from_diagonal(&w.map(|x| 1.0 / x));
        let normal = m.transpose() * &winv * &m;
        let wls = normal.clone().lu().solve(&(m.transpose() * &winv * &zeta)).unwrap();
        assert_relative_eq!(report.estimate.xi, wls, epsilon = 1e-12);
        // one step, then a zero step confirms convergence
        assert!(report.iterations <= 2);
        assert_relative_eq!(
            report.estimate.upsilon,
            normal.try_inverse().unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn scaling_w_scales_upsilon_only() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 0.0, 1.0, 1.0, -1.0]);
        let model = Linear(m);
        let zeta = DVector::from_vec(vec![1.0, -2.0, 0.7]);
        let w = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let a = irwls_estimate(&model, &zeta, &w, DVector::zeros(2), IrwlsOptions::default())
            .unwrap();
        let b = irwls_estimate(&model, &zeta, &(&w * 7.0), DVector::zeros(2), IrwlsOptions::default())
            .unwrap();
        assert_relative_eq!(a.estimate.xi, b.estimate.xi, epsilon = 1e-12);
        assert_relative_eq!(a.estimate.upsilon * 7.0, b.estimate.upsilon, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let model = Linear(m);
        let err = irwls_estimate(
            &model,
            &DVector::from_vec(vec![1.0, 2.0, 3.0]),
            &DVector::from_element(3, 1.0),
            DVector::zeros(3),
            IrwlsOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err, ScadaError::RankDeficient { null_dim: 1 });
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let model = Linear(DMatrix::identity(2, 2));
        let z = DVector::zeros(2);
        assert!(matches!(
            irwls_estimate(&model, &z, &DVector::from_vec(vec![1.0, 0.0]), DVector::zeros(2), IrwlsOptions::default()),
            Err(ScadaError::NonPositiveVariance { row: 1, .. })
        ));
        assert!(matches!(
            irwls_estimate(&model, &DVector::zeros(3), &DVector::from_element(2, 1.0), DVector::zeros(2), IrwlsOptions::default()),
            Err(ScadaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_angle_transform_is_identity() {
        let p = PolarEstimate {
            xi: DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]),
            upsilon: DMatrix::identity(4, 4),
        };
        let r = polar_to_rect(&p).unwrap();
        assert_relative_eq!(r.gamma, DMatrix::identity(4, 4), epsilon = 1e-15);
        assert_relative_eq!(r.s_hat, DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn jacobian_block_at_quarter_turn() {
        let j = polar_jacobian(2.0, std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(j, Matrix2::new(0.0, -2.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn transform_round_trips_through_polar() {
        let xi = DVector::from_vec(vec![1.02, 0.3, 0.95, -0.7, 1.1, 2.9]);
        let r = polar_to_rect(&PolarEstimate {
            xi: xi.clone(),
            upsilon: DMatrix::identity(6, 6),
        })
        .unwrap();
        for i in 0..3 {
            let (x, y) = (r.s_hat[2 * i], r.s_hat[2 * i + 1]);
            assert!((x.hypot(y) - xi[2 * i]).abs() < 1e-12);
            assert!((y.atan2(x) - xi[2 * i + 1]).abs() < 1e-12);
        }
        assert!(matches!(
            polar_to_rect(&PolarEstimate {
                xi: DVector::from_vec(vec![-1.0, 0.0]),
                upsilon: DMatrix::identity(2, 2)
            }),
            Err(ScadaError::NonPositiveMagnitude { index: 0, .. })
        ));
    }

    fn ieee14() -> NetworkCase {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/ieee14.json");
        NetworkCase::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    fn case_state(case: &NetworkCase) -> DVector<f64> {
        DVector::from_fn(2 * case.num_buses(), |k, _| {
            let b = case.bus(k / 2);
            if k % 2 == 0 { b.vm } else { b.va }
        })
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let case = ieee14();
        let model = ScadaModel::new(&case);
        let x = case_state(&case);
        let jac = model.jacobian(&x);
        let h = 1e-6;
        for col in 0..x.len() {
            let mut up = x.clone();
            let mut dn = x.clone();
            up[col] += h;
            dn[col] -= h;
            let fd = (model.eval(&up) - model.eval(&dn)) / (2.0 * h);
            let err = (fd - jac.column(col)).amax();
            assert!(err < 1e-6, "column {col}: {err}");
        }
    }

    #[test]
    fn noise_free_ieee14_is_recovered_from_flat_start() {
        let case = ieee14();
        let model = ScadaModel::new(&case);
        let truth = case_state(&case);
        let zeta = model.eval(&truth);
        let w = DVector::from_element(zeta.len(), 1e-4);
        let report = irwls_estimate(&model, &zeta, &w, flat_start(case.num_buses()), IrwlsOptions::default()).unwrap();
        assert!(report.converged);
        assert!((&report.estimate.xi - &truth).amax() < 1e-8);
        assert!(report.objective.windows(2).all(|p| p[1] <= p[0]));
        let up = &report.estimate.upsilon;
        assert!((up - up.transpose()).amax() < 1e-10);
    }

    #[test]
    fn injections_sum_branch_flows() {
        let case = ieee14();
        let model = ScadaModel::new(&case);
        let zeta = model.eval(&case_state(&case));
        for i in 0..case.num_buses() {
            let (mut p, mut q) = (0.0, 0.0);
            for &k in case.incident_branches(i) {
                let (f, _) = case.endpoints(k);
                let row = model.branch_row(k) + if f == i { 0 } else { 2 };
                p += zeta[row];
                q += zeta[row + 1];
            }
            assert!((zeta[model.bus_row(i) + 1] - p).abs() < 1e-10);
            assert!((zeta[model.bus_row(i) + 2] - q).abs() < 1e-10);
        }
    }
}
