use nalgebra::{Cholesky, Matrix2, Vector2};

use crate::centralized::StackedModel;
use crate::network::BusId;
use crate::phase::{PhaseBelief, PhasePrior};

use super::DistributedError;

/// `b(s_i) = N(μ_i, P_ii)`, stamped with the round that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateBelief {
    pub mu: Vector2<f64>,
    pub p: Matrix2<f64>,
    pub round: usize,
}

/// Everything one bus holds between barriers.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub index: usize,
    pub bus: BusId,
    pub belief: StateBelief,
    /// Present only at PMU buses.
    pub phase: Option<PhaseBelief>,
    pub prior_mean: Vector2<f64>,
    pub prior_cov: Matrix2<f64>,
}

/// `m_{j→i}` in information form: precision `Λ` and information vector `η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMessage {
    pub sender: usize,
    pub receiver: usize,
    pub round: usize,
    pub precision: Matrix2<f64>,
    pub info: Vector2<f64>,
}

impl GaussianMessage {
    pub fn vacuous(sender: usize, receiver: usize, round: usize) -> Self {
        Self {
            sender,
            receiver,
            round,
            precision: Matrix2::zeros(),
            info: Vector2::zeros(),
        }
    }
}

fn check_fresh(
    model: &StackedModel,
    bus: usize,
    neighbors: &[usize],
    beliefs: &[StateBelief],
    round: usize,
) -> Result<(), DistributedError> {
    for &j in neighbors {
        let stamp = beliefs[j].round;
        if stamp + 1 < round {
            return Err(DistributedError::StaleNeighbor {
                bus: model.bus_models()[bus].bus,
                neighbor: model.bus_models()[j].bus,
                stamp,
                round,
            });
        }
    }
    Ok(())
}

/// The local q(θ_i) update from the neighbors' marginal beliefs only.
pub fn dvi_update_theta(
    model: &StackedModel,
    slot: usize,
    prior: &PhasePrior,
    beliefs: &[StateBelief],
    round: usize,
) -> Result<PhaseBelief, DistributedError> {
    let l = model.local(slot);
    check_fresh(model, l.bus, &l.cols, beliefs, round)?;
    let (mu, cov) = l.moments(
        |j| [beliefs[j].mu[0], beliefs[j].mu[1]],
        |j, k| if j == k { beliefs[j].p } else { Matrix2::zeros() },
    );
    Ok(l.phase_update(prior, &mu, &cov)?)
}

/// `m_{j→i}` from PMU slot `sender_slot` to bus index `receiver`, using the
/// sender's phase moments and the current means of its other neighbors.
pub fn compute_message(
    model: &StackedModel,
    sender_slot: usize,
    receiver: usize,
    phase: &PhaseBelief,
    beliefs: &[StateBelief],
    round: usize,
) -> Result<GaussianMessage, DistributedError> {
    let l = model.local(sender_slot);
    let pos = l.position(receiver).ok_or(DistributedError::NotNeighbor {
        sender: model.bus_models()[l.bus].bus,
        receiver: model.bus_models()[receiver].bus,
    })?;
    let (w, t) = (phase.mean, phase.second);
    let inv = 1.0 / (l.sigma * l.sigma);
    let precision = l.gram_block(pos, pos, w, t) * inv;
    let mut info = l.projection(pos, w);
    for (k, &j) in l.cols.iter().enumerate() {
        if k != pos {
            info -= l.gram_block(pos, k, w, t) * beliefs[j].mu;
        }
    }
    Ok(GaussianMessage {
        sender: l.bus,
        receiver,
        round,
        precision: (precision + precision.transpose()) * 0.5,
        info: info * inv,
    })
}

/// `P_ii = (Γ_i⁻¹ + Σ Λ_{j→i})⁻¹`, `μ_i = P_ii(Γ_i⁻¹γ_i + Σ η_{j→i})`.
pub fn update_belief(
    bus: BusId,
    prior_mean: &Vector2<f64>,
    prior_cov: &Matrix2<f64>,
    messages: &[GaussianMessage],
    round: usize,
) -> Result<StateBelief, DistributedError> {
    let prior_prec = Cholesky::new(*prior_cov)
        .ok_or(DistributedError::NotPositiveDefinite(bus))?
        .inverse();
    update_belief_info(bus, &prior_prec, &(prior_prec * prior_mean), messages, round)
}

/// [`update_belief`] with the local prior already in information form.
pub fn update_belief_info(
    bus: BusId,
    prior_precision: &Matrix2<f64>,
    prior_info: &Vector2<f64>,
    messages: &[GaussianMessage],
    round: usize,
) -> Result<StateBelief, DistributedError> {
    let mut precision = *prior_precision;
    let mut info = *prior_info;
    for m in messages {
        precision += m.precision;
        info += m.info;
    }
    let precision = (precision + precision.transpose()) * 0.5;
    let chol = Cholesky::new(precision).ok_or(DistributedError::NotPositiveDefinite(bus))?;
    let p = chol.inverse();
    Ok(StateBelief {
        mu: chol.solve(&info),
        p: (p + p.transpose()) * 0.5,
        round,
    })
}
