//! The fully distributed estimator: per-bus phase updates and Gaussian
//! messages between neighbors, scheduled by a distance-2 coloring and executed
//! on a simulated barrier-synchronized network.

mod node;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::centralized::{elbo_parts, EstimateError, PriorPrecision, StackedModel};
use crate::network::{BusId, Coloring};
use crate::phase::{PhaseBelief, PhaseError, PhasePrior};
use crate::scada::RectPrior;

pub use node::{
    compute_message, dvi_update_theta, update_belief, update_belief_info, GaussianMessage,
    NodeState, StateBelief,
};

#[derive(Debug, Error, PartialEq)]
pub enum DistributedError {
    #[error("schedule colors {got} buses, network has {expected}")]
    ScheduleSize { expected: usize, got: usize },
    #[error("buses {a} and {b} share a color but are within two hops")]
    TwoHopConflict { a: BusId, b: BusId },
    #[error("bus {receiver} is not a neighbor of bus {sender}")]
    NotNeighbor { sender: BusId, receiver: BusId },
    #[error("bus {bus} holds a belief of bus {neighbor} from round {stamp}, now round {round}")]
    StaleNeighbor {
        bus: BusId,
        neighbor: BusId,
        stamp: usize,
        round: usize,
    },
    #[error("accumulated precision at bus {0} is not positive definite")]
    NotPositiveDefinite(BusId),
    #[error("could not start worker pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
}

/// How each bus sees the SCADA prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocalPrior {
    /// Its own marginal block `N(γ_i, Γ_i)`; cross-bus prior correlation is dropped.
    Marginal,
    /// The full prior in information form. Its precision couples buses at
    /// most two hops apart, so a bus conditions on the current means of those
    /// buses: `N(s_i | s_k = μ_k, k ≠ i)`.
    #[default]
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DviOptions {
    /// Full sweeps over all colors after the initialization pass.
    pub max_rounds: usize,
    /// Threshold on the largest ‖Δμ_i‖∞ over a sweep.
    pub tol: f64,
    /// Worker threads inside one color group.
    pub threads: usize,
    pub prior: LocalPrior,
}

impl Default for DviOptions {
    fn default() -> Self {
        Self {
            max_rounds: 200,
            tol: 1e-8,
            threads: 1,
            prior: LocalPrior::default(),
        }
    }
}

/// One JSON-lines trace record: the state of a bus right after it updated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub round: usize,
    /// Color group, or `None` for the initialization pass.
    pub color: Option<usize>,
    pub bus: BusId,
    pub mu: [f64; 2],
    pub p_diag: [f64; 2],
    pub phase_mean: Option<f64>,
    pub phase_second: Option<f64>,
    /// Packets the bus sent: its belief and messages to each member of M(i).
    pub messages: usize,
}

/// Network-wide summary after one color group (or the initialization pass).
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub round: usize,
    pub color: Option<usize>,
    /// Mean-field ELBO with the block-diagonal prior.
    pub elbo: f64,
    /// Largest ‖Δμ_i‖∞ over the group.
    pub delta: f64,
    pub messages: usize,
}

/// Snapshot at the end of the initialization pass and of every sweep.
#[derive(Debug, Clone)]
pub struct RoundSnapshot {
    pub mu: DVector<f64>,
    pub phase_mean: Vec<f64>,
    pub elbo: f64,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct DviRun {
    pub nodes: Vec<NodeState>,
    /// Phase belief per PMU slot.
    pub phase: Vec<PhaseBelief>,
    pub steps: Vec<StepSummary>,
    pub rounds: Vec<RoundSnapshot>,
    pub records: Vec<TraceRecord>,
    pub sweeps: usize,
    pub converged: bool,
}

impl DviRun {
    pub fn mu(&self) -> DVector<f64> {
        stack_means(&self.nodes)
    }

    pub fn phase_means(&self) -> Vec<f64> {
        self.phase.iter().map(|b| b.mean).collect()
    }

    /// The trace as JSON lines, one record per line.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }
}

fn stack_means(nodes: &[NodeState]) -> DVector<f64> {
    DVector::from_fn(2 * nodes.len(), |k, _| nodes[k / 2].belief.mu[k % 2])
}

/// Mean-field ELBO of `Π b(θ_i) Π b(s_i)` against `prior`.
pub fn mean_field_elbo(
    model: &StackedModel,
    prior: &PriorPrecision,
    priors: &[PhasePrior],
    beliefs: &[StateBelief],
    phase: &[PhaseBelief],
) -> Result<f64, EstimateError> {
    model.check_phase_priors(priors)?;
    let mu = DVector::from_fn(2 * beliefs.len(), |k, _| beliefs[k / 2].mu[k % 2]);
    let mut trace = 0.0;
    let mut ln_det = 0.0;
    for (i, b) in beliefs.iter().enumerate() {
        let prec = prior.precision.fixed_view::<2, 2>(2 * i, 2 * i);
        trace += prec.component_mul(&b.p).sum();
        ln_det += b.p.determinant().ln();
    }
    elbo_parts(
        model,
        prior,
        priors,
        &mu,
        |j, k| if j == k { beliefs[j].p } else { Matrix2::zeros() },
        trace,
        ln_det,
        phase,
    )
}

/// Per-bus view of the prior in information form.
#[derive(Debug, Clone)]
pub struct LocalPriors {
    /// The prior whose mean-field ELBO the schedule ascends.
    pub global: PriorPrecision,
    diag: Vec<Matrix2<f64>>,
    info: Vec<Vector2<f64>>,
    coupling: Vec<Vec<(usize, Matrix2<f64>)>>,
}

impl LocalPriors {
    pub fn new(model: &StackedModel, prior: &RectPrior, kind: LocalPrior) -> Result<Self, EstimateError> {
        let n = model.num_buses();
        let global = match kind {
            LocalPrior::Marginal => PriorPrecision::new(&prior.block_diagonal())?,
            LocalPrior::Conditional => {
                let full = PriorPrecision::new(prior)?;
                // keep only blocks within two hops; the rest is roundoff
                let mut masked = DMatrix::zeros(2 * n, 2 * n);
                for i in 0..n {
                    for k in two_hop(model, i) {
                        masked
                            .view_mut((2 * i, 2 * k), (2, 2))
                            .copy_from(&full.precision.view((2 * i, 2 * k), (2, 2)));
                    }
                }
                PriorPrecision::from_precision(prior.s_hat.clone(), masked)?
            }
        };
        let lam = &global.precision;
        let base = lam * &global.mean;
        let block = |i: usize, k: usize| -> Matrix2<f64> { lam.fixed_view::<2, 2>(2 * i, 2 * k).into_owned() };
        let coupling = (0..n)
            .map(|i| {
                two_hop(model, i)
                    .into_iter()
                    .filter(|&k| k != i && kind == LocalPrior::Conditional)
                    .map(|k| (k, block(i, k)))
                    .collect()
            })
            .collect();
        Ok(Self {
            diag: (0..n).map(|i| block(i, i)).collect(),
            info: (0..n).map(|i| Vector2::new(base[2 * i], base[2 * i + 1])).collect(),
            coupling,
            global,
        })
    }

    /// `(Λ_ii, (Λŝ)_i − Σ_{k≠i} Λ_ik μ_k)` against the current beliefs.
    fn at(&self, i: usize, beliefs: &[StateBelief]) -> (Matrix2<f64>, Vector2<f64>) {
        let mut info = self.info[i];
        for (k, c) in &self.coupling[i] {
            info -= c * beliefs[*k].mu;
        }
        (self.diag[i], info)
    }
}

/// Bus indices within two hops of `i`, including `i`, ascending.
fn two_hop(model: &StackedModel, i: usize) -> Vec<usize> {
    let mut out: Vec<usize> = model.bus_models()[i]
        .neighbors
        .iter()
        .flat_map(|&j| model.bus_models()[j].neighbors.iter().copied())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Simulated network: node states and the latest message on every PMU link.
struct Harness<'a> {
    model: &'a StackedModel,
    priors: &'a [PhasePrior],
    local: &'a LocalPriors,
    nodes: Vec<NodeState>,
    phase: Vec<PhaseBelief>,
    /// `outbox[slot][k]` is the message from PMU `slot` to its k-th neighbor.
    outbox: Vec<Vec<GaussianMessage>>,
    /// `None` runs serially; handing tiny steps to a pool costs more than the work.
    pool: Option<rayon::ThreadPool>,
}

fn par_map<I: Sync, T: Send>(pool: Option<&rayon::ThreadPool>, items: &[I], f: impl Fn(&I) -> T + Sync) -> Vec<T> {
    match pool {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

impl<'a> Harness<'a> {
    fn beliefs(&self) -> Vec<StateBelief> {
        self.nodes.iter().map(|n| n.belief).collect()
    }

    /// New phase beliefs for the PMUs among `buses`, against the committed snapshot.
    fn phase_step(&mut self, buses: &[usize], round: usize) -> Result<(), DistributedError> {
        let snapshot = self.beliefs();
        let slots: Vec<usize> = buses.iter().filter_map(|&i| self.model.slot_of(i)).collect();
        let (model, priors) = (self.model, self.priors);
        let updated = par_map(self.pool.as_ref(), &slots, |&s| {
            dvi_update_theta(model, s, &priors[s], &snapshot, round)
        });
        for (&s, b) in slots.iter().zip(updated) {
            let b = b?;
            self.phase[s] = b;
            self.nodes[model.local(s).bus].phase = Some(b);
        }
        Ok(())
    }

    /// Every PMU among `senders` recomputes all its outgoing messages.
    fn message_step(&mut self, senders: &[usize], round: usize) -> Result<(), DistributedError> {
        let snapshot = self.beliefs();
        let slots: Vec<usize> = senders.iter().filter_map(|&i| self.model.slot_of(i)).collect();
        let (model, phase) = (self.model, &self.phase);
        let fresh = par_map(self.pool.as_ref(), &slots, |&s| {
            model
                .local(s)
                .cols
                .iter()
                .map(|&to| compute_message(model, s, to, &phase[s], &snapshot, round))
                .collect::<Result<Vec<_>, _>>()
        });
        for (&s, msgs) in slots.iter().zip(fresh) {
            self.outbox[s] = msgs?;
        }
        Ok(())
    }

    fn inbox(&self, i: usize) -> Vec<GaussianMessage> {
        self.model.bus_models()[i]
            .neighbors
            .iter()
            .filter_map(|&j| {
                let slot = self.model.slot_of(j)?;
                let pos = self.model.local(slot).position(i)?;
                Some(self.outbox[slot][pos])
            })
            .collect()
    }

    /// Belief updates of `buses`; returns the largest mean change.
    fn belief_step(&mut self, buses: &[usize], round: usize) -> Result<f64, DistributedError> {
        let inboxes = buses.iter().map(|&i| self.inbox(i));
        let snapshot = self.beliefs();
        let (nodes, local) = (&self.nodes, self.local);
        let work: Vec<(usize, Vec<GaussianMessage>)> = buses.iter().copied().zip(inboxes).collect();
        let updated = par_map(self.pool.as_ref(), &work, |(i, inbox)| {
            let (prec, info) = local.at(*i, &snapshot);
            update_belief_info(nodes[*i].bus, &prec, &info, inbox, round)
        });
        let mut delta = 0.0f64;
        for (&i, b) in buses.iter().zip(updated) {
            let b = b?;
            delta = delta.max((b.mu - self.nodes[i].belief.mu).amax());
            self.nodes[i].belief = b;
        }
        Ok(delta)
    }

    /// PMU buses adjacent to (or inside) `buses`, ascending.
    fn refreshers(&self, buses: &[usize]) -> Vec<usize> {
        let mut mark = vec![false; self.nodes.len()];
        for &i in buses {
            for &j in &self.model.bus_models()[i].neighbors {
                mark[j] = true;
            }
        }
        (0..mark.len())
            .filter(|&j| mark[j] && self.model.slot_of(j).is_some())
            .collect()
    }

    fn packets(&self, i: usize) -> usize {
        self.model.bus_models()[i].neighbors.len()
    }

    fn record(&self, i: usize, round: usize, color: Option<usize>) -> TraceRecord {
        let n = &self.nodes[i];
        TraceRecord {
            round,
            color,
            bus: n.bus,
            mu: [n.belief.mu[0], n.belief.mu[1]],
            p_diag: [n.belief.p[(0, 0)], n.belief.p[(1, 1)]],
            phase_mean: n.phase.map(|b| b.mean),
            phase_second: n.phase.map(|b| b.second),
            messages: self.packets(i),
        }
    }
}

/// Within one color, no two buses may share a neighbor or be adjacent.
fn check_groups(model: &StackedModel, groups: &[Vec<usize>]) -> Result<(), DistributedError> {
    let n = model.num_buses();
    let mut owner = vec![usize::MAX; n];
    for group in groups {
        for &i in group {
            for &j in &model.bus_models()[i].neighbors {
                if owner[j] != usize::MAX && owner[j] != i {
                    return Err(DistributedError::TwoHopConflict {
                        a: model.bus_models()[owner[j]].bus,
                        b: model.bus_models()[i].bus,
                    });
                }
                owner[j] = i;
            }
        }
        for &i in group {
            for &j in &model.bus_models()[i].neighbors {
                owner[j] = usize::MAX;
            }
        }
    }
    Ok(())
}

/// Algorithm 1: a Jacobi initialization pass, then sweeps over the color
/// groups until the largest mean change in a sweep falls below `tol`.
pub fn run_algorithm1(
    model: &StackedModel,
    prior: &RectPrior,
    priors: &[PhasePrior],
    schedule: &Coloring,
    opts: DviOptions,
) -> Result<DviRun, DistributedError> {
    let n = model.num_buses();
    if schedule.len() != n {
        return Err(DistributedError::ScheduleSize {
            expected: n,
            got: schedule.len(),
        });
    }
    if prior.s_hat.len() != 2 * n {
        return Err(EstimateError::PriorDimension {
            expected: 2 * n,
            got: prior.s_hat.len(),
        }
        .into());
    }
    model.check_phase_priors(priors)?;
    let groups = schedule.groups();
    check_groups(model, &groups)?;
    let local = LocalPriors::new(model, prior, opts.prior)?;

    let nodes: Vec<NodeState> = (0..n)
        .map(|i| {
            let (mean, cov) = (prior.mean_block(i), prior.cov_block(i));
            NodeState {
                index: i,
                bus: model.bus_models()[i].bus,
                belief: StateBelief {
                    mu: mean,
                    p: cov,
                    round: 0,
                },
                phase: None,
                prior_mean: mean,
                prior_cov: cov,
            }
        })
        .collect();
    let mut phase = Vec::with_capacity(model.num_pmus());
    for p in priors {
        phase.push(p.belief()?);
    }
    let outbox = model
        .locals()
        .iter()
        .map(|l| {
            l.cols
                .iter()
                .map(|&to| GaussianMessage::vacuous(l.bus, to, 0))
                .collect()
        })
        .collect();
    let pool = match opts.threads {
        0 | 1 => None,
        t => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| DistributedError::ThreadPool(e.to_string()))?,
        ),
    };
    let mut h = Harness {
        model,
        priors,
        local: &local,
        nodes,
        phase,
        outbox,
        pool,
    };
    for (slot, l) in model.locals().iter().enumerate() {
        h.nodes[l.bus].phase = Some(h.phase[slot]);
    }

    let all: Vec<usize> = (0..n).collect();
    let mut records = Vec::new();
    let mut steps = Vec::new();
    let mut rounds = Vec::new();

    let elbo_now = |h: &Harness| -> Result<f64, DistributedError> {
        Ok(mean_field_elbo(
            model,
            &local.global,
            priors,
            &h.beliefs(),
            &h.phase,
        )?)
    };

    // initialization: every bus acts at once on the prior beliefs
    h.phase_step(&all, 0)?;
    h.message_step(&all, 0)?;
    let delta = h.belief_step(&all, 0)?;
    h.message_step(&all, 0)?;
    let packets: usize = all.iter().map(|&i| h.packets(i)).sum();
    records.extend(all.iter().map(|&i| h.record(i, 0, None)));
    let elbo = elbo_now(&h)?;
    steps.push(StepSummary {
        round: 0,
        color: None,
        elbo,
        delta,
        messages: packets,
    });
    rounds.push(RoundSnapshot {
        mu: stack_means(&h.nodes),
        phase_mean: h.phase.iter().map(|b| b.mean).collect(),
        elbo,
        delta,
    });

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_rounds {
        sweeps += 1;
        let round = sweeps;
        let mut sweep_delta = 0.0f64;
        let mut elbo = rounds.last().map(|r: &RoundSnapshot| r.elbo).unwrap_or(0.0);
        for (color, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            h.phase_step(group, round)?;
            h.message_step(group, round)?;
            let delta = h.belief_step(group, round)?;
            let refresh = h.refreshers(group);
            h.message_step(&refresh, round)?;
            sweep_delta = sweep_delta.max(delta);
            let packets: usize = group.iter().map(|&i| h.packets(i)).sum();
            records.extend(group.iter().map(|&i| h.record(i, round, Some(color))));
            elbo = elbo_now(&h)?;
            steps.push(StepSummary {
                round,
                color: Some(color),
                elbo,
                delta,
                messages: packets,
            });
        }
        rounds.push(RoundSnapshot {
            mu: stack_means(&h.nodes),
            phase_mean: h.phase.iter().map(|b| b.mean).collect(),
            elbo,
            delta: sweep_delta,
        });
        if sweep_delta < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(DviRun {
        nodes: h.nodes,
        phase: h.phase,
        steps,
        rounds,
        records,
        sweeps,
        converged,
    })
}
