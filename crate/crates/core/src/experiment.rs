//! Monte-Carlo experiment runner: simulate, estimate, score.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::centralized::{
    am_estimate, cvi_run, wls_estimate, EstimateError, IterOptions, PriorPrecision, StackedModel,
};
use crate::distributed::{
    mean_field_elbo, run_algorithm1, DistributedError, DviOptions, LocalPrior, LocalPriors, StateBelief,
};
use crate::measurement::{perturb_state, simulate, MeasurementError, TrueState};
use crate::network::{distance2_coloring, BusId, CaseError, Coloring, NetworkCase};
use crate::phase::{PhaseError, PhasePrior};
use crate::scada::{flat_start, irwls_estimate, polar_to_rect, IrwlsOptions, RectPrior, ScadaError, ScadaModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// WLS with the true phase errors (benchmark).
    Wls,
    /// WLS that assumes zero phase error.
    WlsOblivious,
    Cvi,
    Am,
    Dvi,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Wls,
        Algorithm::WlsOblivious,
        Algorithm::Cvi,
        Algorithm::Am,
        Algorithm::Dvi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Wls => "wls",
            Algorithm::WlsOblivious => "wls-oblivious",
            Algorithm::Cvi => "cvi",
            Algorithm::Am => "am",
            Algorithm::Dvi => "dvi",
        }
    }

    /// Whether the algorithm estimates the phase errors.
    pub fn phase_aware(self) -> bool {
        matches!(self, Algorithm::Cvi | Algorithm::Am | Algorithm::Dvi)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ConfigError::UnknownAlgorithm(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("no algorithms selected")]
    NoAlgorithms,
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("{name} must be positive and finite, got {value}")]
    BadSigma { name: &'static str, value: f64 },
    #[error("theta bound must be finite and non-negative, got {0}")]
    BadThetaBound(f64),
    #[error("perturbation fraction must be in [0, 1), got {0}")]
    BadPerturb(f64),
    #[error("worker threads must be at least 1")]
    NoThreads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Explicit placement; empty keeps the placement stored in the case.
    pub pmu_buses: Vec<BusId>,
    pub algorithms: Vec<Algorithm>,
    pub runs: usize,
    pub max_iter: usize,
    pub sigma_pmu: f64,
    pub sigma_scada: f64,
    pub theta_bound_deg: f64,
    pub perturb_fraction: f64,
    pub seed: u64,
    /// Worker threads for the distributed harness inside one run.
    pub dvi_threads: usize,
    pub dvi_prior: LocalPrior,
    /// Convergence threshold shared by the iterative estimators.
    pub tol: f64,
    pub timing: bool,
    /// Keep the distributed trace of every run.
    pub keep_traces: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pmu_buses: Vec::new(),
            algorithms: Algorithm::ALL.to_vec(),
            runs: 1000,
            max_iter: 50,
            sigma_pmu: 1e-2,
            sigma_scada: 1e-2,
            theta_bound_deg: 6.0,
            perturb_fraction: 0.1,
            seed: 0,
            dvi_threads: 1,
            dvi_prior: LocalPrior::default(),
            tol: 1e-8,
            timing: false,
            keep_traces: false,
        }
    }
}

impl ExperimentConfig {
    /// The default study scaled down to 100 runs.
    pub fn desk() -> Self {
        Self {
            runs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.algorithms.is_empty() {
            return Err(ConfigError::NoAlgorithms);
        }
        if self.runs == 0 {
            return Err(ConfigError::NoRuns);
        }
        if self.max_iter == 0 {
            return Err(ConfigError::NoIterations);
        }
        for (name, value) in [("sigma_pmu", self.sigma_pmu), ("sigma_scada", self.sigma_scada)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::BadSigma { name, value });
            }
        }
        if !(self.theta_bound_deg >= 0.0 && self.theta_bound_deg.is_finite()) {
            return Err(ConfigError::BadThetaBound(self.theta_bound_deg));
        }
        if !(0.0..1.0).contains(&self.perturb_fraction) {
            return Err(ConfigError::BadPerturb(self.perturb_fraction));
        }
        if self.dvi_threads == 0 {
            return Err(ConfigError::NoThreads);
        }
        Ok(())
    }

    pub fn theta_bound(&self) -> f64 {
        self.theta_bound_deg.to_radians()
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("measurement simulation failed: {0}")]
    Measurement(#[from] MeasurementError),
    #[error("SCADA estimator failed: {0}")]
    Scada(#[from] ScadaError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Distributed(#[from] DistributedError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
}

/// One simulated instance, ready for the estimators.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub truth: TrueState,
    pub model: StackedModel,
    pub prior: RectPrior,
    pub phase_priors: Vec<PhasePrior>,
    /// True phase error per PMU slot.
    pub theta: Vec<f64>,
    pub coloring: Coloring,
    pub scada_converged: bool,
}

impl Scenario {
    pub fn truth_rect(&self) -> DVector<f64> {
        self.truth.rect_vector()
    }

    /// `(1/2|ℬ|) Σ ‖ŝ_i − s_i‖²`.
    pub fn state_mse(&self, estimate: &DVector<f64>) -> f64 {
        (estimate - self.truth_rect()).norm_squared() / estimate.len() as f64
    }

    /// `(1/|𝒫|) Σ (ϖ_i − θ_i)²`, or `None` without PMUs.
    pub fn phase_mse(&self, estimate: &[f64]) -> Option<f64> {
        if self.theta.is_empty() {
            return None;
        }
        let sum: f64 = estimate
            .iter()
            .zip(&self.theta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Some(sum / self.theta.len() as f64)
    }
}

/// Applies the configured placement to `case`.
pub fn place(case: &NetworkCase, cfg: &ExperimentConfig) -> Result<NetworkCase, CaseError> {
    if cfg.pmu_buses.is_empty() {
        Ok(case.clone())
    } else {
        case.with_pmu_buses(cfg.pmu_buses.iter().copied())
    }
}

/// Perturbs the state, draws phase errors and noisy measurements, and runs
/// the SCADA estimator from a flat start to form the rectangular prior.
pub fn build_scenario(case: &NetworkCase, cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<Scenario, RunError> {
    let truth = perturb_state(case, cfg.perturb_fraction, rng);
    let set = simulate(case, &truth, cfg.theta_bound(), cfg.sigma_pmu, cfg.sigma_scada, rng)?;
    let scada = ScadaModel::new(case);
    let report = irwls_estimate(
        &scada,
        &set.scada.zeta,
        &set.scada.variances,
        flat_start(case.num_buses()),
        IrwlsOptions::default(),
    )?;
    let prior = polar_to_rect(&report.estimate)?;
    let model = StackedModel::new(case, &set.pmu)?;
    let phase_priors = vec![PhasePrior::uniform(cfg.theta_bound())?; model.num_pmus()];
    Ok(Scenario {
        truth,
        model,
        prior,
        phase_priors,
        theta: set.theta_true.into_values().collect(),
        coloring: distance2_coloring(case),
        scada_converged: report.converged,
    })
}

/// One output row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub run: usize,
    pub algo: Algorithm,
    pub iter: usize,
    pub state_mse: f64,
    pub phase_mse: Option<f64>,
    pub elbo: Option<f64>,
    pub wall_ms: Option<f64>,
}

/// A run that failed inside one estimator; the batch continues.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunFailure {
    pub run: usize,
    pub algo: Option<Algorithm>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<RunFailure>,
    /// Distributed traces as JSON lines, tagged with the run.
    pub traces: Vec<String>,
}

struct Point {
    mu: DVector<f64>,
    phase: Option<Vec<f64>>,
    elbo: Option<f64>,
}

/// Per-iteration estimates for one algorithm; entry 0 is the SCADA prior.
fn trajectory(
    algo: Algorithm,
    sc: &Scenario,
    cfg: &ExperimentConfig,
    trace: &mut Option<String>,
) -> Result<Vec<Point>, RunError> {
    let prior = PriorPrecision::new(&sc.prior)?;
    let opts = IterOptions {
        max_iter: cfg.max_iter,
        tol: cfg.tol,
    };
    let zeros = vec![0.0; sc.model.num_pmus()];
    let fixed = |mu: DVector<f64>| {
        vec![Point {
            mu,
            phase: None,
            elbo: None,
        }]
    };
    Ok(match algo {
        Algorithm::Wls => fixed(wls_estimate(&sc.model, &prior, Some(&sc.theta))?.mu),
        Algorithm::WlsOblivious => fixed(wls_estimate(&sc.model, &prior, None)?.mu),
        Algorithm::Cvi => cvi_run(&sc.model, &prior, &sc.phase_priors, opts)?
            .trace
            .into_iter()
            .map(|t| Point {
                mu: t.mu,
                phase: Some(t.phase_mean),
                elbo: Some(t.elbo),
            })
            .collect(),
        Algorithm::Am => am_estimate(&sc.model, &prior, &sc.phase_priors, opts)?
            .trace
            .into_iter()
            .map(|t| Point {
                mu: t.mu,
                phase: Some(t.theta),
                elbo: None,
            })
            .collect(),
        Algorithm::Dvi => {
            let dopts = DviOptions {
                max_rounds: cfg.max_iter - 1,
                tol: cfg.tol,
                threads: cfg.dvi_threads,
                prior: cfg.dvi_prior,
            };
            let run = run_algorithm1(&sc.model, &sc.prior, &sc.phase_priors, &sc.coloring, dopts)?;
            let local = LocalPriors::new(&sc.model, &sc.prior, dopts.prior)?;
            let start: Vec<StateBelief> = (0..sc.model.num_buses())
                .map(|i| StateBelief {
                    mu: sc.prior.mean_block(i),
                    p: sc.prior.cov_block(i),
                    round: 0,
                })
                .collect();
            let start_phase = sc
                .phase_priors
                .iter()
                .map(|p| p.belief())
                .collect::<Result<Vec<_>, _>>()?;
            let e0 = mean_field_elbo(&sc.model, &local.global, &sc.phase_priors, &start, &start_phase)?;
            if let Some(t) = trace.as_mut() {
                t.push_str(&run.trace_jsonl());
            }
            let mut out = vec![Point {
                mu: sc.prior.s_hat.clone(),
                phase: Some(zeros.clone()),
                elbo: Some(e0),
            }];
            out.extend(run.rounds.into_iter().map(|r| Point {
                mu: r.mu,
                phase: Some(r.phase_mean),
                elbo: Some(r.elbo),
            }));
            out
        }
    })
}

fn run_one(case: &NetworkCase, cfg: &ExperimentConfig, run: usize) -> (Vec<MetricsRecord>, Vec<RunFailure>, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ run as u64);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut traces = String::new();
    let sc = match build_scenario(case, cfg, &mut rng) {
        Ok(sc) => sc,
        Err(e) => {
            failures.push(RunFailure {
                run,
                algo: None,
                message: e.to_string(),
            });
            return (records, failures, traces);
        }
    };
    for &algo in &cfg.algorithms {
        let mut trace = (cfg.keep_traces && algo == Algorithm::Dvi).then(String::new);
        let start = Instant::now();
        let points = match trajectory(algo, &sc, cfg, &mut trace) {
            Ok(p) => p,
            Err(e) => {
                failures.push(RunFailure {
                    run,
                    algo: Some(algo),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let wall = cfg.timing.then(|| start.elapsed().as_secs_f64() * 1e3);
        if let Some(t) = trace {
            for line in t.lines() {
                let _ = writeln!(traces, "{{\"run\":{run},\"record\":{line}}}");
            }
        }
        let prior_phase = algo.phase_aware().then(|| sc.phase_mse(&vec![0.0; sc.theta.len()])).flatten();
        for iter in 0..=cfg.max_iter {
            let (state_mse, phase_mse, elbo) = if iter == 0 && !algo.phase_aware() {
                (sc.state_mse(&sc.prior.s_hat), None, None)
            } else {
                let p = &points[if algo.phase_aware() { iter.min(points.len() - 1) } else { 0 }];
                let phase_mse = match &p.phase {
                    Some(ph) => sc.phase_mse(ph),
                    None => None,
                };
                (sc.state_mse(&p.mu), if iter == 0 { prior_phase } else { phase_mse }, p.elbo)
            };
            records.push(MetricsRecord {
                run,
                algo,
                iter,
                state_mse,
                phase_mse,
                elbo,
                wall_ms: wall,
            });
        }
    }
    (records, failures, traces)
}

/// Runs every configured algorithm on `cfg.runs` independent scenarios.
/// Run `r` is seeded with `seed ⊕ r`; output is ordered by (run, algorithm, iteration).
pub fn run_experiment(case: &NetworkCase, cfg: &ExperimentConfig) -> Result<ExperimentOutput, ConfigError> {
    cfg.validate()?;
    let results: Vec<_> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| run_one(case, cfg, r))
        .collect();
    let mut out = ExperimentOutput::default();
    for (records, failures, traces) in results {
        out.records.extend(records);
        out.failures.extend(failures);
        if !traces.is_empty() {
            out.traces.push(traces);
        }
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "run,algo,iter,state_mse,phase_mse,elbo,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{:e},{},{},{}",
            r.run,
            r.algo,
            r.iter,
            r.state_mse,
            opt(r.phase_mse),
            opt(r.elbo),
            opt(r.wall_ms)
        );
    }
    s
}

pub fn to_jsonl(records: &[MetricsRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Standard error of the mean; zero for a single value.
    pub stderr: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Some(Stat { mean, stderr })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub algo: Algorithm,
    pub iter: usize,
    pub runs: usize,
    pub state_mse: Stat,
    pub phase_mse: Option<Stat>,
    pub elbo: Option<Stat>,
}

/// Mean and standard error across runs per (algorithm, iteration).
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Algorithm, usize)> = records.iter().map(|r| (r.algo, r.iter)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(algo, iter)| {
            let rows: Vec<&MetricsRecord> = records
                .iter()
                .filter(|r| r.algo == algo && r.iter == iter)
                .collect();
            let state: Vec<f64> = rows.iter().map(|r| r.state_mse).collect();
            let phase: Vec<f64> = rows.iter().filter_map(|r| r.phase_mse).collect();
            let elbo: Vec<f64> = rows.iter().filter_map(|r| r.elbo).collect();
            SummaryRow {
                algo,
                iter,
                runs: rows.len(),
                state_mse: Stat::of(&state).expect("at least one row"),
                phase_mse: Stat::of(&phase),
                elbo: Stat::of(&elbo),
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str =
    "algo,iter,runs,state_mse_mean,state_mse_se,phase_mse_mean,phase_mse_se,elbo_mean,elbo_se";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:e},{:e},{},{},{},{}",
            r.algo,
            r.iter,
            r.runs,
            r.state_mse.mean,
            r.state_mse.stderr,
            opt(r.phase_mse.map(|p| p.mean)),
            opt(r.phase_mse.map(|p| p.stderr)),
            opt(r.elbo.map(|p| p.mean)),
            opt(r.elbo.map(|p| p.stderr)),
        );
    }
    s
}

/// Parses records back from the CSV written by [`to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    let num = |s: &str| -> Result<Option<f64>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>().map(Some).map_err(|e| format!("{s:?}: {e}"))
        }
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(format!("line {}: expected 7 fields", k + 2));
            }
            Ok(MetricsRecord {
                run: f[0].parse().map_err(|e| format!("line {}: {e}", k + 2))?,
                algo: f[1].parse().map_err(|e: ConfigError| e.to_string())?,
                iter: f[2].parse().map_err(|e| format!("line {}: {e}", k + 2))?,
                state_mse: num(f[3])?.ok_or_else(|| format!("line {}: missing state_mse", k + 2))?,
                phase_mse: num(f[4])?,
                elbo: num(f[5])?,
                wall_ms: num(f[6])?,
            })
        })
        .collect()
}
