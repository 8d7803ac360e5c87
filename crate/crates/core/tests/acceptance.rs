//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::Instant;

use hse_core::centralized::{am_estimate, cvi_run, wls_estimate, IterOptions, PriorPrecision, StackedModel};
use hse_core::distributed::{compute_message, run_algorithm1, DviOptions, StateBelief};
use hse_core::experiment::{
    build_scenario, run_experiment, summarize, to_csv, to_jsonl, Algorithm, ExperimentConfig, Scenario,
};
use hse_core::measurement::{exact_pmu, exact_pmu_at};
use hse_core::network::{build_measurement_model, distance2_coloring, greedy_pmu_placement, Branch, Bus};
use hse_core::oracle::{grid_mmse, mc_loglik_quadratic, quad_moment, Functional, QuadTarget};
use hse_core::{BusId, NetworkCase, PhasePrior, RectPrior, TrueState, TruncatedGaussian};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const DEG6: f64 = 6.0 * std::f64::consts::PI / 180.0;

type Outcome = Result<String, String>;

fn load(name: &str) -> NetworkCase {
    let path = format!("{}/../../cases/{name}.json", env!("CARGO_MANIFEST_DIR"));
    let case = NetworkCase::from_json(&std::fs::read_to_string(&path).expect("case file")).expect("case parses");
    if case.pmu_buses().is_empty() {
        let placement = greedy_pmu_placement(&case);
        case.with_pmu_buses(placement).expect("placement is valid")
    } else {
        case
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scenario(case: &NetworkCase, cfg: &ExperimentConfig, run: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ run as u64);
    build_scenario(case, cfg, &mut rng).expect("scenario builds")
}

fn truncated_moments() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b): (f64, f64) = loop {
            let a: f64 = rng.random_range(-0.2..0.2);
            let b: f64 = rng.random_range(-0.2..0.2);
            if a != b {
                break (a.min(b), a.max(b));
            }
        };
        let v = rng.random_range(-0.4..0.4);
        let c = 10f64.powf(rng.random_range(-7.0..0.0));
        let d = TruncatedGaussian::new(a, b, v, c).map_err(|e| e.to_string())?;
        let m = d.moments().map_err(|e| e.to_string())?;
        worst = worst
            .max((m.mean - quad_moment(Functional::Theta, &d)).abs())
            .max((m.second - quad_moment(Functional::ThetaSquared, &d)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-9 && secs < 5.0, format!("max |err| {worst:.2e}, {secs:.2} s"))
}

fn zero_phase_reduction() -> Outcome {
    let case = load("ieee14");
    let cfg = ExperimentConfig {
        theta_bound_deg: 0.0,
        seed: 2,
        ..ExperimentConfig::default()
    };
    let sc = scenario(&case, &cfg, 0);
    let prior = PriorPrecision::new(&sc.prior).map_err(|e| e.to_string())?;
    let zeros = vec![0.0; sc.model.num_pmus()];
    let opts = IterOptions {
        max_iter: 100,
        tol: 1e-13,
    };
    let wls = wls_estimate(&sc.model, &prior, Some(&zeros)).map_err(|e| e.to_string())?.mu;
    let cvi = cvi_run(&sc.model, &prior, &sc.phase_priors, opts).map_err(|e| e.to_string())?;
    let am = am_estimate(&sc.model, &prior, &sc.phase_priors, opts).map_err(|e| e.to_string())?;
    let dopts = DviOptions {
        max_rounds: 20_000,
        tol: 1e-13,
        ..DviOptions::default()
    };
    let dvi = run_algorithm1(&sc.model, &sc.prior, &sc.phase_priors, &sc.coloring, dopts).map_err(|e| e.to_string())?;
    let all = [("wls", wls), ("cvi", cvi.posterior.mu().clone()), ("am", am.s_hat().clone()), ("dvi", dvi.mu())];
    let mut worst = 0.0f64;
    for (i, (_, a)) in all.iter().enumerate() {
        for (_, b) in &all[i + 1..] {
            worst = worst.max((a - b).amax());
        }
    }
    check(worst < 1e-6, format!("max pairwise ‖Δμ‖∞ {worst:.2e} (dvi sweeps {})", dvi.sweeps))
}

fn two_bus(pmus: &[u32], rng: &mut ChaCha8Rng) -> NetworkCase {
    let buses = (1..=2)
        .map(|id| Bus {
            id: BusId(id),
            vm: rng.random_range(0.95..1.05),
            va: if id == 1 { 0.0 } else { rng.random_range(-0.2..0.2) },
            shunt_b: 0.01,
        })
        .collect();
    let branches = vec![Branch {
        from: BusId(1),
        to: BusId(2),
        g: rng.random_range(0.5..2.0),
        b: rng.random_range(-6.0..-2.0),
        tap: 1.0,
        shift: 0.0,
    }];
    NetworkCase::new(buses, branches, pmus.iter().map(|&i| BusId(i))).expect("two-bus case")
}

fn linearization_order() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let case = two_bus(&[1], &mut rng);
    let state = TrueState::from_case(&case);
    let m = build_measurement_model(&case, BusId(1)).map_err(|e| e.to_string())?;
    let resid = |th: f64| (exact_pmu_at(&case, &state, 0, th) - m.predict(th, |j| state.rect(j))).norm();
    let ratios: Vec<f64> = [1e-3, 1e-2].iter().map(|&th| resid(2.0 * th) / resid(th)).collect();
    check(
        ratios.iter().all(|r| (3.5..=4.5).contains(r)),
        format!("ratios {:.4} (θ=1e-3), {:.4} (θ=1e-2)", ratios[0], ratios[1]),
    )
}

fn elbo_monotonicity() -> Outcome {
    let case = load("ieee14");
    let cfg = ExperimentConfig {
        seed: 4,
        ..ExperimentConfig::default()
    };
    let results: Vec<Result<(f64, f64), String>> = (0..50)
        .into_par_iter()
        .map(|run| {
            let sc = scenario(&case, &cfg, run);
            let prior = PriorPrecision::new(&sc.prior).map_err(|e| e.to_string())?;
            let opts = IterOptions {
                max_iter: 50,
                tol: 1e-10,
            };
            let cvi = cvi_run(&sc.model, &prior, &sc.phase_priors, opts).map_err(|e| e.to_string())?;
            let mut seq = vec![cvi.trace[0].elbo];
            for t in &cvi.trace[1..] {
                seq.push(t.elbo_after_theta);
                seq.push(t.elbo);
            }
            let dvi = run_algorithm1(&sc.model, &sc.prior, &sc.phase_priors, &sc.coloring, DviOptions::default())
                .map_err(|e| e.to_string())?;
            let dseq: Vec<f64> = dvi.steps[1..].iter().map(|s| s.elbo).collect();
            let drop = |v: &[f64]| v.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
            Ok((drop(&seq), drop(&dseq)))
        })
        .collect();
    let (mut cvi, mut dvi) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for r in results {
        let (a, b) = r?;
        cvi = cvi.max(a);
        dvi = dvi.max(b);
    }
    check(
        cvi <= 1e-10 && dvi <= 1e-10,
        format!("largest ELBO decrease: cvi {cvi:.2e}, dvi {dvi:.2e}"),
    )
}

fn final_mean(rows: &[hse_core::experiment::SummaryRow], algo: Algorithm, phase: bool) -> f64 {
    let last = rows.iter().filter(|r| r.algo == algo).max_by_key(|r| r.iter).expect("algorithm ran");
    if phase {
        last.phase_mse.expect("phase-aware algorithm").mean
    } else {
        last.state_mse.mean
    }
}

/// Criteria 5 and 6 share one IEEE-118 experiment.
fn ieee118_experiment() -> (Outcome, Outcome) {
    let case = load("ieee118");
    let cfg = ExperimentConfig {
        algorithms: vec![Algorithm::Wls, Algorithm::WlsOblivious, Algorithm::Cvi, Algorithm::Dvi],
        runs: 100,
        max_iter: 200,
        seed: 5,
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
    let out = match pool.install(|| run_experiment(&case, &cfg)) {
        Ok(out) => out,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let secs = start.elapsed().as_secs_f64();
    if !out.failures.is_empty() {
        let msg = format!("{} failed runs, first: {:?}", out.failures.len(), out.failures[0]);
        return (Err(msg.clone()), Err(msg));
    }
    let rows = summarize(&out.records);
    let (wls, obl, cvi) = (
        final_mean(&rows, Algorithm::Wls, false),
        final_mean(&rows, Algorithm::WlsOblivious, false),
        final_mean(&rows, Algorithm::Cvi, false),
    );
    let c5 = check(
        cvi < obl && cvi <= 1.5 * wls && secs < 600.0,
        format!(
            "state_mse cvi {cvi:.3e}, wls-oblivious {obl:.3e}, θ-known wls {wls:.3e} (ratio {:.3}), {secs:.0} s",
            cvi / wls
        ),
    );
    let bound = cfg.theta_bound();
    let limit = bound * bound / 3.0 / 2.0;
    let (pc, pd) = (final_mean(&rows, Algorithm::Cvi, true), final_mean(&rows, Algorithm::Dvi, true));
    let c6 = check(
        pc <= limit && pd <= limit,
        format!("phase_mse cvi {pc:.3e}, dvi {pd:.3e}, limit {limit:.3e}"),
    );
    (c5, c6)
}

fn centralized_distributed_agreement() -> Outcome {
    let case = load("ieee14");
    let cfg = ExperimentConfig {
        seed: 7,
        ..ExperimentConfig::default()
    };
    let results: Vec<Result<(f64, f64, bool), String>> = (0..100)
        .into_par_iter()
        .map(|run| {
            let sc = scenario(&case, &cfg, run);
            let prior = PriorPrecision::new(&sc.prior).map_err(|e| e.to_string())?;
            let opts = IterOptions {
                max_iter: 500,
                tol: 1e-10,
            };
            let cvi = cvi_run(&sc.model, &prior, &sc.phase_priors, opts).map_err(|e| e.to_string())?;
            let dopts = DviOptions {
                max_rounds: 20_000,
                tol: 1e-10,
                ..DviOptions::default()
            };
            let dvi = run_algorithm1(&sc.model, &sc.prior, &sc.phase_priors, &sc.coloring, dopts)
                .map_err(|e| e.to_string())?;
            Ok((sc.state_mse(cvi.posterior.mu()), sc.state_mse(&dvi.mu()), dvi.converged))
        })
        .collect();
    let (mut c, mut d, mut converged) = (0.0, 0.0, 0);
    for r in &results {
        let (a, b, ok) = r.clone()?;
        c += a / 100.0;
        d += b / 100.0;
        converged += ok as usize;
    }
    check(
        d <= 1.2 * c,
        format!("state_mse dvi {d:.4e}, cvi {c:.4e} (ratio {:.4}); dvi converged in {converged}/100", d / c),
    )
}

fn coloring_ieee300() -> Outcome {
    let case = load("ieee300");
    let coloring = distance2_coloring(&case);
    let valid = coloring.validate(&case).is_ok();
    // exhaustive pairwise check, independent of `validate`
    let mut conflicts = 0;
    for i in 0..case.num_buses() {
        let near: std::collections::BTreeSet<usize> = case
            .closed_neighborhood(i)
            .into_iter()
            .flat_map(|j| case.closed_neighborhood(j))
            .collect();
        conflicts += near.iter().filter(|&&k| k != i && coloring.color(k) == coloring.color(i)).count();
    }
    check(
        coloring.num_colors() <= 16 && valid && conflicts == 0,
        format!("{} colors, {conflicts} two-hop conflicts", coloring.num_colors()),
    )
}

fn random_spd(rng: &mut ChaCha8Rng, scale: f64) -> Matrix2<f64> {
    let a = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
    (a * a.transpose() + Matrix2::identity() * 0.2) * scale
}

fn message_oracle() -> Outcome {
    let results: Vec<Result<(f64, usize), String>> = (0..20u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + k);
            let n = 2 + (k % 2) as usize;
            let case = chain(n, &mut rng);
            let state = TrueState::from_case(&case);
            let pmu = case.pmu_indices()[0];
            let theta: BTreeMap<BusId, f64> = [(case.bus(pmu).id, rng.random_range(-DEG6..DEG6))].into();
            let sig = [(case.bus(pmu).id, 0.01)].into();
            let readings = exact_pmu(&case, &state, &theta, &sig, &mut rng).map_err(|e| e.to_string())?;
            let model = StackedModel::new(&case, &readings).map_err(|e| e.to_string())?;
            let beliefs: Vec<StateBelief> = (0..n)
                .map(|i| StateBelief {
                    mu: state.rect(i) + Vector2::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)),
                    p: random_spd(&mut rng, 1e-4),
                    round: 0,
                })
                .collect();
            let c = 10f64.powf(rng.random_range(-5.0..-3.0));
            let phase = PhasePrior::truncated(-DEG6, DEG6, rng.random_range(-DEG6..DEG6), c)
                .and_then(|p| p.belief())
                .map_err(|e| e.to_string())?;
            let l = model.local(0);
            let mut worst = 0.0f64;
            let mut checked = 0;
            for &i in &l.cols {
                let fit = mc_loglik_quadratic(l, QuadTarget::State(i), &beliefs, &phase, 1_000_000, &mut rng)
                    .map_err(|e| e.to_string())?;
                let msg = compute_message(&model, 0, i, &phase, &beliefs, 0).map_err(|e| e.to_string())?;
                let want = [
                    msg.info[0],
                    msg.info[1],
                    msg.precision[(0, 0)],
                    msg.precision[(0, 1)],
                    msg.precision[(1, 1)],
                ];
                // roundoff floor relative to the largest coefficient
                let floor = 1e-9 * want.iter().fold(0.0f64, |m, w| m.max(w.abs()));
                for (q, w) in want.iter().enumerate() {
                    let (got, se) = (fit.coef[q + 1], fit.stderr[q + 1]);
                    worst = worst.max((got - w).abs() / (se + floor));
                    checked += 1;
                }
            }
            Ok((worst, checked))
        })
        .collect();
    let (mut worst, mut checked) = (0.0f64, 0);
    for r in results {
        let (w, c) = r?;
        worst = worst.max(w);
        checked += c;
    }
    check(worst <= 4.0, format!("{checked} coefficients, worst deviation {worst:.2} SE"))
}

/// A chain of `n` buses with a PMU on a random bus.
fn chain(n: usize, rng: &mut ChaCha8Rng) -> NetworkCase {
    let buses = (1..=n as u32)
        .map(|id| Bus {
            id: BusId(id),
            vm: rng.random_range(0.95..1.05),
            va: rng.random_range(-0.2..0.2),
            shunt_b: 0.01,
        })
        .collect();
    let branches = (1..n as u32)
        .map(|id| Branch {
            from: BusId(id),
            to: BusId(id + 1),
            g: rng.random_range(0.5..2.0),
            b: rng.random_range(-6.0..-2.0),
            tap: 1.0,
            shift: 0.0,
        })
        .collect();
    let pmu = BusId(rng.random_range(1..=n as u32));
    NetworkCase::new(buses, branches, [pmu]).expect("chain case")
}

fn small_case_mmse() -> Outcome {
    let wins: Vec<Result<bool, String>> = (0..100u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let case = two_bus(&[1], &mut rng);
            let state = TrueState::from_case(&case);
            let theta: BTreeMap<BusId, f64> = [(BusId(1), rng.random_range(-DEG6..DEG6))].into();
            let sig = [(BusId(1), 0.01)].into();
            let readings = exact_pmu(&case, &state, &theta, &sig, &mut rng).map_err(|e| e.to_string())?;
            let model = StackedModel::new(&case, &readings).map_err(|e| e.to_string())?;
            // prior mean drawn from the prior around the truth
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let gamma = (&a * a.transpose()) * 1e-4 + DMatrix::identity(4, 4) * 1e-4;
            let chol = gamma.clone().cholesky().ok_or("prior covariance")?;
            let e = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let prior = RectPrior::new(state.rect_vector() + chol.l() * e, gamma);
            let priors = vec![PhasePrior::uniform(DEG6).map_err(|e| e.to_string())?];
            let pp = PriorPrecision::new(&prior).map_err(|e| e.to_string())?;
            let opts = IterOptions {
                max_iter: 200,
                tol: 1e-12,
            };
            let cvi = cvi_run(&model, &pp, &priors, opts).map_err(|e| e.to_string())?;
            let obl = wls_estimate(&model, &pp, None).map_err(|e| e.to_string())?;
            let grid = grid_mmse(&model, &prior, &priors, 801).map_err(|e| e.to_string())?;
            Ok((cvi.posterior.mu() - &grid.mean).norm() < (&obl.mu - &grid.mean).norm())
        })
        .collect();
    let mut count = 0;
    for w in wins {
        count += w? as usize;
    }
    check(count >= 90, format!("cvi closer to grid MMSE in {count}/100 trials"))
}

fn determinism() -> Outcome {
    let case = load("ieee14");
    let cfg = ExperimentConfig {
        runs: 6,
        max_iter: 30,
        seed: 11,
        keep_traces: true,
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&case, &cfg).map_err(|e| e.to_string())?;
    let b = run_experiment(&case, &cfg).map_err(|e| e.to_string())?;
    let same_csv = to_csv(&a.records) == to_csv(&b.records);
    let same_jsonl = to_jsonl(&a.records) == to_jsonl(&b.records);
    let same_traces = a.traces == b.traces;

    let sc = scenario(&case, &cfg, 0);
    let trace = |threads: usize| {
        let opts = DviOptions {
            threads,
            ..DviOptions::default()
        };
        run_algorithm1(&sc.model, &sc.prior, &sc.phase_priors, &sc.coloring, opts).map(|r| r.trace_jsonl())
    };
    let one = trace(1).map_err(|e| e.to_string())?;
    let invariant = [2, 4, 8].iter().all(|&t| trace(t).as_ref() == Ok(&one));
    check(
        same_csv && same_jsonl && same_traces && invariant,
        format!("csv {same_csv}, jsonl {same_jsonl}, traces {same_traces}, thread-invariant trace {invariant}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag} {name}: {detail}");
    };
    report(1, "truncated-moment fidelity", truncated_moments());
    report(2, "zero-phase reduction to WLS", zero_phase_reduction());
    report(3, "linearization order", linearization_order());
    report(4, "ELBO monotonicity", elbo_monotonicity());
    let (c5, c6) = ieee118_experiment();
    report(5, "degradation when ignoring phase error", c5);
    report(6, "phase-error recovery", c6);
    report(7, "centralized/distributed agreement", centralized_distributed_agreement());
    report(8, "IEEE-300 distance-2 coloring", coloring_ieee300());
    report(9, "message formulas vs Monte Carlo", message_oracle());
    report(10, "small-case MMSE sanity", small_case_mmse());
    report(11, "determinism", determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
