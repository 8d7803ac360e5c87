use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hse_core::distributed::LocalPrior;
use hse_core::experiment::{
    parse_csv, place, run_experiment, summarize, summary_csv, to_csv, to_jsonl, Algorithm, ExperimentConfig,
};
use hse_core::network::{distance2_coloring, greedy_pmu_placement};
use hse_core::{BusId, NetworkCase};

/// Hybrid SCADA/PMU state estimation under PMU sampling phase errors.
///
/// Without a subcommand the experiment flags are accepted directly, as for `hse run`.
#[derive(Debug, Parser)]
#[command(name = "hse", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: Option<RunArgs>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte-Carlo experiment: one metrics row per (run, algorithm, iteration).
    Run(RunArgs),
    /// Mean and standard error per (algorithm, iteration) of a metrics CSV.
    Summarize(SummarizeArgs),
    /// Greedy PMU placement achieving topological observability.
    Place(PlaceArgs),
    /// Distance-2 coloring used to schedule the distributed estimator.
    Color(ColorArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 1000 runs.
    Full,
    /// 100 runs.
    Desk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DviPrior {
    /// Each bus conditions on its neighbors' current means under the full prior.
    Conditional,
    /// Each bus keeps only its own marginal prior block.
    Marginal,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Network case (JSON).
    #[arg(long)]
    case: PathBuf,
    /// Comma-separated PMU bus ids; defaults to the placement stored in the case.
    #[arg(long, value_delimiter = ',')]
    pmu_buses: Vec<u32>,
    /// Comma-separated subset of wls, wls-oblivious, cvi, am, dvi.
    #[arg(long, value_delimiter = ',', default_value = "wls,wls-oblivious,cvi,am,dvi")]
    algos: Vec<String>,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    /// Monte-Carlo runs; overrides the preset.
    #[arg(long)]
    runs: Option<usize>,
    /// Iteration budget of the iterative estimators.
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    sigma_pmu: f64,
    #[arg(long, default_value_t = 1e-2)]
    sigma_scada: f64,
    #[arg(long, default_value_t = 6.0)]
    theta_bound_deg: f64,
    /// Relative perturbation of the case's operating point per run.
    #[arg(long, default_value_t = 0.1)]
    perturb: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Convergence threshold on the largest mean change.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Output file; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Fill wall_ms. Timings make the output differ between repeated runs.
    #[arg(long)]
    timing: bool,
    /// Write the distributed estimator's per-bus trace (JSON lines) here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Worker threads across runs; 0 lets the runtime decide.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Worker threads inside one distributed run.
    #[arg(long, default_value_t = 1)]
    dvi_threads: usize,
    #[arg(long, value_enum, default_value = "conditional")]
    dvi_prior: DviPrior,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    /// Metrics CSV written by `hse run`.
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlaceArgs {
    #[arg(long)]
    case: PathBuf,
    /// Write the case with the placement stored in it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ColorArgs {
    #[arg(long)]
    case: PathBuf,
    /// Print one `bus,color` line per bus.
    #[arg(long)]
    list: bool,
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Config(String),
    Case(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Case(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Case(m) => write!(f, "case error: {m}"),
            Failure::Io(m) => write!(f, "{m}"),
        }
    }
}

fn load_case(path: &Path) -> Result<NetworkCase, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Case(format!("{}: {e}", path.display())))?;
    NetworkCase::from_json(&text).map_err(|e| Failure::Case(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn config(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let base = match args.preset {
        Preset::Full => ExperimentConfig::default(),
        Preset::Desk => ExperimentConfig::desk(),
    };
    let algorithms = args
        .algos
        .iter()
        .map(|a| a.trim().parse::<Algorithm>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Config(e.to_string()))?;
    let cfg = ExperimentConfig {
        pmu_buses: args.pmu_buses.iter().map(|&b| BusId(b)).collect(),
        algorithms,
        runs: args.runs.unwrap_or(base.runs),
        max_iter: args.iters,
        sigma_pmu: args.sigma_pmu,
        sigma_scada: args.sigma_scada,
        theta_bound_deg: args.theta_bound_deg,
        perturb_fraction: args.perturb,
        seed: args.seed,
        dvi_threads: args.dvi_threads,
        dvi_prior: match args.dvi_prior {
            DviPrior::Conditional => LocalPrior::Conditional,
            DviPrior::Marginal => LocalPrior::Marginal,
        },
        tol: args.tol,
        timing: args.timing,
        keep_traces: args.trace_out.is_some(),
    };
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = config(&args)?;
    let case = load_case(&args.case)?;
    let case = place(&case, &cfg).map_err(|e| Failure::Case(e.to_string()))?;
    if case.pmu_buses().is_empty() {
        eprintln!("warning: no PMU buses; every estimator returns the SCADA prior");
    }
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| Failure::Config(e.to_string()))?;
    let out = pool
        .install(|| run_experiment(&case, &cfg))
        .map_err(|e| Failure::Config(e.to_string()))?;
    for f in &out.failures {
        let algo = f.algo.map(|a| a.name()).unwrap_or("scenario");
        eprintln!("run {} {algo} failed: {}", f.run, f.message);
    }
    let text = match args.format {
        Format::Csv => to_csv(&out.records),
        Format::Jsonl => to_jsonl(&out.records),
    };
    emit(args.out.as_deref(), &text)?;
    if let Some(path) = &args.trace_out {
        fs::write(path, out.traces.concat()).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    }
    if args.timing {
        eprintln!(
            "{} runs × {} algorithms in {:.2} s",
            cfg.runs,
            cfg.algorithms.len(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn summarize_cmd(args: SummarizeArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.input).map_err(|e| Failure::Io(format!("{}: {e}", args.input.display())))?;
    let records = parse_csv(&text).map_err(|e| Failure::Config(format!("{}: {e}", args.input.display())))?;
    if records.is_empty() {
        return Err(Failure::Config(format!("{}: no records", args.input.display())));
    }
    emit(args.out.as_deref(), &summary_csv(&summarize(&records)))
}

fn place_cmd(args: PlaceArgs) -> Result<(), Failure> {
    let case = load_case(&args.case)?;
    let placement = greedy_pmu_placement(&case);
    let ids: Vec<String> = placement.iter().map(|b| b.0.to_string()).collect();
    println!("{}", ids.join(","));
    if let Some(out) = &args.out {
        let placed = case
            .with_pmu_buses(placement)
            .map_err(|e| Failure::Case(e.to_string()))?;
        fs::write(out, placed.to_json()).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
    }
    Ok(())
}

fn color_cmd(args: ColorArgs) -> Result<(), Failure> {
    let case = load_case(&args.case)?;
    let coloring = distance2_coloring(&case);
    coloring
        .validate(&case)
        .map_err(|e| Failure::Case(format!("invalid coloring: {e}")))?;
    let mut text = String::new();
    if args.list {
        for i in 0..case.num_buses() {
            let _ = writeln!(text, "{},{}", case.bus(i).id.0, coloring.color(i));
        }
    }
    let _ = writeln!(text, "{} buses, {} colors", case.num_buses(), coloring.num_colors());
    emit(None, &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match (cli.command, cli.run) {
        (Some(Command::Run(a)), _) | (None, Some(a)) => run(a),
        (Some(Command::Summarize(a)), _) => summarize_cmd(a),
        (Some(Command::Place(a)), _) => place_cmd(a),
        (Some(Command::Color(a)), _) => color_cmd(a),
        (None, None) => Err(Failure::Config("no command given; see --help".into())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hse: {f}");
            ExitCode::from(f.code())
        }
    }
}
