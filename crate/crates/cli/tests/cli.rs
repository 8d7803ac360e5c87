use std::path::PathBuf;
use std::process::{Command, Output};

fn case(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../cases/{name}.json"))
}

fn hse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).expect("utf-8")
}

fn ieee14() -> String {
    case("ieee14").display().to_string()
}

#[test]
fn csv_has_one_row_per_run_algorithm_and_iteration() {
    let c = ieee14();
    let out = stdout(&hse(&["run", "--case", &c, "--runs", "2", "--iters", "4", "--algos", "wls,cvi,dvi"]));
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("run,algo,iter,state_mse,phase_mse,elbo,wall_ms"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 3 * 5);
    assert!(rows[0].starts_with("0,wls,0,"));
    // wls reports no phase estimate, cvi does
    assert!(rows.iter().filter(|r| r.contains(",wls,")).all(|r| r.split(',').nth(4) == Some("")));
    assert!(rows.iter().filter(|r| r.contains(",cvi,")).all(|r| r.split(',').nth(4) != Some("")));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let c = ieee14();
    let args = ["--case", c.as_str(), "--runs", "3", "--iters", "5", "--seed", "9"];
    let a = stdout(&hse(&args));
    let b = stdout(&hse(&args));
    assert_eq!(a, b);
    let mut other = args.to_vec();
    other[7] = "10";
    assert_ne!(a, stdout(&hse(&other)));
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let c = ieee14();
    let base = ["--case", c.as_str(), "--runs", "4", "--iters", "5", "--algos", "cvi,dvi"];
    let one = stdout(&hse(&[&base[..], &["--threads", "1"]].concat()));
    let three = stdout(&hse(&[&base[..], &["--threads", "3", "--dvi-threads", "2"]].concat()));
    assert_eq!(one, three);
}

#[test]
fn jsonl_uses_command_line_algorithm_names() {
    let c = ieee14();
    let out = stdout(&hse(&[
        "--case", &c, "--runs", "1", "--iters", "2", "--algos", "wls-oblivious,am", "--format", "jsonl",
    ]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2 * 3);
    assert!(lines[0].contains("\"algo\":\"wls-oblivious\""));
    assert!(lines[3].contains("\"algo\":\"am\""));
}

#[test]
fn zero_phase_bound_makes_cvi_equal_wls() {
    let c = ieee14();
    let out = stdout(&hse(&[
        "--case", &c, "--runs", "2", "--iters", "20", "--algos", "wls,cvi", "--theta-bound-deg", "0",
    ]));
    let last = |algo: &str, run: &str| -> f64 {
        out.lines()
            .filter(|l| l.starts_with(&format!("{run},{algo},20,")))
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .next()
            .unwrap()
    };
    for run in ["0", "1"] {
        assert!((last("wls", run) - last("cvi", run)).abs() < 1e-8);
    }
}

#[test]
fn timing_fills_wall_time() {
    let c = ieee14();
    let out = stdout(&hse(&["--case", &c, "--runs", "1", "--iters", "1", "--algos", "cvi", "--timing"]));
    assert!(out.lines().skip(1).all(|l| !l.ends_with(',')));
}

#[test]
fn files_summaries_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let trace = dir.path().join("t.jsonl");
    let summary = dir.path().join("s.csv");
    let c = ieee14();
    stdout(&hse(&[
        "run",
        "--case",
        &c,
        "--runs",
        "3",
        "--iters",
        "3",
        "--algos",
        "cvi,dvi",
        "--out",
        csv.to_str().unwrap(),
        "--trace-out",
        trace.to_str().unwrap(),
    ]));
    let traces = std::fs::read_to_string(&trace).unwrap();
    assert!(traces.lines().count() >= 3 * 14);
    assert!(traces.lines().all(|l| l.starts_with('{') && l.contains("\"bus\"")));

    stdout(&hse(&["summarize", csv.to_str().unwrap(), "--out", summary.to_str().unwrap()]));
    let s = std::fs::read_to_string(&summary).unwrap();
    let mut lines = s.lines();
    assert!(lines.next().unwrap().starts_with("algo,iter,runs,state_mse_mean"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 4);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("3")));
}

#[test]
fn place_and_color() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("placed.json");
    let listed = stdout(&hse(&["place", "--case", &ieee14(), "--out", out.to_str().unwrap()]));
    let ids = listed.trim().to_string();
    assert!(!ids.is_empty());
    let text = std::fs::read_to_string(&out).unwrap();
    let stored: Vec<String> = ids.split(',').map(str::to_string).collect();
    assert!(stored.iter().all(|id| text.contains(id.as_str())));

    let colors = stdout(&hse(&["color", "--case", &ieee14(), "--list"]));
    let lines: Vec<&str> = colors.lines().collect();
    assert_eq!(lines.len(), 15);
    assert!(lines[14].starts_with("14 buses,"));
}

#[test]
fn exit_codes_separate_config_and_case_errors() {
    let c = ieee14();
    let code = |args: &[&str]| hse(args).status.code();
    assert_eq!(code(&["--case", "/nonexistent/case.json"]), Some(3));
    assert_eq!(code(&["--case", &c, "--pmu-buses", "99"]), Some(3));
    assert_eq!(code(&["--case", &c, "--runs", "0"]), Some(2));
    assert_eq!(code(&["--case", &c, "--algos", "kalman"]), Some(2));
    assert_eq!(code(&["--case", &c, "--sigma-pmu=-1"]), Some(2));
    assert_eq!(code(&["--case", &c, "--format", "xml"]), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"buses\": []}").unwrap();
    assert_eq!(code(&["--case", bad.to_str().unwrap()]), Some(3));
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "not,a,metrics,file\n").unwrap();
    assert_eq!(code(&["summarize", csv.to_str().unwrap()]), Some(2));
}
