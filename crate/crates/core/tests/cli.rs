use std::fs;
use std::path::Path;

use tadf::cli::{main_with, read_csv, ScenarioConfig, CSV_COLUMNS, EXIT_ASSERTION, EXIT_CONFIG, EXIT_OK};
use tadf::depsys::DepGraph;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn tadf(args: &[&str], env: &[(&str, &str)]) -> Out {
    let env: Vec<(String, String)> = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(std::iter::once("tadf").chain(args.iter().copied()), &env, &mut out, &mut err);
    Out {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = "grid = 6\niterations = 4\nwarmup = 1\nrepetitions = 2\nworkers = 4\ntasks = 4\n";

#[test]
fn run_writes_csv_that_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", SMALL);
    let csv = dir.path().join("m.csv");
    let o = tadf(&["run", "-c", &cfg, "--csv", csv.to_str().unwrap()], &[]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert!(o.stderr.contains("median"));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let rows = read_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 2 * 4);
    assert!(rows.iter().all(|r| r.tasks == 4 && r.workers == 4 && r.iter_time > 0.0));
    assert_eq!(rows.iter().filter(|r| r.warmup).count(), 4 + 1);
}

#[test]
fn csv_goes_to_stdout_and_quiet_silences_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", SMALL);
    let o = tadf(&["run", "-c", &cfg, "--quiet"], &[]);
    assert_eq!(o.code, EXIT_OK);
    assert!(o.stderr.is_empty());
    assert_eq!(read_csv(o.stdout.as_bytes()).unwrap().len(), 8);
}

#[test]
fn flags_beat_env_beat_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", &format!("{SMALL}seed = 1\nworkers = 2\n"));
    let o = tadf(&["run", "-c", &cfg, "-q", "--seed", "3"], &[("TADF_SEED", "2"), ("TADF_WORKERS", "3")]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let rows = read_csv(o.stdout.as_bytes()).unwrap();
    assert!(rows.iter().all(|r| r.seed == 3 && r.workers == 3));

    let mut c = ScenarioConfig::default();
    c.apply_file("f", "seed = 1\n").unwrap();
    c.apply_env([("TADF_SEED".to_string(), "2".to_string())]).unwrap();
    assert_eq!(c.seed, 2);
    c.apply_flags([("seed", "3")]).unwrap();
    assert_eq!(c.seed, 3);
}

#[test]
fn sweep_runs_every_point_and_run_refuses_lists() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", &format!("{SMALL}repetitions = 1\ntasks = 2,4\nbackend = host,device-ta\n"));
    let o = tadf(&["run", "-c", &cfg], &[]);
    assert_eq!(o.code, EXIT_CONFIG);
    let o = tadf(&["sweep", "-c", &cfg, "-q"], &[]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let rows = read_csv(o.stdout.as_bytes()).unwrap();
    let mut points: Vec<(usize, String)> = rows.iter().map(|r| (r.tasks, r.backend.clone())).collect();
    points.dedup();
    assert_eq!(points.len(), 4);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = write(dir.path(), "a.cfg", "colour = blue\n");
    let bad_value = write(dir.path(), "b.cfg", "workers = many\n");
    let bad_combo = write(dir.path(), "c.cfg", "backend = device-ta\nsubstrate = multi-rt-unified\n");
    for f in [&bad_key, &bad_value, &bad_combo] {
        let o = tadf(&["run", "-c", f], &[]);
        assert_eq!(o.code, EXIT_CONFIG, "{f}");
        assert!(o.stderr.starts_with("tadf: "), "{}", o.stderr);
    }
    assert_eq!(tadf(&["run", "-c", "/nonexistent/x.cfg"], &[]).code, EXIT_CONFIG);
    assert_eq!(tadf(&["frobnicate"], &[]).code, EXIT_CONFIG);
    assert_eq!(tadf(&["run", "--workers", "0"], &[]).code, EXIT_CONFIG);
    assert_eq!(tadf(&["run"], &[("TADF_WORKERS", "x")]).code, EXIT_CONFIG);
    assert_eq!(tadf(&["--help"], &[]).code, EXIT_OK);
}

#[test]
fn assertion_failures_exit_two() {
    use tadf::error::Error;
    assert_eq!(tadf::cli::exit_code(&Error::Deadlock("x".into())), EXIT_ASSERTION);
    assert_eq!(tadf::cli::exit_code(&Error::Contract("x".into())), EXIT_ASSERTION);
}

#[test]
fn run_log_round_trips_through_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", "workload = code4\ntasks = 2\nbackend = device-blocking\nworkers = 2\nrepetitions = 1\n");
    let log = dir.path().join("run.log");
    let dev = dir.path().join("dev.log");
    let o = tadf(
        &["run", "-c", &cfg, "-q", "--runlog", log.to_str().unwrap(), "--device-log", dev.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert!(fs::read_to_string(&log).unwrap().starts_with("# run "));
    assert!(!fs::read_to_string(&dev).unwrap().is_empty());

    let o = tadf(&["trace", log.to_str().unwrap(), "--workers", "2"], &[]);
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    assert!(o.stdout.contains("blocked"));

    let broken = write(dir.path(), "broken.log", "this is not a log line\n");
    let o = tadf(&["trace", &broken], &[]);
    assert_eq!(o.code, EXIT_CONFIG);
    assert!(o.stderr.contains("line 1"), "{}", o.stderr);
}

fn dot_counts(dot: &str) -> (usize, usize) {
    let nodes = dot.lines().filter(|l| l.contains("[label=")).count();
    let edges = dot.lines().filter(|l| l.contains("->")).count();
    (nodes, edges)
}

#[test]
fn dag_export_for_code4() {
    for (n, want) in [("1", (4, 3)), ("2", (8, 6))] {
        let o = tadf(&["dag", "--workload", "code4", "--tasks", n, "--backend", "device-ta"], &[]);
        assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
        assert!(o.stdout.starts_with("digraph"));
        assert_eq!(dot_counts(&o.stdout), want, "N={n}\n{}", o.stdout);
    }
}

#[test]
fn dag_export_to_file_and_empty_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.dot");
    let o = tadf(
        &["dag", "--grid", "4", "--iterations", "3", "--tasks", "2", "--iteration", "1", "-o", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.code, EXIT_OK, "{}", o.stderr);
    let (nodes, edges) = dot_counts(&fs::read_to_string(&out).unwrap());
    assert!(nodes > 0 && edges > 0);

    let o = tadf(&["dag", "--grid", "4", "--iterations", "3", "--iteration", "99"], &[]);
    assert_eq!(o.code, EXIT_OK);
    assert_eq!(o.stdout, "digraph tasks {\n}\n");
    assert_eq!(DepGraph::new().to_dot(), "digraph tasks {\n}\n");
}
