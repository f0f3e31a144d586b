//! Command-line harness: `run`, `sweep`, `trace` and `dag`.
//!
//! Exit codes: 0 on success, 1 for configuration or input errors, 2 when
//! a run fails an assertion (scheduling audit, reference check, contract
//! violation or deadlock).

pub mod config;
pub mod scenario;
pub mod trace;

use std::fmt::Write as _;
use std::io::Write;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::error::{Error, Result};
pub use config::{ScenarioConfig, VariantKind, Workload, ENV_PREFIX, KEYS};
pub use scenario::{export_dag, read_csv, run_scenario, write_csv, MetricsRow, Point, CSV_COLUMNS};
pub use trace::{summarize, summarize_text, TraceSummary, WorkerTotals};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_ASSERTION: i32 = 2;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Assertion(_) | Error::Contract(_) | Error::Deadlock(_) => EXIT_ASSERTION,
        _ => EXIT_CONFIG,
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn scenario_args(cmd: Command) -> Command {
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .help("scenario file with key = value lines"),
    );
    for (key, help) in KEYS {
        cmd = cmd.arg(Arg::new(*key).long(flag_name(key)).value_name("VALUE").help(*help));
    }
    cmd
}

fn command() -> Command {
    let outputs = |c: Command| {
        c.arg(Arg::new("csv").long("csv").value_name("FILE").help("write CSV here instead of stdout"))
            .arg(Arg::new("runlog").long("runlog").value_name("FILE").help("write the run logs"))
            .arg(Arg::new("device-log").long("device-log").value_name("FILE").help("write the device completion logs"))
    };
    Command::new("tadf")
        .about("Task-aware device offload simulator and benchmark harness")
        .subcommand_required(true)
        .subcommand(outputs(scenario_args(Command::new("run").about("run one scenario point"))))
        .subcommand(outputs(scenario_args(Command::new("sweep").about("run every point of the sweep lists"))))
        .subcommand(
            Command::new("trace")
                .about("summarize a run log per worker")
                .arg(Arg::new("log").required(true).value_name("RUNLOG"))
                .arg(Arg::new("workers").long("workers").value_name("N").help("number of worker rows")),
        )
        .subcommand(
            scenario_args(Command::new("dag").about("export the task graph of one iteration as DOT"))
                .arg(Arg::new("iteration").long("iteration").value_name("K").default_value("0"))
                .arg(Arg::new("out").long("out").short('o').value_name("FILE")),
        )
        .arg(Arg::new("quiet").long("quiet").short('q').action(ArgAction::SetTrue).global(true))
}

fn load_config(m: &ArgMatches, env: &[(String, String)]) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.clone(), e.to_string()))?;
        cfg.apply_file(path, &text)?;
    }
    cfg.apply_env(env.iter().cloned())?;
    let flags: Vec<(&str, &str)> = KEYS
        .iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (*k, v.as_str())))
        .collect();
    cfg.apply_flags(flags)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &str, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{path}: {e}")))
}

fn run_cmd(m: &ArgMatches, env: &[(String, String)], sweep: bool, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = load_config(m, env)?;
    if !sweep && cfg.points().len() != 1 {
        return Err(Error::config(
            "config",
            "run takes a single tasks/backend/substrate value; use sweep for lists",
        ));
    }
    let mut runlog = String::new();
    let mut devlog = String::new();
    let want_log = m.get_one::<String>("runlog").is_some();
    let want_dev = m.get_one::<String>("device-log").is_some();
    let rows = run_scenario(&cfg, |p, rep, report| {
        let head = format!("# run {} repetition {rep}\n", scenario::scenario_id(&cfg, p));
        if want_log {
            runlog.push_str(&head);
            runlog.push_str(&report.log.to_text());
        }
        if want_dev {
            devlog.push_str(&head);
            devlog.push_str(&crate::simdev::format_completion_log(&report.completion_log));
        }
        Ok(())
    })?;
    if let Some(path) = m.get_one::<String>("runlog") {
        write_file(path, &runlog)?;
    }
    if let Some(path) = m.get_one::<String>("device-log") {
        write_file(path, &devlog)?;
    }
    match m.get_one::<String>("csv") {
        Some(path) => write_file(path, &scenario::csv_string(&rows)?)?,
        None => write_csv(&rows, &mut *out)?,
    }
    if !m.get_flag("quiet") {
        let mut s = String::new();
        for p in scenario::summarize_points(&rows) {
            let _ = writeln!(
                s,
                "{}: median {:.3} min {:.3} max {:.3} over {} iterations",
                p.scenario, p.median, p.min, p.max, p.samples
            );
        }
        let _ = err.write_all(s.as_bytes());
    }
    Ok(())
}

fn dispatch(m: &ArgMatches, env: &[(String, String)], out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match m.subcommand() {
        Some(("run", sub)) => run_cmd(sub, env, false, out, err),
        Some(("sweep", sub)) => run_cmd(sub, env, true, out, err),
        Some(("trace", sub)) => {
            let path = sub.get_one::<String>("log").expect("required");
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{path}: {e}")))?;
            let log = crate::taskrt::RunLog::parse(&text)?;
            let workers = match sub.get_one::<String>("workers") {
                Some(w) => Some(w.parse().map_err(|_| Error::config("flag --workers", format!("`{w}` is not a count")))?),
                None => None,
            };
            let s = summarize(&log, workers, crate::time::VTime::ZERO, log.end_time());
            out.write_all(s.to_text().as_bytes()).map_err(|e| Error::Io(e.to_string()))
        }
        Some(("dag", sub)) => {
            let cfg = load_config(sub, env)?;
            let k = sub.get_one::<String>("iteration").expect("default");
            let k: u32 = k.parse().map_err(|_| Error::config("flag --iteration", format!("`{k}` is not an iteration")))?;
            let dot = export_dag(&cfg, k)?;
            match sub.get_one::<String>("out") {
                Some(path) => write_file(path, &dot),
                None => out.write_all(dot.as_bytes()).map_err(|e| Error::Io(e.to_string())),
            }
        }
        _ => unreachable!("subcommand required"),
    }
}

/// Entry point with explicit arguments, environment and streams.
pub fn main_with<I, S>(args: I, env: &[(String, String)], out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
            } else {
                let _ = write!(out, "{}", e.render());
            }
            return code;
        }
    };
    match dispatch(&m, env, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "tadf: {e}");
            exit_code(&e)
        }
    }
}
