//! Scenario runner and CSV metrics.
//!
//! One CSV row per (sweep point, repetition, iteration). Times are in
//! time units (microseconds on the real clock). The worker columns are
//! summed over all workers for the iteration window, so
//! `busy + blocked + idle + overhead == iter_time * workers`. Rows of the
//! first repetition and of the first `warmup` iterations of every
//! repetition carry `warmup = true`.

use std::collections::BTreeMap;
use std::io;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{backend_name, clock_name, substrate_name, variant_name, workload_name, ScenarioConfig, VariantKind, Workload};
use super::trace::summarize;
use crate::bench::{
    cg_reference, cg_solve, code4_run, gen_stencil_matrix, pipeline_reference, pipeline_run, Backend, CgConfig, CgCosts,
    Code4Backend, Code4Config, CsrMatrix, PipelineConfig, PipelineCosts, PipelineVariant, Substrate, Variant,
};
use crate::error::{Error, Result};
use crate::taskrt::{RunReport, RuntimeConfig, Transition};
use crate::time::VTime;

pub const CSV_COLUMNS: &[&str] = &[
    "scenario",
    "workload",
    "variant",
    "tasks",
    "backend",
    "substrate",
    "workers",
    "clock",
    "seed",
    "repetition",
    "iteration",
    "warmup",
    "iter_time",
    "busy",
    "blocked",
    "suspended",
    "idle",
    "overhead",
    "tasks_executed",
    "events_polled",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub workload: String,
    pub variant: String,
    pub tasks: usize,
    pub backend: String,
    pub substrate: String,
    pub workers: usize,
    pub clock: String,
    pub seed: u64,
    pub repetition: usize,
    pub iteration: usize,
    pub warmup: bool,
    pub iter_time: f64,
    pub busy: f64,
    pub blocked: f64,
    pub suspended: f64,
    pub idle: f64,
    pub overhead: f64,
    pub tasks_executed: u64,
    pub events_polled: u64,
}

/// One sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Point {
    pub tasks: usize,
    pub backend: Backend,
    pub substrate: Substrate,
}

pub fn scenario_id(cfg: &ScenarioConfig, p: &Point) -> String {
    format!(
        "{}-{}-t{}-{}-{}-w{}",
        workload_name(cfg.workload),
        variant_name(cfg.variant),
        p.tasks,
        backend_name(p.backend),
        substrate_name(p.substrate),
        cfg.workers
    )
}

pub fn runtime_config(cfg: &ScenarioConfig) -> RuntimeConfig {
    let mut rt = RuntimeConfig::new(cfg.workers)
        .clock(cfg.clock)
        .poll_period(VTime::from_units(cfg.poll_period))
        .queue_pool_cap(cfg.queue_pool_cap)
        .launch_overhead(VTime::from_units(cfg.launch_overhead));
    if let Some(p) = cfg.pool_threads {
        rt = rt.legacy_pool_threads(p);
    }
    rt
}

/// Inputs shared by every run of a scenario.
pub struct Workspace {
    matrix: Option<(Arc<CsrMatrix>, Vec<f64>)>,
    reference: BTreeMap<usize, Vec<f64>>,
}

impl Workspace {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let matrix = match cfg.workload {
            Workload::Cg => {
                let (x, y, z) = cfg.grid;
                let a = gen_stencil_matrix(x, y, z)?;
                let b = (0..a.n()).map(|i| a.row_sum(i)).collect();
                Some((Arc::new(a), b))
            }
            _ => None,
        };
        Ok(Workspace {
            matrix,
            reference: BTreeMap::new(),
        })
    }
}

/// Runs one repetition of one point.
pub fn run_point(cfg: &ScenarioConfig, ws: &mut Workspace, p: &Point) -> Result<RunReport> {
    let rt = runtime_config(cfg);
    let report = match cfg.workload {
        Workload::Cg => {
            let (a, b) = ws.matrix.clone().ok_or_else(|| Error::invalid("no matrix for cg"))?;
            let variant = match cfg.variant {
                VariantKind::Monolithic => Variant::Monolithic,
                VariantKind::Tasks => Variant::Tasks(p.tasks),
            };
            let mut cg = CgConfig::new(cfg.iterations, variant, p.backend).substrate(p.substrate);
            cg.tolerance = cfg.tolerance;
            cg.instances = cfg.instances;
            cg.split = cfg.split;
            cg.costs = CgCosts {
                per_nnz: cfg.per_nnz,
                per_elem: cfg.per_elem,
                device_speedup: cfg.device_speedup,
            };
            let (res, report) = cg_solve(rt, a.clone(), &b, &cg)?;
            if cfg.verify {
                let want = ws
                    .reference
                    .entry(0)
                    .or_insert_with(|| cg_reference(&a, &b, cfg.iterations, cfg.tolerance).residuals);
                check_close("residual", &res.residuals, want)?;
            }
            report
        }
        Workload::Pipeline => {
            let pc = PipelineConfig {
                oc_split: p.tasks,
                ..cfg.pipeline
            };
            let variant = match cfg.variant {
                VariantKind::Monolithic => PipelineVariant::Monolithic,
                VariantKind::Tasks => PipelineVariant::Tasks,
            };
            let costs = PipelineCosts {
                per_elem: cfg.per_elem,
                per_flop: cfg.per_flop,
            };
            let (out, report) = pipeline_run(rt, &pc, variant, costs, cfg.seed, cfg.iterations)?;
            if cfg.verify {
                let want = pipeline_reference(&pc, cfg.seed, cfg.iterations);
                check_close("dbias", &out.dbias, &want.dbias)?;
                check_close("dweight", &out.dweight, &want.dweight)?;
            }
            report
        }
        Workload::Code4 => {
            let backend = match p.backend {
                Backend::DeviceTa => Code4Backend::TaskAware,
                _ => Code4Backend::Blocking,
            };
            let mut c4 = Code4Config::new(p.tasks, backend);
            c4.kernel_cost = VTime::from_units(cfg.kernel_cost);
            let run = code4_run(rt, &c4)?;
            if cfg.verify {
                let want: Vec<f64> = (0..p.tasks).map(|i| 2.0 * (i as f64 + 1.0) + 1.0).collect();
                check_close("z", &run.z, &want)?;
            }
            run.report
        }
    };
    let audit = report.audit();
    if !audit.is_clean() {
        return Err(Error::Assertion(format!(
            "{} scheduling violations, first: {}",
            audit.violations.len(),
            audit.violations[0]
        )));
    }
    Ok(report)
}

fn check_close(what: &str, got: &[f64], want: &[f64]) -> Result<()> {
    if got.len() != want.len() {
        return Err(Error::Assertion(format!("{what}: {} values, expected {}", got.len(), want.len())));
    }
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        if g != w && (g - w).abs() > 1e-10 * w.abs() {
            return Err(Error::Assertion(format!("{what}[{i}] = {g}, reference {w}")));
        }
    }
    Ok(())
}

/// Iteration windows from the marks; the whole run when there are none.
pub fn iteration_windows(report: &RunReport) -> Vec<(VTime, VTime)> {
    let m = &report.iteration_marks;
    if m.len() < 2 {
        return vec![(VTime::ZERO, report.makespan)];
    }
    m.windows(2).map(|w| (w[0].1, w[1].1)).collect()
}

/// Metrics rows of one run.
pub fn metrics_rows(cfg: &ScenarioConfig, p: &Point, repetition: usize, report: &RunReport) -> Vec<MetricsRow> {
    let id = scenario_id(cfg, p);
    let service: Vec<_> = report
        .log
        .records
        .iter()
        .filter(|r| r.transition == Transition::Sleep)
        .map(|r| r.task)
        .collect();
    // Record index ranges between consecutive iteration marks.
    let iters: Vec<usize> = report
        .log
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.transition == Transition::Iter)
        .map(|(i, _)| i)
        .collect();
    let windows = iteration_windows(report);
    let last = windows.len() - 1;
    windows
        .into_iter()
        .enumerate()
        .map(|(k, (start, end))| {
            let s = summarize(&report.log, Some(report.workers), start, end);
            let t = s.total();
            let records = match (iters.get(k), iters.get(k + 1)) {
                (Some(&a), Some(&b)) => &report.log.records[a..b],
                _ => &report.log.records[..],
            };
            let tasks_executed = records
                .iter()
                .filter(|r| r.transition == Transition::BodyEnd && !service.contains(&r.task))
                .count() as u64;
            let events_polled = report
                .stats
                .poll_hits
                .iter()
                .filter(|(at, _)| *at >= start && (*at < end || (k == last && *at == end)))
                .map(|&(_, n)| n as u64)
                .sum();
            MetricsRow {
                scenario: id.clone(),
                workload: workload_name(cfg.workload).into(),
                variant: variant_name(cfg.variant).into(),
                tasks: p.tasks,
                backend: backend_name(p.backend).into(),
                substrate: substrate_name(p.substrate).into(),
                workers: cfg.workers,
                clock: clock_name(cfg.clock).into(),
                seed: cfg.seed,
                repetition,
                iteration: k,
                warmup: repetition == 0 || k < cfg.warmup,
                iter_time: end.saturating_sub(start).as_units(),
                busy: t.busy.as_units(),
                blocked: t.blocked.as_units(),
                suspended: t.suspended.as_units(),
                idle: t.idle.as_units(),
                overhead: t.overhead.as_units(),
                tasks_executed,
                events_polled,
            }
        })
        .collect()
}

/// Runs every point and repetition in order. `on_run` sees each report
/// before it is dropped.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    mut on_run: impl FnMut(&Point, usize, &RunReport) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let mut ws = Workspace::new(cfg)?;
    let mut rows = Vec::new();
    for (tasks, backend, substrate) in cfg.points() {
        let p = Point { tasks, backend, substrate };
        for rep in 0..cfg.repetitions {
            let report = run_point(cfg, &mut ws, &p)?;
            rows.extend(metrics_rows(cfg, &p, rep, &report));
            on_run(&p, rep, &report)?;
        }
    }
    Ok(rows)
}

pub fn write_csv<W: io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

pub fn csv_string(rows: &[MetricsRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::Io(e.to_string()))?;
    if header.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(Error::invalid("unexpected CSV header"));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::invalid(format!("bad CSV row: {e}"))))
        .collect()
}

/// Median and spread of the non-warmup iteration times of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub scenario: String,
    pub samples: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize_points(rows: &[MetricsRow]) -> Vec<PointSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.warmup) {
        if !by.contains_key(&r.scenario) {
            order.push(r.scenario.clone());
        }
        by.entry(r.scenario.clone()).or_default().push(r.iter_time);
    }
    order
        .into_iter()
        .map(|s| {
            let mut v = by.remove(&s).unwrap_or_default();
            v.sort_by(f64::total_cmp);
            let median = if v.len() % 2 == 1 {
                v[v.len() / 2]
            } else {
                (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
            };
            PointSummary {
                scenario: s,
                samples: v.len(),
                median,
                min: v[0],
                max: v[v.len() - 1],
            }
        })
        .collect()
}

/// DOT of iteration `k` of the first point's first repetition.
pub fn export_dag(cfg: &ScenarioConfig, iteration: u32) -> Result<String> {
    cfg.validate()?;
    let mut ws = Workspace::new(cfg)?;
    let (tasks, backend, substrate) = cfg.points()[0];
    let report = run_point(cfg, &mut ws, &Point { tasks, backend, substrate })?;
    if report.iteration_marks.is_empty() {
        return Ok(report.graph.to_dot_filtered(|t| t.parent.is_some()));
    }
    Ok(report.dot_for_iteration(iteration))
}
