//! Scenario configuration.
//!
//! A config file holds flat `key = value` lines; `#` starts a comment.
//! Every key can also be set through the environment as `TADF_<KEY>`
//! (upper case) and on the command line as `--<key>` with dashes for
//! underscores. Flags override the environment, which overrides the
//! file. List-valued keys take comma-separated values.

use std::fmt;
use std::str::FromStr;

use crate::bench::{Backend, PipelineConfig, Substrate};
use crate::error::{Error, Result};
use crate::taskrt::ClockMode;

pub const ENV_PREFIX: &str = "TADF_";

/// `(key, help)` for every accepted key.
pub const KEYS: &[(&str, &str)] = &[
    ("workload", "cg, pipeline or code4"),
    ("variant", "monolithic or tasks"),
    ("tasks", "tile/task counts to sweep (CG tiles, pipeline OC_SPLIT, code4 N)"),
    ("backend", "host, device-blocking or device-ta (list)"),
    ("substrate", "single-rt, multi-rt-uncoordinated or multi-rt-unified (list)"),
    ("workers", "worker (core) count"),
    ("clock", "virtual or real"),
    ("repetitions", "runs per sweep point"),
    ("iterations", "iterations per run"),
    ("warmup", "leading iterations flagged as warmup in every repetition"),
    ("seed", "seed for generated inputs"),
    ("poll_period", "polling task period in time units"),
    ("queue_pool_cap", "maximum number of pooled device streams"),
    ("instances", "runtime instances for the multi-rt substrates"),
    ("pool_threads", "threads per legacy pool (default: workers)"),
    ("split", "pieces per tile kernel on the multi-rt substrates (default: workers)"),
    ("launch_overhead", "host time charged per kernel launch"),
    ("grid", "CG stencil grid, N or NXxNYxNZ"),
    ("tolerance", "CG stop threshold on the residual norm"),
    ("per_nnz", "CG host cost per SpMV nonzero"),
    ("per_elem", "host cost per vector element"),
    ("per_flop", "pipeline host cost per multiply-add"),
    ("device_speedup", "device cost divisor"),
    ("batch", "pipeline B"),
    ("context", "pipeline T"),
    ("channels", "pipeline C"),
    ("out_channels", "pipeline OC"),
    ("b_gran", "pipeline B_GRAN"),
    ("t_gran", "pipeline T_GRAN"),
    ("kernel_cost", "code4 device kernel cost"),
    ("verify", "check results against the sequential reference (true/false)"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    Cg,
    Pipeline,
    Code4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    Monolithic,
    Tasks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub workload: Workload,
    pub variant: VariantKind,
    pub tasks: Vec<usize>,
    pub backends: Vec<Backend>,
    pub substrates: Vec<Substrate>,
    pub workers: usize,
    pub clock: ClockMode,
    pub repetitions: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
    pub poll_period: f64,
    pub queue_pool_cap: usize,
    pub instances: usize,
    pub pool_threads: Option<usize>,
    pub split: Option<usize>,
    pub launch_overhead: f64,
    pub grid: (usize, usize, usize),
    pub tolerance: f64,
    pub per_nnz: f64,
    pub per_elem: f64,
    pub per_flop: f64,
    pub device_speedup: f64,
    pub pipeline: PipelineConfig,
    pub kernel_cost: f64,
    pub verify: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            workload: Workload::Cg,
            variant: VariantKind::Tasks,
            tasks: vec![16],
            backends: vec![Backend::Host],
            substrates: vec![Substrate::SingleRt],
            workers: 8,
            clock: ClockMode::Virtual,
            repetitions: 5,
            iterations: 50,
            warmup: 10,
            seed: 7,
            poll_period: 100.0,
            queue_pool_cap: 16,
            instances: 4,
            pool_threads: None,
            split: None,
            launch_overhead: 0.05,
            grid: (32, 32, 32),
            tolerance: 0.0,
            per_nnz: 0.001,
            per_elem: 0.0005,
            per_flop: 0.001,
            device_speedup: 4.0,
            pipeline: PipelineConfig::default(),
            kernel_cost: 10.0,
            verify: false,
        }
    }
}

pub fn workload_name(w: Workload) -> &'static str {
    match w {
        Workload::Cg => "cg",
        Workload::Pipeline => "pipeline",
        Workload::Code4 => "code4",
    }
}

pub fn variant_name(v: VariantKind) -> &'static str {
    match v {
        VariantKind::Monolithic => "monolithic",
        VariantKind::Tasks => "tasks",
    }
}

pub fn backend_name(b: Backend) -> &'static str {
    match b {
        Backend::Host => "host",
        Backend::DeviceBlocking => "device-blocking",
        Backend::DeviceTa => "device-ta",
    }
}

pub fn substrate_name(s: Substrate) -> &'static str {
    match s {
        Substrate::SingleRt => "single-rt",
        Substrate::MultiRtUncoordinated => "multi-rt-uncoordinated",
        Substrate::MultiRtUnified => "multi-rt-unified",
    }
}

pub fn clock_name(c: ClockMode) -> &'static str {
    match c {
        ClockMode::Virtual => "virtual",
        ClockMode::Real => "real",
    }
}

fn pick<T: Copy>(v: &str, table: &[(&str, T)]) -> std::result::Result<T, String> {
    table
        .iter()
        .find(|(n, _)| *n == v)
        .map(|&(_, t)| t)
        .ok_or_else(|| {
            let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
            format!("expected one of {}", names.join(", "))
        })
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn positive(v: &str) -> std::result::Result<usize, String> {
    match num::<usize>(v)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x = num::<f64>(v)?;
    if x.is_finite() && x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("`{v}` must be a finite non-negative number"))
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    let items: Vec<T> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err("list must not be empty".into());
    }
    Ok(items)
}

const BACKENDS: &[(&str, Backend)] = &[
    ("host", Backend::Host),
    ("device-blocking", Backend::DeviceBlocking),
    ("device-ta", Backend::DeviceTa),
];

const SUBSTRATES: &[(&str, Substrate)] = &[
    ("single-rt", Substrate::SingleRt),
    ("multi-rt-uncoordinated", Substrate::MultiRtUncoordinated),
    ("multi-rt-unified", Substrate::MultiRtUnified),
];

impl ScenarioConfig {
    /// Sets one key; `location` names where the value came from.
    pub fn set(&mut self, key: &str, value: &str, location: &str) -> Result<()> {
        let v = value.trim();
        let r: std::result::Result<(), String> = (|| {
            match key {
                "workload" => {
                    self.workload = pick(v, &[("cg", Workload::Cg), ("pipeline", Workload::Pipeline), ("code4", Workload::Code4)])?
                }
                "variant" => self.variant = pick(v, &[("monolithic", VariantKind::Monolithic), ("tasks", VariantKind::Tasks)])?,
                "tasks" => self.tasks = list(v, positive)?,
                "backend" => self.backends = list(v, |s| pick(s, BACKENDS))?,
                "substrate" => self.substrates = list(v, |s| pick(s, SUBSTRATES))?,
                "workers" => self.workers = positive(v)?,
                "clock" => self.clock = pick(v, &[("virtual", ClockMode::Virtual), ("real", ClockMode::Real)])?,
                "repetitions" => self.repetitions = positive(v)?,
                "iterations" => self.iterations = positive(v)?,
                "warmup" => self.warmup = num(v)?,
                "seed" => self.seed = num(v)?,
                "poll_period" => {
                    self.poll_period = non_negative(v)?;
                    if self.poll_period == 0.0 {
                        return Err("must be positive".into());
                    }
                }
                "queue_pool_cap" => self.queue_pool_cap = positive(v)?,
                "instances" => self.instances = positive(v)?,
                "pool_threads" => self.pool_threads = Some(positive(v)?),
                "split" => self.split = Some(positive(v)?),
                "launch_overhead" => self.launch_overhead = non_negative(v)?,
                "grid" => {
                    let dims = v.split('x').map(positive).collect::<std::result::Result<Vec<_>, _>>()?;
                    self.grid = match dims[..] {
                        [n] => (n, n, n),
                        [x, y, z] => (x, y, z),
                        _ => return Err("expected N or NXxNYxNZ".into()),
                    };
                }
                "tolerance" => self.tolerance = non_negative(v)?,
                "per_nnz" => self.per_nnz = non_negative(v)?,
                "per_elem" => self.per_elem = non_negative(v)?,
                "per_flop" => self.per_flop = non_negative(v)?,
                "device_speedup" => {
                    self.device_speedup = non_negative(v)?;
                    if self.device_speedup == 0.0 {
                        return Err("must be positive".into());
                    }
                }
                "batch" => self.pipeline.b = positive(v)?,
                "context" => self.pipeline.t = positive(v)?,
                "channels" => self.pipeline.c = positive(v)?,
                "out_channels" => self.pipeline.oc = positive(v)?,
                "b_gran" => self.pipeline.b_gran = positive(v)?,
                "t_gran" => self.pipeline.t_gran = positive(v)?,
                "kernel_cost" => self.kernel_cost = non_negative(v)?,
                "verify" => self.verify = pick(v, &[("true", true), ("false", false)])?,
                _ => return Err(format!("unknown key `{key}`")),
            }
            Ok(())
        })();
        r.map_err(|m| Error::config(location, format!("{key}: {m}")))
    }

    /// Applies a `key = value` file.
    pub fn apply_file(&mut self, path: &str, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = format!("{path}:{}", i + 1);
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(loc, "expected `key = value`"));
            };
            self.set(k.trim(), v, &loc)?;
        }
        Ok(())
    }

    /// Applies `TADF_*` variables; unknown names under the prefix are errors.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, v) in vars {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase();
            self.set(&key, &v, &format!("environment {k}"))?;
        }
        Ok(())
    }

    pub fn apply_flags<'a>(&mut self, flags: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in flags {
            self.set(k, v, &format!("flag --{}", k.replace('_', "-")))?;
        }
        Ok(())
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, m: &str| Err(Error::config("config", format!("{key}: {m}")));
        if self.workload != Workload::Cg && self.substrates.iter().any(|&s| s != Substrate::SingleRt) {
            return bad("substrate", "only the cg workload runs on multi-rt substrates");
        }
        match self.workload {
            Workload::Cg => {
                if self.backends.iter().any(|&b| b != Backend::Host) && self.substrates.iter().any(|&s| s != Substrate::SingleRt) {
                    return bad("backend", "device backends need substrate single-rt");
                }
                let n = self.grid.0 * self.grid.1 * self.grid.2;
                if self.variant == VariantKind::Tasks && self.tasks.iter().any(|&t| t > n) {
                    return bad("tasks", "more tiles than matrix rows");
                }
            }
            Workload::Pipeline => {
                if self.backends.iter().any(|&b| b != Backend::Host) {
                    return bad("backend", "the pipeline workload only has a host backend");
                }
            }
            Workload::Code4 => {
                if self.backends.contains(&Backend::Host) {
                    return bad("backend", "code4 needs device-blocking or device-ta");
                }
            }
        }
        Ok(())
    }

    /// Sweep points: every `(tasks, backend, substrate)` combination.
    pub fn points(&self) -> Vec<(usize, Backend, Substrate)> {
        let tasks: &[usize] = if self.variant == VariantKind::Monolithic && self.workload != Workload::Code4 {
            &[1]
        } else {
            &self.tasks
        };
        let mut out = Vec::new();
        for &s in &self.substrates {
            for &b in &self.backends {
                for &t in tasks {
                    out.push((t, b, s));
                }
            }
        }
        out
    }

    /// Text form that [`ScenarioConfig::apply_file`] reads back.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut lines = vec![
            ("workload", workload_name(self.workload).to_string()),
            ("variant", variant_name(self.variant).to_string()),
            ("tasks", join(self.tasks.iter().map(|t| t.to_string()).collect())),
            ("backend", join(self.backends.iter().map(|&b| backend_name(b).to_string()).collect())),
            ("substrate", join(self.substrates.iter().map(|&s| substrate_name(s).to_string()).collect())),
            ("workers", self.workers.to_string()),
            ("clock", clock_name(self.clock).to_string()),
            ("repetitions", self.repetitions.to_string()),
            ("iterations", self.iterations.to_string()),
            ("warmup", self.warmup.to_string()),
            ("seed", self.seed.to_string()),
            ("poll_period", format!("{:?}", self.poll_period)),
            ("queue_pool_cap", self.queue_pool_cap.to_string()),
            ("instances", self.instances.to_string()),
        ];
        if let Some(p) = self.pool_threads {
            lines.push(("pool_threads", p.to_string()));
        }
        if let Some(p) = self.split {
            lines.push(("split", p.to_string()));
        }
        lines.extend([
            ("launch_overhead", format!("{:?}", self.launch_overhead)),
            ("grid", format!("{}x{}x{}", self.grid.0, self.grid.1, self.grid.2)),
            ("tolerance", format!("{:?}", self.tolerance)),
            ("per_nnz", format!("{:?}", self.per_nnz)),
            ("per_elem", format!("{:?}", self.per_elem)),
            ("per_flop", format!("{:?}", self.per_flop)),
            ("device_speedup", format!("{:?}", self.device_speedup)),
            ("batch", self.pipeline.b.to_string()),
            ("context", self.pipeline.t.to_string()),
            ("channels", self.pipeline.c.to_string()),
            ("out_channels", self.pipeline.oc.to_string()),
            ("b_gran", self.pipeline.b_gran.to_string()),
            ("t_gran", self.pipeline.t_gran.to_string()),
            ("kernel_cost", format!("{:?}", self.kernel_cost)),
            ("verify", self.verify.to_string()),
        ]);
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
