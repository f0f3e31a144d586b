//! Run log: one record per task state transition.
//!
//! Text form: one record per line, fields separated by tabs in the order
//! `time worker task transition provenance`, after a `#` header line.
//!
//! `time` is fixed-point time units, `worker` is a worker index or `-`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::depsys::TaskId;
use crate::error::{Error, Result};
use crate::time::VTime;

pub const RUN_LOG_HEADER: &str = "# time\tworker\ttask\ttransition\tprovenance";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transition {
    Create,
    Ready,
    Start,
    Block,
    Unblock,
    Suspend,
    Resume,
    Yield,
    Sleep,
    Wake,
    BodyEnd,
    Finish,
    Iter,
}

impl Transition {
    const ALL: [Transition; 13] = [
        Transition::Create,
        Transition::Ready,
        Transition::Start,
        Transition::Block,
        Transition::Unblock,
        Transition::Suspend,
        Transition::Resume,
        Transition::Yield,
        Transition::Sleep,
        Transition::Wake,
        Transition::BodyEnd,
        Transition::Finish,
        Transition::Iter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Transition::Create => "create",
            Transition::Ready => "ready",
            Transition::Start => "start",
            Transition::Block => "block",
            Transition::Unblock => "unblock",
            Transition::Suspend => "suspend",
            Transition::Resume => "resume",
            Transition::Yield => "yield",
            Transition::Sleep => "sleep",
            Transition::Wake => "wake",
            Transition::BodyEnd => "body_end",
            Transition::Finish => "finish",
            Transition::Iter => "iter",
        }
    }

    /// Transitions that take a task off its worker.
    pub fn leaves_worker(self) -> bool {
        matches!(
            self,
            Transition::Suspend | Transition::Yield | Transition::Sleep | Transition::BodyEnd
        )
    }
}

impl FromStr for Transition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Transition::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown transition `{s}`"))
    }
}

/// Who initiated a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    /// The task itself (finish, suspend, yield, blocking call).
    Task,
    Sched,
    Deps,
    Poll,
    Timer,
    External,
    Device,
    Pool,
}

impl Provenance {
    const ALL: [Provenance; 8] = [
        Provenance::Task,
        Provenance::Sched,
        Provenance::Deps,
        Provenance::Poll,
        Provenance::Timer,
        Provenance::External,
        Provenance::Device,
        Provenance::Pool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Task => "self",
            Provenance::Sched => "sched",
            Provenance::Deps => "deps",
            Provenance::Poll => "poll",
            Provenance::Timer => "timer",
            Provenance::External => "ext",
            Provenance::Device => "device",
            Provenance::Pool => "pool",
        }
    }
}

impl FromStr for Provenance {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Provenance::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown provenance `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogRecord {
    pub time: VTime,
    pub worker: Option<usize>,
    pub task: TaskId,
    pub transition: Transition,
    pub provenance: Provenance,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.worker {
            Some(w) => write!(f, "{}\t{}", self.time, w)?,
            None => write!(f, "{}\t-", self.time)?,
        }
        write!(
            f,
            "\t{}\t{}\t{}",
            self.task,
            self.transition.as_str(),
            self.provenance.as_str()
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(
        &mut self,
        time: VTime,
        worker: Option<usize>,
        task: TaskId,
        transition: Transition,
        provenance: Provenance,
    ) {
        self.records.push(LogRecord {
            time,
            worker,
            task,
            transition,
            provenance,
        });
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(32 * (self.records.len() + 1));
        out.push_str(RUN_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{r}");
        }
        out
    }

    /// Parses the text form. Blank lines and `#` comments are skipped;
    /// anything else that does not parse is reported with its line number.
    pub fn parse(text: &str) -> Result<RunLog> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::MalformedLog { line: lineno, message };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            let time = VTime::parse(fields[0]).ok_or_else(|| bad(format!("bad time `{}`", fields[0])))?;
            let worker = match fields[1] {
                "-" => None,
                w => Some(w.parse().map_err(|_| bad(format!("bad worker `{w}`")))?),
            };
            let task = TaskId(fields[2].parse().map_err(|_| bad(format!("bad task id `{}`", fields[2])))?);
            let transition = fields[3].parse().map_err(bad)?;
            let provenance = fields[4].parse().map_err(bad)?;
            records.push(LogRecord {
                time,
                worker,
                task,
                transition,
                provenance,
            });
        }
        Ok(RunLog { records })
    }

    pub fn end_time(&self) -> VTime {
        self.records.iter().map(|r| r.time).max().unwrap_or_default()
    }
}

/// Result of replaying a log against the substrate invariants.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub records_checked: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that no worker ever runs two task bodies at once and that every
/// transition off a worker was initiated by the task itself.
pub fn audit(log: &RunLog) -> AuditReport {
    let mut running: BTreeMap<usize, TaskId> = BTreeMap::new();
    let mut violations = Vec::new();
    for (i, r) in log.records.iter().enumerate() {
        let at = || format!("record {} ({r})", i + 1);
        match r.transition {
            Transition::Start => {
                let Some(w) = r.worker else {
                    violations.push(format!("{}: start without worker", at()));
                    continue;
                };
                if let Some(prev) = running.insert(w, r.task) {
                    violations.push(format!("{}: worker {w} already running task {prev}", at()));
                }
            }
            t if t.leaves_worker() => {
                if r.provenance != Provenance::Task {
                    violations.push(format!("{}: forced transition off a worker", at()));
                }
                match r.worker.and_then(|w| running.remove(&w).map(|t| (w, t))) {
                    Some((_, t)) if t == r.task => {}
                    Some((w, t)) => violations.push(format!("{}: worker {w} was running task {t}", at())),
                    None => violations.push(format!("{}: task was not running on this worker", at())),
                }
            }
            Transition::Block | Transition::Unblock if r.worker.and_then(|w| running.get(&w)) != Some(&r.task) => {
                violations.push(format!("{}: blocking call outside the running task", at()));
            }
            _ => {}
        }
    }
    AuditReport {
        records_checked: log.records.len(),
        violations,
    }
}
