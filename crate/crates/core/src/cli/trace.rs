//! Per-worker time accounting from a run log.
//!
//! A worker is `busy` while a user task body runs on it, `blocked` while
//! that body sits in a blocking call (device wait or legacy pool), and
//! `overhead` while the polling task runs. `idle` is the rest of the
//! window. `suspended` is the time tasks that suspended on the worker
//! spent off-core until resumed; it overlaps the other columns because
//! the worker is free to run something else meanwhile.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::depsys::TaskId;
use crate::error::Result;
use crate::taskrt::runlog::{RunLog, Transition};
use crate::time::VTime;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerTotals {
    pub busy: VTime,
    pub blocked: VTime,
    pub suspended: VTime,
    pub idle: VTime,
    pub overhead: VTime,
}

impl WorkerTotals {
    fn add(&mut self, o: &WorkerTotals) {
        self.busy += o.busy;
        self.blocked += o.blocked;
        self.suspended += o.suspended;
        self.idle += o.idle;
        self.overhead += o.overhead;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceSummary {
    pub start: VTime,
    pub end: VTime,
    pub workers: Vec<WorkerTotals>,
}

impl TraceSummary {
    pub fn total(&self) -> WorkerTotals {
        let mut t = WorkerTotals::default();
        for w in &self.workers {
            t.add(w);
        }
        t
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "span {} .. {}\n{:>6} {:>14} {:>14} {:>14} {:>14} {:>14}\n",
            self.start, self.end, "worker", "busy", "blocked", "suspended", "idle", "overhead"
        );
        let row = |out: &mut String, name: &str, t: &WorkerTotals| {
            let _ = writeln!(
                out,
                "{name:>6} {:>14} {:>14} {:>14} {:>14} {:>14}",
                t.busy.to_string(),
                t.blocked.to_string(),
                t.suspended.to_string(),
                t.idle.to_string(),
                t.overhead.to_string()
            );
        };
        for (w, t) in self.workers.iter().enumerate() {
            row(&mut out, &w.to_string(), t);
        }
        row(&mut out, "total", &self.total());
        out
    }
}

#[derive(Clone, Copy)]
enum Phase {
    Busy,
    Blocked,
    Service,
}

/// Parses and summarizes a run log over its whole span.
pub fn summarize_text(text: &str) -> Result<TraceSummary> {
    let log = RunLog::parse(text)?;
    Ok(summarize(&log, None, VTime::ZERO, log.end_time()))
}

/// Totals over the window `[start, end)`. `workers` fixes the number of
/// rows; by default it is one past the highest worker in the log.
pub fn summarize(log: &RunLog, workers: Option<usize>, start: VTime, end: VTime) -> TraceSummary {
    let nw = workers.unwrap_or_else(|| log.records.iter().filter_map(|r| r.worker).max().map_or(0, |w| w + 1));
    let service: BTreeSet<TaskId> = log
        .records
        .iter()
        .filter(|r| r.transition == Transition::Sleep)
        .map(|r| r.task)
        .collect();
    let mut totals = vec![WorkerTotals::default(); nw];
    let clip = |a: VTime, b: VTime| -> VTime { b.min(end).saturating_sub(a.max(start)) };
    // Open interval per worker: phase and its start.
    let mut open: Vec<Option<(Phase, VTime)>> = vec![None; nw];
    let mut suspended: BTreeMap<TaskId, (usize, VTime)> = BTreeMap::new();

    let close = |totals: &mut Vec<WorkerTotals>, w: usize, phase: Phase, from: VTime, to: VTime| {
        let d = clip(from, to);
        let t = &mut totals[w];
        match phase {
            Phase::Busy => t.busy += d,
            Phase::Blocked => t.blocked += d,
            Phase::Service => t.overhead += d,
        }
    };

    for r in &log.records {
        let Some(w) = r.worker.filter(|&w| w < nw) else {
            if r.transition == Transition::Resume {
                if let Some((sw, at)) = suspended.remove(&r.task) {
                    totals[sw].suspended += clip(at, r.time);
                }
            }
            continue;
        };
        match r.transition {
            Transition::Start => {
                let phase = if service.contains(&r.task) { Phase::Service } else { Phase::Busy };
                open[w] = Some((phase, r.time));
            }
            Transition::Block => {
                if let Some((p, at)) = open[w] {
                    close(&mut totals, w, p, at, r.time);
                }
                open[w] = Some((Phase::Blocked, r.time));
            }
            Transition::Unblock => {
                if let Some((p, at)) = open[w] {
                    close(&mut totals, w, p, at, r.time);
                }
                open[w] = Some((Phase::Busy, r.time));
            }
            t if t.leaves_worker() => {
                if let Some((p, at)) = open[w].take() {
                    close(&mut totals, w, p, at, r.time);
                }
                if t == Transition::Suspend {
                    suspended.insert(r.task, (w, r.time));
                }
            }
            Transition::Resume => {
                if let Some((sw, at)) = suspended.remove(&r.task) {
                    totals[sw].suspended += clip(at, r.time);
                }
            }
            _ => {}
        }
    }
    for (w, o) in open.iter().enumerate() {
        if let Some((p, at)) = *o {
            close(&mut totals, w, p, at, end);
        }
    }
    for (sw, at) in suspended.into_values() {
        totals[sw].suspended += clip(at, end);
    }
    let span = end.saturating_sub(start);
    for t in &mut totals {
        t.idle = span.saturating_sub(t.busy + t.blocked + t.overhead);
    }
    TraceSummary {
        start,
        end,
        workers: totals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::taskrt::runlog::RUN_LOG_HEADER;

    #[test]
    fn empty_log_is_zero() {
        let s = summarize_text(&format!("{RUN_LOG_HEADER}\n")).unwrap();
        assert!(s.workers.is_empty());
        assert_eq!(s.total(), WorkerTotals::default());
    }

    #[test]
    fn hand_timeline() {
        let text = [
            RUN_LOG_HEADER,
            "0.000000\t0\t2\tstart\tsched",
            "1.000000\t0\t2\tblock\tself",
            "4.000000\t0\t2\tunblock\tdevice",
            "5.000000\t0\t2\tbody_end\tself",
            "0.000000\t1\t3\tstart\tsched",
            "2.000000\t1\t3\tsuspend\tself",
            "2.000000\t1\t1\tstart\tsched",
            "2.000000\t1\t1\tsleep\tself",
            "6.000000\t-\t3\tresume\tpoll",
            "6.000000\t1\t3\tstart\tsched",
            "8.000000\t1\t3\tbody_end\tself",
        ]
        .join("\n");
        let s = summarize_text(&text).unwrap();
        assert_eq!(s.end, VTime::units(8));
        let w0 = s.workers[0];
        assert_eq!((w0.busy, w0.blocked, w0.idle), (VTime::units(2), VTime::units(3), VTime::units(3)));
        let w1 = s.workers[1];
        assert_eq!((w1.busy, w1.blocked, w1.suspended), (VTime::units(4), VTime::ZERO, VTime::units(4)));
        assert_eq!(w1.idle, VTime::units(4));
    }

    #[test]
    fn malformed_line_is_reported() {
        let err = summarize_text("0.0\t0\t1\tstart\n").unwrap_err();
        assert!(matches!(err, Error::MalformedLog { line: 1, .. }));
    }
}
