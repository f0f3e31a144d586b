//! C ABI over `tadf`.
//!
//! Every function returns a [`TadfStatus`]. On failure the message is kept
//! per thread and can be read with [`tadf_last_error`]. Strings handed out
//! by the library must be released with [`tadf_string_free`], graphs with
//! [`tadf_graph_free`].
//!
//! Functions that fill a caller buffer take its capacity and always store
//! the required length; if the buffer is too small they return
//! `TADF_STATUS_BUFFER_TOO_SMALL` and write nothing.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use tadf::bench::{cg_solve, gen_stencil_matrix, Backend, CgConfig, Variant};
use tadf::cli::scenario::{csv_string, run_scenario, scenario_id};
use tadf::cli::{summarize, ScenarioConfig};
use tadf::depsys::{self, AccessMode, AccessRegion, DepGraph, IterRange, ReleaseDecision, TaskId, TaskState};
use tadf::error::Error;
use tadf::taskrt::{RunLog, RuntimeConfig};
use tadf::time::VTime;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TadfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Contract = 3,
    Overflow = 4,
    UnknownTask = 5,
    Config = 6,
    MalformedLog = 7,
    Deadlock = 8,
    Assertion = 9,
    Io = 10,
    Utf8 = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

impl From<&Error> for TadfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Contract(_) => TadfStatus::Contract,
            Error::InvalidArgument(_) => TadfStatus::InvalidArgument,
            Error::Overflow(_) => TadfStatus::Overflow,
            Error::Unknown { .. } => TadfStatus::UnknownTask,
            Error::Config { .. } => TadfStatus::Config,
            Error::MalformedLog { .. } => TadfStatus::MalformedLog,
            Error::Deadlock(_) => TadfStatus::Deadlock,
            Error::Assertion(_) => TadfStatus::Assertion,
            Error::Io(_) => TadfStatus::Io,
        }
    }
}

/// Access modes: read, write, read-write.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TadfMode {
    Read = 0,
    Write = 1,
    ReadWrite = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TadfTaskState {
    Created = 0,
    Ready = 1,
    Running = 2,
    Suspended = 3,
    BodyFinishedPendingOps = 4,
    Finished = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TadfBackend {
    Host = 0,
    DeviceBlocking = 1,
    DeviceTaskAware = 2,
}

/// A byte region `[base, base + length)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TadfAccess {
    pub base: u64,
    pub length: u64,
    pub mode: TadfMode,
}

/// One multidependency dimension: values `start, start + step, ...` below
/// `start + extent`, each moving the region base by `stride`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TadfDim {
    pub start: u64,
    pub extent: u64,
    pub step: u64,
    pub stride: u64,
}

/// Opaque dependency graph.
pub struct TadfGraph {
    inner: DepGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Fail(TadfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

type FfiResult<T> = Result<T, Fail>;

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> TadfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TadfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TadfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(TadfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(TadfStatus::Utf8, format!("{what}: {e}")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> FfiResult<&'a [T]> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn graph<'a>(g: *mut TadfGraph) -> FfiResult<&'a mut DepGraph> {
    g.as_mut().map(|g| &mut g.inner).ok_or_else(|| null("graph"))
}

unsafe fn fill<T: Copy>(items: &[T], out: *mut T, cap: usize, len: *mut usize) -> FfiResult<()> {
    if len.is_null() {
        return Err(null("length pointer"));
    }
    *len = items.len();
    if items.len() > cap {
        return Err(Fail(
            TadfStatus::BufferTooSmall,
            format!("need room for {} items, have {cap}", items.len()),
        ));
    }
    if !items.is_empty() {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(items.as_ptr(), out, items.len());
    }
    Ok(())
}

unsafe fn give_string(s: String, out: *mut *mut c_char) -> FfiResult<()> {
    if out.is_null() {
        return Err(null("string output"));
    }
    let c = CString::new(s).map_err(|e| Fail(TadfStatus::InvalidArgument, e.to_string()))?;
    *out = c.into_raw();
    Ok(())
}

fn mode(m: TadfMode) -> AccessMode {
    match m {
        TadfMode::Read => AccessMode::Read,
        TadfMode::Write => AccessMode::Write,
        TadfMode::ReadWrite => AccessMode::ReadWrite,
    }
}

fn to_access(r: &AccessRegion) -> TadfAccess {
    TadfAccess {
        base: r.base(),
        length: r.length(),
        mode: match r.mode() {
            AccessMode::Read => TadfMode::Read,
            AccessMode::Write => TadfMode::Write,
            AccessMode::ReadWrite => TadfMode::ReadWrite,
        },
    }
}

fn ids(v: impl IntoIterator<Item = TaskId>) -> Vec<u64> {
    v.into_iter().map(|t| t.0).collect()
}

/// Message of the last failed call on this thread, or "" after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tadf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tadf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn tadf_graph_new() -> *mut TadfGraph {
    Box::into_raw(Box::new(TadfGraph { inner: DepGraph::new() }))
}

/// # Safety
/// `g` must come from [`tadf_graph_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tadf_graph_free(g: *mut TadfGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Registers task `id` in creation order and writes its unfinished
/// predecessors, ascending, to `preds`.
///
/// # Safety
/// Pointers must be valid for the given counts.
#[no_mangle]
pub unsafe extern "C" fn tadf_graph_register(
    g: *mut TadfGraph,
    id: u64,
    accesses: *const TadfAccess,
    n_accesses: usize,
    preds: *mut u64,
    preds_cap: usize,
    preds_len: *mut usize,
) -> TadfStatus {
    guard(|| {
        let g = graph(g)?;
        let regions = slice(accesses, n_accesses, "accesses")?
            .iter()
            .map(|a| AccessRegion::new(a.base, a.length, mode(a.mode)))
            .collect::<Result<Vec<_>, _>>()?;
        if preds_len.is_null() {
            return Err(null("length pointer"));
        }
        let found = ids(g.register_task(TaskId(id), &regions)?);
        fill(&found, preds, preds_cap, preds_len)
    })
}

/// # Safety
/// `g` must be a live graph and `state` writable.
#[no_mangle]
pub unsafe extern "C" fn tadf_graph_state(g: *mut TadfGraph, id: u64, state: *mut TadfTaskState) -> TadfStatus {
    guard(|| {
        let s = graph(g)?.state(TaskId(id))?;
        let out = state.as_mut().ok_or_else(|| null("state"))?;
        *out = match s {
            TaskState::Created => TadfTaskState::Created,
            TaskState::Ready => TadfTaskState::Ready,
            TaskState::Running => TadfTaskState::Running,
            TaskState::Suspended => TadfTaskState::Suspended,
            TaskState::BodyFinishedPendingOps => TadfTaskState::BodyFinishedPendingOps,
            TaskState::Finished => TadfTaskState::Finished,
        };
        Ok(())
    })
}

/// Moves a ready task to running.
///
/// # Safety
/// `g` must be a live graph.
#[no_mangle]
pub unsafe extern "C" fn tadf_graph_mark_running(g: *mut TadfGraph, id: u64) -> TadfStatus {
    guard(|| Ok(graph(g)?.mark_running(TaskId(id))?))
}

/// Adds one outstanding operation to a running task.
///
/// # Safety
/// `g` must be a live graph.
#[no_mangle]
pub unsafe extern "C" fn tadf_graph_add_pending_op(g: *mut TadfGraph, id: u64) -> TadfStatus {
    guard(|| Ok(graph(g)?.add_pending_op(TaskId(id))?))
}

/// Body of `id` returned. If operations are outstanding `*pending` gets
/// their count and nothing is released; otherwise `*pending` is 0 and the
/// successors that became ready are written to `ready`.
///
/// # Safety
/// Pointers must be valid for the given counts.
#[no_mangle]
pub unsafe extern "C" fn tadf_graph_body_finished(
    g: *mut TadfGraph,
    id: u64,
    pending: *mut u32,
    ready: *mut u64,
    ready_cap: usize,
    ready_len: *mut usize,
) -> TadfStatus {
    guard(|| {
        let g = graph(g)?;
        if pending.is_null() || ready_len.is_null() {
            return Err(null("output"));
        }
        match g.notify_body_finished(TaskId(id))? {
            ReleaseDecision::Deferred(n) => {
                *pending = n;
                *ready_len = 0;
                Ok(())
            }
            ReleaseDecision::Released(r) => {
                *pending = 0;
                fill(&ids(r), ready, ready_cap, ready_len)
            }
        }
    })
}

/// One outstanding operation of `id` completed. Ready successors are
/// written only when this released the task; `*released` says whether it
/// did.
///
/// # Safety
/// Pointers must be valid for the given counts.
#[no_mangle]
pub unsafe extern "C" fn tadf_graph_complete_pending_op(
    g: *mut TadfGraph,
    id: u64,
    released: *mut bool,
    ready: *mut u64,
    ready_cap: usize,
    ready_len: *mut usize,
) -> TadfStatus {
    guard(|| {
        let g = graph(g)?;
        if released.is_null() || ready_len.is_null() {
            return Err(null("output"));
        }
        match g.complete_pending_op(TaskId(id))? {
            Some(r) => {
                *released = true;
                fill(&ids(r), ready, ready_cap, ready_len)
            }
            None => {
                *released = false;
                *ready_len = 0;
                Ok(())
            }
        }
    })
}

/// Graphviz rendering of the whole graph.
///
/// # Safety
/// `g` must be a live graph and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tadf_graph_dot(g: *mut TadfGraph, out: *mut *mut c_char) -> TadfStatus {
    guard(|| {
        let dot = graph(g)?.to_dot();
        give_string(dot, out)
    })
}

/// Expands a multidependency into one region per iteration point, last
/// dimension fastest.
///
/// # Safety
/// Pointers must be valid for the given counts.
#[no_mangle]
pub unsafe extern "C" fn tadf_expand_multidep(
    dims: *const TadfDim,
    n_dims: usize,
    offset: u64,
    length: u64,
    access_mode: TadfMode,
    out: *mut TadfAccess,
    out_cap: usize,
    out_len: *mut usize,
) -> TadfStatus {
    guard(|| {
        let dims: Vec<(IterRange, u64)> = slice(dims, n_dims, "dims")?
            .iter()
            .map(|d| (IterRange::new(d.start, d.extent, d.step), d.stride))
            .collect();
        let regions = depsys::expand_multidep(&dims, offset, length, mode(access_mode))?;
        let flat: Vec<TadfAccess> = regions.iter().map(to_access).collect();
        fill(&flat, out, out_cap, out_len)
    })
}

/// Runs every point of a scenario given as `key = value` text. `csv`
/// receives the metrics; `runlog`, if not null, the concatenated run logs.
///
/// # Safety
/// `config` must be a NUL-terminated string; outputs writable or null
/// where allowed.
#[no_mangle]
pub unsafe extern "C" fn tadf_run_scenario(
    config: *const c_char,
    csv: *mut *mut c_char,
    runlog: *mut *mut c_char,
) -> TadfStatus {
    guard(|| {
        let mut cfg = ScenarioConfig::default();
        cfg.apply_file("config", text(config, "config")?)?;
        cfg.validate()?;
        if csv.is_null() {
            return Err(null("csv output"));
        }
        let mut log = String::new();
        let rows = run_scenario(&cfg, |p, rep, report| {
            if !runlog.is_null() {
                log.push_str(&format!("# run {} repetition {rep}\n", scenario_id(&cfg, p)));
                log.push_str(&report.log.to_text());
            }
            Ok(())
        })?;
        give_string(csv_string(&rows)?, csv)?;
        if !runlog.is_null() {
            give_string(log, runlog)?;
        }
        Ok(())
    })
}

/// Per-worker busy/blocked/suspended/idle/overhead table of a run log.
/// `workers` 0 sizes the table from the log.
///
/// # Safety
/// `log` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tadf_trace_summary(log: *const c_char, workers: usize, out: *mut *mut c_char) -> TadfStatus {
    guard(|| {
        let parsed = RunLog::parse(text(log, "log")?)?;
        let workers = (workers > 0).then_some(workers);
        let s = summarize(&parsed, workers, VTime::ZERO, parsed.end_time());
        give_string(s.to_text(), out)
    })
}

/// Solves the 27-point stencil system on an `n`³ grid whose exact solution
/// is all ones and writes the residual norm of every iteration, starting
/// with the initial one. `tiles` 0 runs the monolithic variant.
///
/// # Safety
/// Pointers must be valid for the given counts.
#[no_mangle]
pub unsafe extern "C" fn tadf_cg_stencil(
    n: usize,
    max_iters: usize,
    tiles: usize,
    workers: usize,
    backend: TadfBackend,
    residuals: *mut f64,
    residuals_cap: usize,
    residuals_len: *mut usize,
) -> TadfStatus {
    guard(|| {
        if residuals_len.is_null() {
            return Err(null("length pointer"));
        }
        let a = gen_stencil_matrix(n, n, n)?;
        let b: Vec<f64> = (0..a.n()).map(|i| a.row_sum(i)).collect();
        let variant = if tiles == 0 { Variant::Monolithic } else { Variant::Tasks(tiles) };
        let backend = match backend {
            TadfBackend::Host => Backend::Host,
            TadfBackend::DeviceBlocking => Backend::DeviceBlocking,
            TadfBackend::DeviceTaskAware => Backend::DeviceTa,
        };
        let cfg = CgConfig::new(max_iters, variant, backend);
        let (res, _) = cg_solve(RuntimeConfig::new(workers), Arc::new(a), &b, &cfg)?;
        fill(&res.residuals, residuals, residuals_cap, residuals_len)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(tadf_last_error()) }.to_string_lossy().into_owned()
    }

    fn acc(base: u64, length: u64, mode: TadfMode) -> TadfAccess {
        TadfAccess { base, length, mode }
    }

    unsafe fn register(g: *mut TadfGraph, id: u64, a: &[TadfAccess]) -> Vec<u64> {
        let mut buf = [0u64; 8];
        let mut len = 0;
        let st = tadf_graph_register(g, id, a.as_ptr(), a.len(), buf.as_mut_ptr(), buf.len(), &mut len);
        assert_eq!(st, TadfStatus::Ok, "{}", last_error());
        buf[..len].to_vec()
    }

    #[test]
    fn graph_lifecycle_with_deferred_release() {
        unsafe {
            let g = tadf_graph_new();
            assert!(register(g, 0, &[acc(0, 8, TadfMode::Write)]).is_empty());
            assert_eq!(register(g, 1, &[acc(0, 8, TadfMode::Read), acc(8, 8, TadfMode::Write)]), vec![0]);
            assert_eq!(register(g, 2, &[acc(8, 8, TadfMode::Read)]), vec![1]);

            let mut st = TadfTaskState::Created;
            assert_eq!(tadf_graph_state(g, 0, &mut st), TadfStatus::Ok);
            assert_eq!(st, TadfTaskState::Ready);

            assert_eq!(tadf_graph_mark_running(g, 0), TadfStatus::Ok);
            assert_eq!(tadf_graph_add_pending_op(g, 0), TadfStatus::Ok);
            let (mut pending, mut ready, mut len) = (0u32, [0u64; 4], 0usize);
            assert_eq!(tadf_graph_body_finished(g, 0, &mut pending, ready.as_mut_ptr(), 4, &mut len), TadfStatus::Ok);
            assert_eq!((pending, len), (1, 0));
            tadf_graph_state(g, 0, &mut st);
            assert_eq!(st, TadfTaskState::BodyFinishedPendingOps);

            let mut released = false;
            assert_eq!(
                tadf_graph_complete_pending_op(g, 0, &mut released, ready.as_mut_ptr(), 4, &mut len),
                TadfStatus::Ok
            );
            assert!(released);
            assert_eq!(&ready[..len], &[1]);

            let st = tadf_graph_complete_pending_op(g, 0, &mut released, ready.as_mut_ptr(), 4, &mut len);
            assert_eq!(st, TadfStatus::Contract);
            assert!(last_error().contains("underflow"));

            let mut dot = ptr::null_mut();
            assert_eq!(tadf_graph_dot(g, &mut dot), TadfStatus::Ok);
            let text = CStr::from_ptr(dot).to_str().unwrap().to_owned();
            tadf_string_free(dot);
            assert!(text.contains("n0 -> n1") && text.contains("n1 -> n2"));
            tadf_graph_free(g);
        }
    }

    #[test]
    fn errors_are_reported() {
        unsafe {
            let g = tadf_graph_new();
            let mut len = 0;
            let a = [acc(0, 0, TadfMode::Read)];
            let st = tadf_graph_register(g, 0, a.as_ptr(), 1, ptr::null_mut(), 0, &mut len);
            assert_eq!(st, TadfStatus::Contract);
            assert_eq!(tadf_graph_mark_running(g, 42), TadfStatus::UnknownTask);
            assert_eq!(tadf_graph_mark_running(ptr::null_mut(), 0), TadfStatus::NullPointer);
            assert!(last_error().contains("null"));
            assert_eq!(tadf_graph_add_pending_op(g, 42), TadfStatus::UnknownTask);
            assert!(!last_error().is_empty());
            register(g, 0, &[]);
            assert_eq!(last_error(), "");
            tadf_graph_free(g);
            tadf_graph_free(ptr::null_mut());
            tadf_string_free(ptr::null_mut());
        }
    }

    #[test]
    fn small_buffers_report_needed_length() {
        unsafe {
            let g = tadf_graph_new();
            for id in 0..3 {
                register(g, id, &[acc(id, 1, TadfMode::Read)]);
            }
            let w = [acc(0, 3, TadfMode::Write)];
            let (mut buf, mut len) = ([0u64; 2], 0);
            let st = tadf_graph_register(g, 3, w.as_ptr(), 1, buf.as_mut_ptr(), 2, &mut len);
            assert_eq!((st, len), (TadfStatus::BufferTooSmall, 3));
            tadf_graph_free(g);
        }
    }

    #[test]
    fn multidep_expansion() {
        let dims = [
            TadfDim { start: 0, extent: 2, step: 1, stride: 10 },
            TadfDim { start: 0, extent: 3, step: 1, stride: 1 },
        ];
        let mut out = [acc(0, 0, TadfMode::Read); 8];
        let mut len = 0;
        let st = unsafe { tadf_expand_multidep(dims.as_ptr(), 2, 100, 1, TadfMode::ReadWrite, out.as_mut_ptr(), 8, &mut len) };
        assert_eq!(st, TadfStatus::Ok);
        let bases: Vec<u64> = out[..len].iter().map(|a| a.base).collect();
        assert_eq!(bases, vec![100, 101, 102, 110, 111, 112]);
        assert!(out[..len].iter().all(|a| a.mode == TadfMode::ReadWrite && a.length == 1));

        let bad = [TadfDim { start: 0, extent: 0, step: 1, stride: 1 }];
        let st = unsafe { tadf_expand_multidep(bad.as_ptr(), 1, 0, 1, TadfMode::Read, out.as_mut_ptr(), 8, &mut len) };
        assert_eq!(st, TadfStatus::InvalidArgument);
    }

    #[test]
    fn scenario_and_trace() {
        let cfg = CString::new("workload = code4\ntasks = 2\nbackend = device-blocking\nworkers = 2\nrepetitions = 1\n").unwrap();
        let (mut csv, mut log) = (ptr::null_mut(), ptr::null_mut());
        unsafe {
            assert_eq!(tadf_run_scenario(cfg.as_ptr(), &mut csv, &mut log), TadfStatus::Ok, "{}", last_error());
            let csv_text = CStr::from_ptr(csv).to_str().unwrap().to_owned();
            assert!(csv_text.starts_with("scenario,workload"));
            let mut summary = ptr::null_mut();
            assert_eq!(tadf_trace_summary(log, 2, &mut summary), TadfStatus::Ok, "{}", last_error());
            assert!(CStr::from_ptr(summary).to_str().unwrap().contains("blocked"));
            for s in [csv, log, summary] {
                tadf_string_free(s);
            }

            let bad = CString::new("workers = none\n").unwrap();
            assert_eq!(tadf_run_scenario(bad.as_ptr(), &mut csv, ptr::null_mut()), TadfStatus::Config);
            let bad_log = CString::new("garbage\n").unwrap();
            let mut out = ptr::null_mut();
            assert_eq!(tadf_trace_summary(bad_log.as_ptr(), 0, &mut out), TadfStatus::MalformedLog);
        }
    }

    #[test]
    fn cg_residuals_decrease() {
        let mut r = [0f64; 16];
        let mut len = 0;
        let st = unsafe { tadf_cg_stencil(6, 10, 4, 4, TadfBackend::DeviceTaskAware, r.as_mut_ptr(), 16, &mut len) };
        assert_eq!(st, TadfStatus::Ok, "{}", last_error());
        assert_eq!(len, 11);
        assert!(r[10] < r[0] * 1e-3);
        let mut mono = [0f64; 16];
        unsafe { tadf_cg_stencil(6, 10, 0, 4, TadfBackend::Host, mono.as_mut_ptr(), 16, &mut len) };
        for (a, b) in r[..11].iter().zip(&mono[..11]) {
            assert!((a - b).abs() <= 1e-10 * b.abs());
        }
    }
}
