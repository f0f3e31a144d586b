//! Data-dependency tracking.
//!
//! Tasks declare the byte intervals they read and write. [`DepGraph`]
//! infers RAW, WAR and WAW edges against everything registered earlier
//! and keeps each task's pending-operation counter, so a task whose body
//! returned while asynchronous work is still in flight does not release
//! its successors until the counter drops to zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessMode {
    Read,
    Write,
    ReadWrite,
}

impl AccessMode {
    pub fn writes(self) -> bool {
        !matches!(self, AccessMode::Read)
    }

    pub fn reads(self) -> bool {
        !matches!(self, AccessMode::Write)
    }
}

/// Half-open byte interval `[base, base + length)` with an access mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccessRegion {
    base: u64,
    length: u64,
    mode: AccessMode,
}

impl AccessRegion {
    pub fn new(base: u64, length: u64, mode: AccessMode) -> Result<Self> {
        if length == 0 {
            return Err(Error::contract(format!("zero-length region at {base}")));
        }
        if base.checked_add(length).is_none() {
            return Err(Error::Overflow(format!("[{base}, {base}+{length}) exceeds the address space")));
        }
        Ok(AccessRegion { base, length, mode })
    }

    pub fn read(base: u64, length: u64) -> Result<Self> {
        Self::new(base, length, AccessMode::Read)
    }

    pub fn write(base: u64, length: u64) -> Result<Self> {
        Self::new(base, length, AccessMode::Write)
    }

    pub fn read_write(base: u64, length: u64) -> Result<Self> {
        Self::new(base, length, AccessMode::ReadWrite)
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn length(&self) -> u64 {
        self.length
    }

    pub fn end(&self) -> u64 {
        self.base + self.length
    }

    pub fn mode(&self) -> AccessMode {
        self.mode
    }

    pub fn overlaps(&self, other: &AccessRegion) -> bool {
        self.base < other.end() && other.base < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskState {
    Created,
    Ready,
    Running,
    Suspended,
    BodyFinishedPendingOps,
    Finished,
}

impl TaskState {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Created => "created",
            TaskState::Ready => "ready",
            TaskState::Running => "running",
            TaskState::Suspended => "suspended",
            TaskState::BodyFinishedPendingOps => "body-finished-pending-ops",
            TaskState::Finished => "finished",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct TaskDescriptor {
    pub id: TaskId,
    pub accesses: Vec<AccessRegion>,
    pub state: TaskState,
    pub pending_ops: u32,
    pub parent: Option<TaskId>,
    pub label: String,
    /// Every predecessor recorded at registration time.
    pub preds: BTreeSet<TaskId>,
    pub succs: Vec<TaskId>,
    unresolved_preds: usize,
    live_children: usize,
    increments: u64,
    decrements: u64,
}

impl TaskDescriptor {
    /// (binds, resolutions) seen by this task's counter so far.
    pub fn counter_totals(&self) -> (u64, u64) {
        (self.increments, self.decrements)
    }
}

/// What happened when a task body returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReleaseDecision {
    /// Task finished; these successors became ready, in id order.
    Released(Vec<TaskId>),
    /// Task is waiting for this many outstanding operations.
    Deferred(u32),
}

#[derive(Debug, Clone, Default)]
struct LedgerEntry {
    end: u64,
    last_writer: Option<TaskId>,
    readers_since_last_write: BTreeSet<TaskId>,
}

/// The dependency DAG plus the interval ledger used to build it.
#[derive(Debug, Default)]
pub struct DepGraph {
    tasks: BTreeMap<TaskId, TaskDescriptor>,
    ledger: BTreeMap<u64, LedgerEntry>,
    root_live_children: usize,
}

impl DepGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_task(&mut self, id: TaskId, accesses: &[AccessRegion]) -> Result<BTreeSet<TaskId>> {
        self.register(id, accesses, None, "")
    }

    /// Adds a task in creation order and returns the unfinished tasks it
    /// must wait for. A task with no predecessors is immediately ready.
    pub fn register(
        &mut self,
        id: TaskId,
        accesses: &[AccessRegion],
        parent: Option<TaskId>,
        label: &str,
    ) -> Result<BTreeSet<TaskId>> {
        if self.tasks.contains_key(&id) {
            return Err(Error::contract(format!("task id {id} already registered")));
        }
        if let Some(p) = parent {
            if !self.tasks.contains_key(&p) {
                return Err(Error::Unknown { kind: "parent task", id: p.0 });
            }
        }
        for a in accesses {
            if a.length == 0 {
                return Err(Error::contract("zero-length region"));
            }
        }

        let mut preds = BTreeSet::new();
        // First pass collects conflicts, second pass updates the ledger so a
        // task never depends on itself.
        for a in accesses {
            for start in self.cover(a.base, a.end()) {
                let entry = self.ledger.get_mut(&start).expect("covered entry");
                let tasks = &self.tasks;
                entry
                    .readers_since_last_write
                    .retain(|r| tasks.get(r).is_some_and(|t| t.state != TaskState::Finished));
                if let Some(w) = entry.last_writer {
                    if tasks.get(&w).is_some_and(|t| t.state != TaskState::Finished) {
                        preds.insert(w);
                    }
                }
                if a.mode.writes() {
                    preds.extend(entry.readers_since_last_write.iter().copied());
                }
            }
        }
        for pass_writes in [false, true] {
            for a in accesses.iter().filter(|a| a.mode.writes() == pass_writes) {
                for start in self.cover(a.base, a.end()) {
                    let entry = self.ledger.get_mut(&start).expect("covered entry");
                    if a.mode.writes() {
                        entry.last_writer = Some(id);
                        entry.readers_since_last_write.clear();
                    } else {
                        entry.readers_since_last_write.insert(id);
                    }
                }
            }
        }
        preds.remove(&id);

        for p in &preds {
            self.tasks.get_mut(p).expect("pred exists").succs.push(id);
        }
        match parent {
            Some(p) => self.tasks.get_mut(&p).expect("parent exists").live_children += 1,
            None => self.root_live_children += 1,
        }
        self.tasks.insert(
            id,
            TaskDescriptor {
                id,
                accesses: accesses.to_vec(),
                state: if preds.is_empty() { TaskState::Ready } else { TaskState::Created },
                pending_ops: 0,
                parent,
                label: label.to_string(),
                preds: preds.clone(),
                succs: Vec::new(),
                unresolved_preds: preds.len(),
                live_children: 0,
                increments: 0,
                decrements: 0,
            },
        );
        Ok(preds)
    }

    /// Splits ledger entries at `start` and `end`, fills gaps, and returns
    /// the starts of the entries tiling `[start, end)`.
    fn cover(&mut self, start: u64, end: u64) -> Vec<u64> {
        self.split_at(start);
        self.split_at(end);
        let mut starts = Vec::new();
        let mut gaps = Vec::new();
        let mut cursor = start;
        for (&s, e) in self.ledger.range(start..end) {
            if s > cursor {
                gaps.push((cursor, s));
            }
            starts.push(s);
            cursor = e.end;
        }
        if cursor < end {
            gaps.push((cursor, end));
        }
        for (s, e) in gaps {
            self.ledger.insert(s, LedgerEntry { end: e, ..Default::default() });
            starts.push(s);
        }
        starts.sort_unstable();
        starts
    }

    fn split_at(&mut self, pos: u64) {
        let Some((&s, entry)) = self.ledger.range(..pos).next_back() else {
            return;
        };
        if entry.end > pos {
            let tail = entry.clone();
            self.ledger.get_mut(&s).expect("entry").end = pos;
            self.ledger.insert(pos, tail);
        }
    }

    pub fn ledger_len(&self) -> usize {
        self.ledger.len()
    }

    pub fn get(&self, id: TaskId) -> Option<&TaskDescriptor> {
        self.tasks.get(&id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskDescriptor> {
        self.tasks.values()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn state(&self, id: TaskId) -> Result<TaskState> {
        Ok(self.task(id)?.state)
    }

    fn task(&self, id: TaskId) -> Result<&TaskDescriptor> {
        self.tasks.get(&id).ok_or(Error::Unknown { kind: "task", id: id.0 })
    }

    fn task_mut(&mut self, id: TaskId) -> Result<&mut TaskDescriptor> {
        self.tasks.get_mut(&id).ok_or(Error::Unknown { kind: "task", id: id.0 })
    }

    fn transition(&mut self, id: TaskId, from: &[TaskState], to: TaskState) -> Result<()> {
        let t = self.task_mut(id)?;
        if !from.contains(&t.state) {
            return Err(Error::contract(format!("task {id}: illegal transition {} -> {to}", t.state)));
        }
        t.state = to;
        Ok(())
    }

    /// Ready or resumed task starts (or continues) running on a worker.
    pub fn mark_running(&mut self, id: TaskId) -> Result<()> {
        self.transition(id, &[TaskState::Ready], TaskState::Running)
    }

    pub fn mark_suspended(&mut self, id: TaskId) -> Result<()> {
        self.transition(id, &[TaskState::Running], TaskState::Suspended)
    }

    /// A suspended task was resumed and is queued again.
    pub fn mark_resumed(&mut self, id: TaskId) -> Result<()> {
        self.transition(id, &[TaskState::Suspended], TaskState::Ready)
    }

    /// A running task voluntarily gave up its worker.
    pub fn mark_yielded(&mut self, id: TaskId) -> Result<()> {
        self.transition(id, &[TaskState::Running], TaskState::Ready)
    }

    /// Increments the pending-operation counter of a running task.
    pub fn add_pending_op(&mut self, id: TaskId) -> Result<()> {
        let t = self.task_mut(id)?;
        if t.state != TaskState::Running {
            return Err(Error::contract(format!("task {id} is {} and cannot bind operations", t.state)));
        }
        t.pending_ops += 1;
        t.increments += 1;
        Ok(())
    }

    /// Decrements the counter. Returns the newly ready successors if this
    /// was the last outstanding operation of a task whose body already
    /// returned.
    pub fn complete_pending_op(&mut self, id: TaskId) -> Result<Option<Vec<TaskId>>> {
        let t = self.task_mut(id)?;
        if t.pending_ops == 0 {
            return Err(Error::contract(format!("task {id}: pending-operation counter underflow")));
        }
        t.pending_ops -= 1;
        t.decrements += 1;
        if t.pending_ops == 0 && t.state == TaskState::BodyFinishedPendingOps {
            return self.finish(id).map(Some);
        }
        Ok(None)
    }

    pub fn notify_body_finished(&mut self, id: TaskId) -> Result<ReleaseDecision> {
        let t = self.task_mut(id)?;
        if t.state != TaskState::Running {
            return Err(Error::contract(format!("body of task {id} finished while {}", t.state)));
        }
        if t.pending_ops > 0 {
            t.state = TaskState::BodyFinishedPendingOps;
            return Ok(ReleaseDecision::Deferred(t.pending_ops));
        }
        self.finish(id).map(ReleaseDecision::Released)
    }

    fn finish(&mut self, id: TaskId) -> Result<Vec<TaskId>> {
        let t = self.task_mut(id)?;
        debug_assert_eq!(t.pending_ops, 0);
        t.state = TaskState::Finished;
        let succs = t.succs.clone();
        let parent = t.parent;
        let mut ready = Vec::new();
        for s in succs {
            let st = self.tasks.get_mut(&s).expect("successor exists");
            st.unresolved_preds -= 1;
            if st.unresolved_preds == 0 {
                st.state = TaskState::Ready;
                ready.push(s);
            }
        }
        match parent {
            Some(p) => self.task_mut(p)?.live_children -= 1,
            None => self.root_live_children -= 1,
        }
        ready.sort_unstable();
        Ok(ready)
    }

    /// Unfinished tasks created directly within `scope` (`None` is the root).
    pub fn live_children(&self, scope: Option<TaskId>) -> usize {
        match scope {
            Some(p) => self.tasks.get(&p).map_or(0, |t| t.live_children),
            None => self.root_live_children,
        }
    }

    /// True once every task created within `scope` has finished.
    pub fn taskwait_satisfied(&self, scope: Option<TaskId>) -> bool {
        self.live_children(scope) == 0
    }

    /// Graphviz rendering of the whole graph.
    pub fn to_dot(&self) -> String {
        self.to_dot_filtered(|_| true)
    }

    /// Graphviz rendering restricted to tasks accepted by `keep`; only edges
    /// between kept tasks are emitted.
    pub fn to_dot_filtered(&self, keep: impl Fn(&TaskDescriptor) -> bool) -> String {
        let kept: BTreeSet<TaskId> = self.tasks.values().filter(|t| keep(t)).map(|t| t.id).collect();
        let mut out = String::from("digraph tasks {\n");
        for id in &kept {
            let t = &self.tasks[id];
            let label = t.label.replace('\\', "\\\\").replace('"', "\\\"");
            let _ = writeln!(out, "  n{} [label=\"{}:{}:{}\"];", id, id, label, t.state);
        }
        for id in &kept {
            for p in &self.tasks[id].preds {
                if kept.contains(p) {
                    let _ = writeln!(out, "  n{p} -> n{id};");
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

/// One dimension of a multidependency iteration space: the values
/// `start, start + step, ...` strictly below `start + extent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterRange {
    pub start: u64,
    pub extent: u64,
    pub step: u64,
}

impl IterRange {
    pub fn new(start: u64, extent: u64, step: u64) -> Self {
        IterRange { start, extent, step }
    }
}

/// A region template expanded over an iteration space: for every point
/// `v` the region base is `offset + sum(stride[d] * v[d])` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiDep {
    pub dims: Vec<(IterRange, u64)>,
    pub offset: u64,
    pub length: u64,
    pub mode: AccessMode,
}

impl MultiDep {
    /// Expands eagerly into one region per iteration point, in
    /// lexicographic order (last dimension fastest).
    pub fn expand(&self) -> Result<Vec<AccessRegion>> {
        expand_multidep(&self.dims, self.offset, self.length, self.mode)
    }
}

pub fn expand_multidep(
    dims: &[(IterRange, u64)],
    offset: u64,
    length: u64,
    mode: AccessMode,
) -> Result<Vec<AccessRegion>> {
    if dims.is_empty() {
        return Err(Error::invalid("multidependency needs at least one dimension"));
    }
    let mut values: Vec<Vec<u64>> = Vec::with_capacity(dims.len());
    for (d, (range, stride)) in dims.iter().enumerate() {
        if range.step == 0 || *stride == 0 {
            return Err(Error::invalid(format!("dimension {d}: steps and strides must be positive")));
        }
        if range.extent == 0 {
            return Err(Error::invalid(format!("dimension {d}: empty bounds")));
        }
        let stop = range
            .start
            .checked_add(range.extent)
            .ok_or_else(|| Error::Overflow(format!("dimension {d} bounds")))?;
        values.push((range.start..stop).step_by(range.step as usize).collect());
    }

    let mut out = Vec::with_capacity(values.iter().map(Vec::len).product());
    let mut idx = vec![0usize; dims.len()];
    loop {
        let mut base = offset;
        for (d, &i) in idx.iter().enumerate() {
            base = dims[d]
                .1
                .checked_mul(values[d][i])
                .and_then(|term| base.checked_add(term))
                .ok_or_else(|| Error::Overflow("multidependency base address".into()))?;
        }
        out.push(AccessRegion::new(base, length, mode)?);

        let mut d = dims.len();
        loop {
            if d == 0 {
                return Ok(out);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < values[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
}
