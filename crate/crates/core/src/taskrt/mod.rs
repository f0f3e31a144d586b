//! Cooperative scheduler substrate.
//!
//! A fixed set of workers shares one FIFO ready queue. At most one task
//! body runs per worker, and a task only leaves its worker by finishing,
//! suspending, or yielding. Several runtime instances may submit to the
//! same substrate (`Unified`), or each instance may additionally drive a
//! private thread pool that competes for the same cores (`Uncoordinated`).
//!
//! Task bodies are futures. Every await point of a [`TaskCtx`] primitive
//! hands a request to the engine (compute for some time, suspend, block
//! on a device event, ...). The virtual engine interprets requests on a
//! deterministic discrete-event clock; the real engine runs the same
//! bodies on OS threads.

mod contention;
mod ctx;
mod real;
pub mod runlog;
mod virt;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Condvar, Mutex};

pub use contention::ContentionModel;
pub use ctx::{TaskCtx, TaskSpec};
pub use runlog::{audit, AuditReport, LogRecord, Provenance, RunLog, Transition, RUN_LOG_HEADER};

use crate::depsys::{DepGraph, ReleaseDecision, TaskId};
use crate::error::{Error, Result};
use crate::simdev::{Arena, CompletionRecord, CostModel, Device, EventId, KernelArgs, KernelId, KernelRegistry};
use crate::talib::TaState;
use crate::time::VTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubstrateMode {
    /// Every instance submits to the shared workers; nothing else runs.
    Unified,
    /// Each instance also owns a private pool of OS threads.
    Uncoordinated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClockMode {
    Virtual,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId(pub u32);

impl InstanceId {
    pub const MAIN: InstanceId = InstanceId(0);
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub workers: usize,
    pub mode: SubstrateMode,
    pub clock: ClockMode,
    /// Polling-task period. In real mode one time unit is one microsecond.
    pub poll_period: VTime,
    pub queue_pool_cap: usize,
    /// Threads per private pool in uncoordinated mode; `None` means one
    /// per worker.
    pub legacy_pool_threads: Option<usize>,
    pub contention: ContentionModel,
    pub device_cost: CostModel,
    pub arena_capacity: usize,
    /// Finishing a task body while still holding a queue is an error
    /// instead of an implicit return.
    pub strict_queue_leaks: bool,
}

impl RuntimeConfig {
    pub fn new(workers: usize) -> Self {
        RuntimeConfig {
            workers,
            mode: SubstrateMode::Unified,
            clock: ClockMode::Virtual,
            poll_period: VTime::units(100),
            queue_pool_cap: 16,
            legacy_pool_threads: None,
            contention: ContentionModel::new(workers),
            device_cost: CostModel::default(),
            arena_capacity: 1 << 20,
            strict_queue_leaks: cfg!(debug_assertions),
        }
    }

    pub fn mode(mut self, mode: SubstrateMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn clock(mut self, clock: ClockMode) -> Self {
        self.clock = clock;
        self
    }

    pub fn poll_period(mut self, p: VTime) -> Self {
        self.poll_period = p;
        self
    }

    pub fn queue_pool_cap(mut self, cap: usize) -> Self {
        self.queue_pool_cap = cap;
        self
    }

    pub fn launch_overhead(mut self, t: VTime) -> Self {
        self.device_cost.launch_overhead = t;
        self
    }

    pub fn arena_capacity(mut self, cells: usize) -> Self {
        self.arena_capacity = cells;
        self
    }

    pub fn legacy_pool_threads(mut self, n: usize) -> Self {
        self.legacy_pool_threads = Some(n);
        self
    }

    pub fn pool_threads(&self) -> usize {
        self.legacy_pool_threads.unwrap_or(self.workers)
    }

    fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid("worker count must be at least 1"));
        }
        if self.poll_period == VTime::ZERO {
            return Err(Error::invalid("poll period must be positive"));
        }
        if self.queue_pool_cap == 0 {
            return Err(Error::invalid("queue pool capacity must be at least 1"));
        }
        if self.pool_threads() == 0 {
            return Err(Error::invalid("legacy pools need at least one thread"));
        }
        if self.contention.quantum == VTime::ZERO {
            return Err(Error::invalid("contention quantum must be positive"));
        }
        Ok(())
    }
}

/// One-shot permission to continue a suspended task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResumeToken {
    id: u64,
    task: TaskId,
}

impl ResumeToken {
    pub fn task(&self) -> TaskId {
        self.task
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenState {
    Armed,
    /// Resumed before the task finished parking.
    Permitted(Provenance),
    Parked,
    Consumed,
}

pub(crate) type TaskFuture = Pin<Box<dyn Future<Output = Result<()>> + Send>>;

/// What a task asks of the engine at an await point.
#[derive(Debug)]
pub(crate) enum Request {
    Compute(VTime),
    Yield,
    Suspend(ResumeToken),
    Sleep(VTime),
    BlockOnEvent(EventId),
    LegacyRun(Vec<VTime>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Timer {
    Requeue(TaskId),
    Resume(ResumeToken),
}

impl PartialOrd for ResumeToken {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ResumeToken {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.id.cmp(&other.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TaskKind {
    User,
    Poller,
}

pub(crate) struct TaskSlot {
    pub kind: TaskKind,
    pub instance: InstanceId,
    pub future: Option<TaskFuture>,
    pub request: Option<Request>,
    pub worker: Option<usize>,
}

pub(crate) enum Clock {
    Virtual(VTime),
    Real(Instant),
}

impl Clock {
    pub fn now(&self) -> VTime {
        match self {
            Clock::Virtual(t) => *t,
            // one unit per microsecond
            Clock::Real(start) => VTime(start.elapsed().as_nanos() as u64 * (crate::time::TICKS_PER_UNIT / 1000)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstanceStats {
    pub name: String,
    pub submitted: u64,
    pub completed: u64,
}

/// Counters collected over one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub tasks_executed: u64,
    pub events_polled: u64,
    pub poll_ticks: u64,
    pub queue_checkouts: u64,
    pub queue_returns: u64,
    pub streams_created: usize,
    pub legacy_items: u64,
    /// Sum over legacy items of (observed duration - nominal cost).
    pub legacy_delay: VTime,
    /// `(time, events)` for every poll tick that found completed events.
    pub poll_hits: Vec<(VTime, usize)>,
    pub deferred_releases: Vec<DeferredRelease>,
}

/// A task released by the polling task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeferredRelease {
    pub task: TaskId,
    /// Completion time of the last of its bound events.
    pub last_event: VTime,
    pub released: VTime,
}

pub(crate) struct Core {
    pub clock: Clock,
    pub graph: DepGraph,
    pub tasks: HashMap<TaskId, TaskSlot>,
    next_task: u64,
    pub ready: VecDeque<TaskId>,
    tokens: HashMap<u64, TokenState>,
    next_token: u64,
    taskwaiters: HashMap<TaskId, ResumeToken>,
    pub device: Device,
    pub ta: TaState,
    pub instances: Vec<InstanceStats>,
    pub timers: BinaryHeap<Reverse<(VTime, u64, Timer)>>,
    timer_seq: u64,
    pub log: RunLog,
    pub alive_user: usize,
    task_instance: HashMap<TaskId, InstanceId>,
    current_iteration: u32,
    pub iteration_marks: Vec<(u32, VTime)>,
    pub task_iteration: BTreeMap<TaskId, u32>,
    pub failure: Option<Error>,
    pub stats: RunStats,
    pub poll_period: VTime,
    strict_queue_leaks: bool,
}

impl Core {
    pub fn now(&self) -> VTime {
        self.clock.now()
    }

    pub fn log(&mut self, worker: Option<usize>, task: TaskId, tr: Transition, prov: Provenance) {
        let t = self.now();
        self.log.push(t, worker, task, tr, prov);
    }

    pub fn alloc_task_id(&mut self) -> TaskId {
        let id = TaskId(self.next_task);
        self.next_task += 1;
        id
    }

    pub fn worker_of(&self, task: TaskId) -> Option<usize> {
        self.tasks.get(&task).and_then(|s| s.worker)
    }

    fn is_user(&self, task: TaskId) -> bool {
        self.tasks.get(&task).is_some_and(|s| s.kind == TaskKind::User)
    }

    /// The task must currently hold a worker.
    pub fn ensure_running(&self, task: TaskId) -> Result<()> {
        let slot = self
            .tasks
            .get(&task)
            .ok_or_else(|| Error::contract(format!("task {task} is not alive")))?;
        if slot.kind == TaskKind::User && self.graph.state(task)? != crate::depsys::TaskState::Running {
            return Err(Error::contract(format!(
                "task {task} is {} and not running on a worker",
                self.graph.state(task)?
            )));
        }
        Ok(())
    }

    /// Queues a task; the polling task jumps the queue.
    pub fn push_ready(&mut self, task: TaskId) {
        if self.ta.is_poller(task) {
            self.ready.push_front(task);
        } else {
            self.ready.push_back(task);
        }
    }

    pub fn add_timer(&mut self, at: VTime, timer: Timer) {
        self.timer_seq += 1;
        self.timers.push(Reverse((at, self.timer_seq, timer)));
    }

    pub fn next_timer(&self) -> Option<VTime> {
        self.timers.peek().map(|Reverse((t, _, _))| *t)
    }

    pub fn pop_due_timer(&mut self, now: VTime) -> Option<Timer> {
        match self.timers.peek() {
            Some(Reverse((t, _, _))) if *t <= now => self.timers.pop().map(|Reverse((_, _, tm))| tm),
            _ => None,
        }
    }

    pub fn register_task(
        &mut self,
        id: TaskId,
        parent: Option<TaskId>,
        spec: TaskSpec,
        future: TaskFuture,
        worker: Option<usize>,
    ) -> Result<()> {
        let inst = self
            .instances
            .get_mut(spec.instance.0 as usize)
            .ok_or(Error::Unknown { kind: "runtime instance", id: spec.instance.0 as u64 })?;
        inst.submitted += 1;
        let preds = self.graph.register(id, &spec.accesses, parent, &spec.label)?;
        self.tasks.insert(
            id,
            TaskSlot {
                kind: TaskKind::User,
                instance: spec.instance,
                future: Some(future),
                request: None,
                worker: None,
            },
        );
        self.alive_user += 1;
        self.task_instance.insert(id, spec.instance);
        if parent.is_some() {
            self.task_iteration.insert(id, self.current_iteration);
        }
        self.log(worker, id, Transition::Create, Provenance::Task);
        if preds.is_empty() {
            self.log(None, id, Transition::Ready, Provenance::Sched);
            self.push_ready(id);
        }
        Ok(())
    }

    pub fn add_service_task(&mut self, id: TaskId, future: TaskFuture) {
        self.tasks.insert(
            id,
            TaskSlot {
                kind: TaskKind::Poller,
                instance: InstanceId::MAIN,
                future: Some(future),
                request: None,
                worker: None,
            },
        );
    }

    pub fn mark_iteration(&mut self, task: TaskId, k: u32) {
        self.current_iteration = k;
        let now = self.now();
        self.iteration_marks.push((k, now));
        let w = self.worker_of(task);
        self.log(w, task, Transition::Iter, Provenance::Task);
    }

    /// Dispatch bookkeeping when `task` is picked by worker `w`.
    pub fn start(&mut self, task: TaskId, w: usize) -> Result<()> {
        if self.is_user(task) {
            self.graph.mark_running(task)?;
        }
        self.tasks.get_mut(&task).expect("dispatched task has a slot").worker = Some(w);
        self.log(Some(w), task, Transition::Start, Provenance::Sched);
        Ok(())
    }

    pub fn arm_token(&mut self, task: TaskId) -> ResumeToken {
        self.next_token += 1;
        self.tokens.insert(self.next_token, TokenState::Armed);
        ResumeToken {
            id: self.next_token,
            task,
        }
    }

    pub fn resume(&mut self, tok: ResumeToken, prov: Provenance, worker: Option<usize>) -> Result<()> {
        let state = self
            .tokens
            .get_mut(&tok.id)
            .ok_or(Error::Unknown { kind: "resume token", id: tok.id })?;
        match *state {
            TokenState::Armed => {
                *state = TokenState::Permitted(prov);
                Ok(())
            }
            TokenState::Parked => {
                *state = TokenState::Consumed;
                if self.is_user(tok.task) {
                    self.graph.mark_resumed(tok.task)?;
                }
                self.log(worker, tok.task, Transition::Resume, prov);
                self.push_ready(tok.task);
                Ok(())
            }
            TokenState::Permitted(_) | TokenState::Consumed => {
                Err(Error::contract(format!("resume token {} of task {} already used", tok.id, tok.task)))
            }
        }
    }

    /// Engine side of a suspend request issued by the task on worker `w`.
    pub fn park(&mut self, tok: ResumeToken, w: usize) -> Result<()> {
        let state = self
            .tokens
            .get_mut(&tok.id)
            .ok_or(Error::Unknown { kind: "resume token", id: tok.id })?;
        let user = self.tasks.get(&tok.task).is_some_and(|s| s.kind == TaskKind::User);
        match *state {
            TokenState::Armed => {
                *state = TokenState::Parked;
                if user {
                    self.graph.mark_suspended(tok.task)?;
                }
                self.log(Some(w), tok.task, Transition::Suspend, Provenance::Task);
                Ok(())
            }
            TokenState::Permitted(prov) => {
                *state = TokenState::Consumed;
                if user {
                    self.graph.mark_suspended(tok.task)?;
                    self.graph.mark_resumed(tok.task)?;
                }
                self.log(Some(w), tok.task, Transition::Suspend, Provenance::Task);
                self.log(None, tok.task, Transition::Resume, prov);
                self.push_ready(tok.task);
                Ok(())
            }
            TokenState::Parked | TokenState::Consumed => {
                Err(Error::contract(format!("task {} suspended on a spent token", tok.task)))
            }
        }
    }

    pub fn yield_task(&mut self, task: TaskId, w: usize) -> Result<()> {
        if self.is_user(task) {
            self.graph.mark_yielded(task)?;
        }
        self.log(Some(w), task, Transition::Yield, Provenance::Task);
        self.push_ready(task);
        Ok(())
    }

    pub fn sleep_task(&mut self, task: TaskId, until: VTime, w: usize) {
        self.log(Some(w), task, Transition::Sleep, Provenance::Task);
        self.add_timer(until, Timer::Requeue(task));
    }

    pub fn fire_timer(&mut self, timer: Timer) -> Result<()> {
        match timer {
            Timer::Requeue(task) => {
                self.log(None, task, Transition::Wake, Provenance::Timer);
                self.push_ready(task);
                Ok(())
            }
            Timer::Resume(tok) => self.resume(tok, Provenance::Timer, None),
        }
    }

    pub fn finish_body(&mut self, task: TaskId, w: usize) -> Result<()> {
        let slot = self.tasks.get(&task).ok_or(Error::Unknown { kind: "task", id: task.0 })?;
        if slot.kind == TaskKind::Poller {
            return Err(Error::Assertion("polling task returned".into()));
        }
        while let Some(stream) = self.ta.pool.held_by(task) {
            if self.strict_queue_leaks {
                return Err(Error::contract(format!(
                    "task {task} finished while holding stream {}",
                    stream.0
                )));
            }
            self.ta_return_queue(task, stream, Some(w))?;
        }
        self.log(Some(w), task, Transition::BodyEnd, Provenance::Task);
        self.stats.tasks_executed += 1;
        self.tasks.remove(&task);
        match self.graph.notify_body_finished(task)? {
            ReleaseDecision::Released(ready) => self.release(task, ready, Some(w), Provenance::Task),
            ReleaseDecision::Deferred(_) => Ok(()),
        }
    }

    /// Task entered `finished`: surface its ready successors and wake a
    /// parent blocked in taskwait.
    pub fn release(&mut self, task: TaskId, ready: Vec<TaskId>, worker: Option<usize>, prov: Provenance) -> Result<()> {
        self.log(worker, task, Transition::Finish, prov);
        self.alive_user -= 1;
        if let Some(inst) = self.task_instance.remove(&task) {
            self.instances[inst.0 as usize].completed += 1;
        }
        for r in ready {
            self.log(None, r, Transition::Ready, Provenance::Deps);
            self.push_ready(r);
        }
        let parent = self.graph.get(task).and_then(|t| t.parent);
        if let Some(p) = parent {
            if self.graph.taskwait_satisfied(Some(p)) {
                if let Some(tok) = self.taskwaiters.remove(&p) {
                    self.resume(tok, Provenance::Deps, worker)?;
                }
            }
        }
        Ok(())
    }

    /// Registers a taskwait of `task`; `None` when there is nothing to wait for.
    pub fn begin_taskwait(&mut self, task: TaskId) -> Result<Option<ResumeToken>> {
        self.ensure_running(task)?;
        if self.graph.taskwait_satisfied(Some(task)) {
            return Ok(None);
        }
        let tok = self.arm_token(task);
        self.taskwaiters.insert(task, tok);
        Ok(Some(tok))
    }

    pub fn instance_of(&self, task: TaskId) -> InstanceId {
        self.tasks.get(&task).map_or(InstanceId::MAIN, |s| s.instance)
    }

    pub fn describe_stuck(&self) -> String {
        let mut stuck: Vec<_> = self
            .graph
            .tasks()
            .filter(|t| t.state != crate::depsys::TaskState::Finished)
            .map(|t| format!("{}:{}:{}", t.id, t.label, t.state))
            .collect();
        stuck.truncate(16);
        stuck.join(", ")
    }
}

pub(crate) struct Shared {
    pub core: Mutex<Core>,
    pub cv: Condvar,
    pub config: RuntimeConfig,
    pub arena: Arc<Arena>,
}

/// Everything a run produced.
#[derive(Debug)]
pub struct RunReport {
    pub log: RunLog,
    pub completion_log: Vec<CompletionRecord>,
    pub graph: DepGraph,
    pub task_iteration: BTreeMap<TaskId, u32>,
    pub iteration_marks: Vec<(u32, VTime)>,
    pub makespan: VTime,
    pub stats: RunStats,
    pub instances: Vec<InstanceStats>,
    pub workers: usize,
}

impl RunReport {
    /// DOT of the tasks created during iteration `k` (the root excluded).
    pub fn dot_for_iteration(&self, k: u32) -> String {
        self.graph
            .to_dot_filtered(|t| self.task_iteration.get(&t.id) == Some(&k))
    }

    pub fn audit(&self) -> AuditReport {
        audit(&self.log)
    }
}

/// A configured substrate, ready to run one root task.
pub struct Runtime {
    shared: Arc<Shared>,
}

impl Runtime {
    /// Starts a substrate of `config.workers` workers.
    pub fn new(config: RuntimeConfig) -> Result<Self> {
        config.validate()?;
        let arena = Arc::new(Arena::new(config.arena_capacity));
        let clock = match config.clock {
            ClockMode::Virtual => Clock::Virtual(VTime::ZERO),
            ClockMode::Real => Clock::Real(Instant::now()),
        };
        let core = Core {
            clock,
            graph: DepGraph::new(),
            tasks: HashMap::new(),
            next_task: 0,
            ready: VecDeque::new(),
            tokens: HashMap::new(),
            next_token: 0,
            taskwaiters: HashMap::new(),
            device: Device::new(arena.clone(), KernelRegistry::default(), config.device_cost),
            ta: TaState::new(config.queue_pool_cap),
            instances: vec![InstanceStats {
                name: "main".into(),
                ..Default::default()
            }],
            timers: BinaryHeap::new(),
            timer_seq: 0,
            log: RunLog::default(),
            alive_user: 0,
            task_instance: HashMap::new(),
            current_iteration: 0,
            iteration_marks: Vec::new(),
            task_iteration: BTreeMap::new(),
            failure: None,
            stats: RunStats::default(),
            poll_period: config.poll_period,
            strict_queue_leaks: config.strict_queue_leaks,
        };
        Ok(Runtime {
            shared: Arc::new(Shared {
                core: Mutex::new(core),
                cv: Condvar::new(),
                config,
                arena,
            }),
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.shared.config
    }

    pub fn arena(&self) -> Arc<Arena> {
        self.shared.arena.clone()
    }

    /// Registers a device kernel. Must happen before [`Runtime::run`].
    pub fn register_kernel(
        &self,
        name: &str,
        f: impl Fn(&Arena, &KernelArgs) + Send + Sync + 'static,
    ) -> KernelId {
        let mut core = self.shared.core.lock();
        let mut registry = core.device.kernels().clone();
        let id = registry.register(name, Arc::new(f));
        let cost = *core.device.cost_model();
        core.device = Device::new(self.shared.arena.clone(), registry, cost);
        id
    }

    /// Adds a runtime instance that submits to this substrate.
    pub fn add_instance(&self, name: &str) -> InstanceId {
        let mut core = self.shared.core.lock();
        core.instances.push(InstanceStats {
            name: name.into(),
            ..Default::default()
        });
        InstanceId(core.instances.len() as u32 - 1)
    }

    pub fn handle(&self) -> RuntimeHandle {
        RuntimeHandle {
            shared: self.shared.clone(),
        }
    }

    /// Runs `root` as the first task and returns once every task finished.
    pub fn run<F, Fut>(self, label: &str, root: F) -> Result<RunReport>
    where
        F: FnOnce(TaskCtx) -> Fut,
        Fut: Future<Output = Result<()>> + Send + 'static,
    {
        let shared = self.shared;
        {
            let mut core = shared.core.lock();
            let id = core.alloc_task_id();
            let ctx = TaskCtx::new(shared.clone(), id);
            let fut: TaskFuture = Box::pin(root(ctx));
            core.register_task(id, None, TaskSpec::new(label), fut, None)?;
            let poller = core.alloc_task_id();
            core.add_service_task(poller, crate::talib::poller_body(TaskCtx::new(shared.clone(), poller)));
            core.ta.set_poller(poller);
        }
        match shared.config.clock {
            ClockMode::Virtual => virt::VirtualEngine::new(shared.clone()).run()?,
            ClockMode::Real => real::RealEngine::new(shared.clone()).run()?,
        }
        let mut core = shared.core.lock();
        let makespan = core.log.end_time();
        core.stats.queue_checkouts = core.ta.pool.checkouts();
        core.stats.queue_returns = core.ta.pool.returns();
        core.stats.streams_created = core.device.stream_count();
        Ok(RunReport {
            log: std::mem::take(&mut core.log),
            completion_log: core.device.take_completion_log(),
            graph: std::mem::take(&mut core.graph),
            task_iteration: std::mem::take(&mut core.task_iteration),
            iteration_marks: std::mem::take(&mut core.iteration_marks),
            makespan,
            stats: core.stats.clone(),
            instances: core.instances.clone(),
            workers: shared.config.workers,
        })
    }
}

/// Cloneable access for code outside task bodies (other OS threads).
#[derive(Clone)]
pub struct RuntimeHandle {
    shared: Arc<Shared>,
}

impl RuntimeHandle {
    pub fn resume(&self, tok: ResumeToken) -> Result<()> {
        let mut core = self.shared.core.lock();
        core.resume(tok, Provenance::External, None)?;
        drop(core);
        self.shared.cv.notify_all();
        Ok(())
    }
}
