//! Task-aware device layer.
//!
//! Lets a task issue asynchronous device work without holding a worker:
//!
//! * [`TaskCtx::ta_synchronize_event_async`] binds an event to the calling
//!   task. The task's body may return right away; its dependencies are
//!   released only once every bound event has completed.
//! * [`TaskCtx::ta_wait_blocking`] replaces a blocking wait: the task
//!   suspends and the worker runs other tasks until the event completes.
//! * [`TaskCtx::ta_get_queue`] / [`TaskCtx::ta_return_queue`] hand out
//!   streams from a bounded pool.
//!
//! Completions are noticed by a polling task that runs on the substrate
//! like any other task, ticking on a fixed period while events are in
//! flight and parking while the registry is empty.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::depsys::TaskId;
use crate::error::{Error, Result};
use crate::simdev::{Device, EventId, EventState, StreamId};
use crate::taskrt::{Core, DeferredRelease, Provenance, ResumeToken, TaskCtx, TaskFuture, Timer};
use crate::time::VTime;

/// Bounded pool of device streams.
#[derive(Debug)]
pub struct QueuePool {
    cap: usize,
    streams: Vec<StreamId>,
    holders: BTreeMap<StreamId, TaskId>,
    waiters: VecDeque<(TaskId, ResumeToken)>,
    handoff: HashMap<TaskId, StreamId>,
    checkouts: u64,
    returns: u64,
}

impl QueuePool {
    pub fn new(cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::invalid("queue pool capacity must be at least 1"));
        }
        Ok(QueuePool {
            cap,
            streams: Vec::new(),
            holders: BTreeMap::new(),
            waiters: VecDeque::new(),
            handoff: HashMap::new(),
            checkouts: 0,
            returns: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn size(&self) -> usize {
        self.streams.len()
    }

    pub fn outstanding(&self) -> usize {
        self.holders.len()
    }

    pub fn checkouts(&self) -> u64 {
        self.checkouts
    }

    pub fn returns(&self) -> u64 {
        self.returns
    }

    pub fn holder(&self, s: StreamId) -> Option<TaskId> {
        self.holders.get(&s).copied()
    }

    pub fn held_by(&self, task: TaskId) -> Option<StreamId> {
        self.holders.iter().find(|(_, t)| **t == task).map(|(s, _)| *s)
    }

    /// Hands a stream to `task`, or `None` when every stream is held and
    /// the pool is at capacity. Free streams with nothing in flight are
    /// preferred so that independent tasks do not serialize on a busy
    /// stream; the pool grows before reusing a busy one.
    pub fn checkout(&mut self, task: TaskId, device: &mut Device) -> Option<StreamId> {
        let free: Vec<StreamId> = self
            .streams
            .iter()
            .copied()
            .filter(|s| !self.holders.contains_key(s))
            .collect();
        let idle = free.iter().copied().find(|s| device.stream_idle(*s).unwrap_or(false));
        let pick = match idle {
            Some(s) => s,
            None if self.streams.len() < self.cap => {
                let s = device.create_stream();
                self.streams.push(s);
                s
            }
            None => *free.first()?,
        };
        self.holders.insert(pick, task);
        self.checkouts += 1;
        Some(pick)
    }

    /// Queues `task` until a stream is returned.
    pub fn wait(&mut self, task: TaskId, tok: ResumeToken) {
        self.waiters.push_back((task, tok));
    }

    /// Returns `stream`. If a task is waiting, the stream passes straight
    /// to the oldest waiter, whose token is returned for resumption.
    pub fn give_back(&mut self, task: TaskId, stream: StreamId) -> Result<Option<ResumeToken>> {
        match self.holders.get(&stream) {
            Some(t) if *t == task => {}
            Some(t) => {
                return Err(Error::contract(format!(
                    "task {task} returned stream {} held by task {t}",
                    stream.0
                )))
            }
            None => return Err(Error::contract(format!("task {task} returned stream {} it does not hold", stream.0))),
        }
        self.returns += 1;
        match self.waiters.pop_front() {
            Some((waiter, tok)) => {
                self.holders.insert(stream, waiter);
                self.handoff.insert(waiter, stream);
                self.checkouts += 1;
                Ok(Some(tok))
            }
            None => {
                self.holders.remove(&stream);
                Ok(None)
            }
        }
    }

    fn take_handoff(&mut self, task: TaskId) -> Option<StreamId> {
        self.handoff.remove(&task)
    }
}

/// What resolving a registry entry does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    /// Decrement the bound task's pending-operation counter.
    Bind(TaskId),
    /// Resume a task suspended in a blocking-wait replacement.
    Wake(ResumeToken),
}

/// Events the polling task is watching.
#[derive(Debug, Default)]
pub struct InFlightRegistry {
    entries: Vec<(EventId, Resolution)>,
}

impl InFlightRegistry {
    pub fn register(&mut self, ev: EventId, r: Resolution) {
        self.entries.push((ev, r));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and returns every entry whose event is complete, in
    /// registration order.
    pub fn take_complete(&mut self, device: &Device) -> Vec<(EventId, Resolution)> {
        let mut done = Vec::new();
        self.entries.retain(|&(ev, r)| {
            if device.query(ev) == Ok(EventState::Complete) {
                done.push((ev, r));
                false
            } else {
                true
            }
        });
        done
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PollerState {
    /// Created but never run.
    Dormant,
    /// Woken or about to be woken by a timer.
    Scheduled,
    Parked(ResumeToken),
}

#[derive(Debug)]
pub(crate) struct TaState {
    pub pool: QueuePool,
    pub registry: InFlightRegistry,
    poller: Option<TaskId>,
    state: PollerState,
    last_tick: Option<VTime>,
    /// Latest completion among resolved events per still-pending task.
    bound_done: HashMap<TaskId, VTime>,
}

impl TaState {
    pub fn new(cap: usize) -> Self {
        TaState {
            // capacity is validated with the runtime config
            pool: QueuePool::new(cap.max(1)).expect("positive capacity"),
            registry: InFlightRegistry::default(),
            poller: None,
            state: PollerState::Dormant,
            last_tick: None,
            bound_done: HashMap::new(),
        }
    }

    pub fn set_poller(&mut self, id: TaskId) {
        self.poller = Some(id);
    }

    pub fn is_poller(&self, id: TaskId) -> bool {
        self.poller == Some(id)
    }
}

/// First multiple of `period` at or after `now` and after `last`.
fn next_grid_point(now: VTime, last: Option<VTime>, period: VTime) -> VTime {
    let at = now.ceil_to(period);
    match last {
        Some(l) if at <= l => VTime((l.0 / period.0 + 1) * period.0),
        _ => at,
    }
}

enum PollerStep {
    Park(ResumeToken),
    Sleep(VTime),
}

impl Core {
    fn ensure_poller_scheduled(&mut self) {
        let Some(poller) = self.ta.poller else {
            return;
        };
        let at = next_grid_point(self.now(), self.ta.last_tick, self.poll_period);
        match self.ta.state {
            PollerState::Scheduled => return,
            PollerState::Dormant => self.add_timer(at, Timer::Requeue(poller)),
            PollerState::Parked(tok) => self.add_timer(at, Timer::Resume(tok)),
        }
        self.ta.state = PollerState::Scheduled;
    }

    /// Resolves every complete registered event. Returns how many.
    pub(crate) fn polling_tick(&mut self, worker: Option<usize>) -> Result<usize> {
        let now = self.now();
        if self.device.processed_until() < now {
            self.device.advance_to(now);
        }
        let done = self.ta.registry.take_complete(&self.device);
        for &(ev, r) in &done {
            match r {
                Resolution::Bind(task) => {
                    let at = self.device.completion_time(ev)?;
                    let last = self.ta.bound_done.entry(task).or_default();
                    *last = (*last).max(at);
                    if let Some(ready) = self.graph.complete_pending_op(task)? {
                        let last_event = self.ta.bound_done.remove(&task).unwrap_or_default();
                        self.stats.deferred_releases.push(DeferredRelease {
                            task,
                            last_event,
                            released: now,
                        });
                        self.release(task, ready, worker, Provenance::Poll)?;
                    }
                }
                Resolution::Wake(tok) => self.resume(tok, Provenance::Poll, worker)?,
            }
        }
        self.stats.events_polled += done.len() as u64;
        if !done.is_empty() {
            self.stats.poll_hits.push((now, done.len()));
        }
        self.stats.poll_ticks += 1;
        self.ta.last_tick = Some(now);
        Ok(done.len())
    }

    fn poller_step(&mut self, me: TaskId) -> Result<PollerStep> {
        let w = self.worker_of(me);
        self.polling_tick(w)?;
        if self.ta.registry.is_empty() {
            let tok = self.arm_token(me);
            self.ta.state = PollerState::Parked(tok);
            Ok(PollerStep::Park(tok))
        } else {
            self.ta.state = PollerState::Scheduled;
            let now = self.now();
            Ok(PollerStep::Sleep(VTime((now.0 / self.poll_period.0 + 1) * self.poll_period.0)))
        }
    }

    pub(crate) fn ta_return_queue(&mut self, task: TaskId, stream: StreamId, worker: Option<usize>) -> Result<()> {
        if let Some(tok) = self.ta.pool.give_back(task, stream)? {
            self.resume(tok, Provenance::Sched, worker)?;
        }
        Ok(())
    }
}

pub(crate) fn poller_body(ctx: TaskCtx) -> TaskFuture {
    Box::pin(async move {
        loop {
            let step = ctx.shared().core.lock().poller_step(ctx.id())?;
            match step {
                PollerStep::Park(tok) => ctx.park(tok).await,
                PollerStep::Sleep(t) => ctx.sleep_until(t).await,
            }
        }
    })
}

impl TaskCtx {
    /// Checks a stream out of the pool, suspending while none is free.
    pub async fn ta_get_queue(&self) -> Result<StreamId> {
        let tok = {
            let mut guard = self.shared().core.lock();
            let core = &mut *guard;
            core.ensure_running(self.id())?;
            if let Some(s) = core.ta.pool.checkout(self.id(), &mut core.device) {
                return Ok(s);
            }
            let tok = core.arm_token(self.id());
            core.ta.pool.wait(self.id(), tok);
            tok
        };
        self.park(tok).await;
        self.shared()
            .core
            .lock()
            .ta
            .pool
            .take_handoff(self.id())
            .ok_or_else(|| Error::Assertion(format!("task {} resumed without a stream", self.id())))
    }

    pub fn ta_return_queue(&self, stream: StreamId) -> Result<()> {
        let mut core = self.shared().core.lock();
        let w = core.worker_of(self.id());
        core.ta_return_queue(self.id(), stream, w)?;
        drop(core);
        self.shared().cv.notify_all();
        Ok(())
    }

    /// Defers this task's dependency release until `ev` completes.
    /// Never blocks; an already complete event is resolved by the next
    /// poll like any other.
    pub fn ta_synchronize_event_async(&self, ev: EventId) -> Result<()> {
        let mut core = self.shared().core.lock();
        core.device.query(ev)?;
        core.ensure_running(self.id())?;
        core.graph.add_pending_op(self.id())?;
        core.ta.registry.register(ev, Resolution::Bind(self.id()));
        core.ensure_poller_scheduled();
        drop(core);
        self.shared().cv.notify_all();
        Ok(())
    }

    /// Suspends until `ev` completes, leaving the worker to other tasks.
    pub async fn ta_wait_blocking(&self, ev: EventId) -> Result<()> {
        let tok = {
            let mut core = self.shared().core.lock();
            core.device.query(ev)?;
            core.ensure_running(self.id())?;
            let tok = core.arm_token(self.id());
            core.ta.registry.register(ev, Resolution::Wake(tok));
            core.ensure_poller_scheduled();
            tok
        };
        self.shared().cv.notify_all();
        self.park(tok).await;
        Ok(())
    }

    /// Waits for everything enqueued so far on `stream`, suspending.
    pub async fn ta_stream_synchronize(&self, stream: StreamId) -> Result<()> {
        let last = self.shared().core.lock().device.last_event(stream)?;
        match last {
            Some(ev) => self.ta_wait_blocking(ev).await,
            None => Ok(()),
        }
    }
}
