//! Deterministic discrete-event engine.
//!
//! Time only moves when nothing else can happen at the current instant:
//! every due timer has fired, every device op due has completed, every
//! worker that can make progress has been polled, and every idle worker
//! has taken a task if one was ready. CPU work (task computes and legacy
//! pool items) progresses as a fluid at the rate given by the contention
//! model.

use std::collections::VecDeque;
use std::sync::Arc;
use std::task::{Context, Poll, Waker};

use super::{Core, InstanceId, Provenance, Request, Shared, SubstrateMode, Transition};
use crate::depsys::TaskId;
use crate::error::{Error, Result};
use crate::simdev::{EventId, EventState};
use crate::time::VTime;

/// Remaining work below this many ticks counts as done.
const EPS: f64 = 1e-6;

#[derive(Debug)]
enum Worker {
    Idle,
    /// Holds a task whose future must be polled at the current instant.
    NeedsPoll(TaskId),
    Computing { task: TaskId, remaining: f64 },
    BlockedOnEvent { task: TaskId, event: EventId },
    BlockedOnPool { task: TaskId },
}

#[derive(Debug)]
struct Item {
    job: usize,
    cost: VTime,
}

#[derive(Debug)]
struct PoolThread {
    item: Option<(Item, f64, VTime)>,
}

#[derive(Debug)]
struct Pool {
    queue: VecDeque<Item>,
    threads: Vec<PoolThread>,
}

#[derive(Debug)]
struct Job {
    worker: usize,
    outstanding: usize,
}

pub(crate) struct VirtualEngine {
    shared: Arc<Shared>,
    workers: Vec<Worker>,
    pools: Vec<Pool>,
    jobs: Vec<Job>,
}

impl VirtualEngine {
    pub fn new(shared: Arc<Shared>) -> Self {
        let w = shared.config.workers;
        VirtualEngine {
            shared,
            workers: (0..w).map(|_| Worker::Idle).collect(),
            pools: Vec::new(),
            jobs: Vec::new(),
        }
    }

    pub fn run(mut self) -> Result<()> {
        let threads = self.shared.config.pool_threads();
        let instances = self.shared.core.lock().instances.len();
        self.pools = (0..instances)
            .map(|_| Pool {
                queue: VecDeque::new(),
                threads: (0..threads).map(|_| PoolThread { item: None }).collect(),
            })
            .collect();
        let shared = self.shared.clone();
        loop {
            self.settle()?;
            let mut core = shared.core.lock();
            if core.alive_user == 0 {
                return Ok(());
            }
            let now = core.now();
            let rate = self.rate();
            let mut next = [core.next_timer(), core.device.next_deadline()]
                .into_iter()
                .flatten()
                .min();
            if let Some(dt) = self.next_fluid_completion(rate) {
                next = Some(next.map_or(now + dt, |n| n.min(now + dt)));
            }
            let Some(next) = next else {
                return Err(Error::Deadlock(format!(
                    "no pending events at {now}; unfinished: {}",
                    core.describe_stuck()
                )));
            };
            let next = next.max(now);
            self.progress(rate, (next - now).0 as f64);
            core.clock = super::Clock::Virtual(next);
        }
    }

    fn runnable_threads(&self) -> usize {
        let computing = self
            .workers
            .iter()
            .filter(|w| matches!(w, Worker::Computing { .. }))
            .count();
        let legacy: usize = self
            .pools
            .iter()
            .map(|p| p.threads.iter().filter(|t| t.item.is_some()).count())
            .sum();
        computing + legacy
    }

    fn rate(&self) -> f64 {
        match self.shared.config.mode {
            SubstrateMode::Unified => 1.0,
            SubstrateMode::Uncoordinated => self.shared.config.contention.rate(self.runnable_threads()),
        }
    }

    /// Ticks until the first fluid activity finishes at `rate`.
    fn next_fluid_completion(&self, rate: f64) -> Option<VTime> {
        let computing = self.workers.iter().filter_map(|w| match w {
            Worker::Computing { remaining, .. } => Some(*remaining),
            _ => None,
        });
        let legacy = self
            .pools
            .iter()
            .flat_map(|p| p.threads.iter().filter_map(|t| t.item.as_ref().map(|(_, rem, _)| *rem)));
        computing
            .chain(legacy)
            .min_by(f64::total_cmp)
            .map(|rem| VTime(((rem - EPS) / rate).ceil().max(1.0) as u64))
    }

    fn progress(&mut self, rate: f64, dt: f64) {
        let done = rate * dt;
        for w in &mut self.workers {
            if let Worker::Computing { remaining, .. } = w {
                *remaining -= done;
            }
        }
        for p in &mut self.pools {
            for t in &mut p.threads {
                if let Some((_, rem, _)) = &mut t.item {
                    *rem -= done;
                }
            }
        }
    }

    /// Drives everything that can happen at the current instant.
    fn settle(&mut self) -> Result<()> {
        let shared = self.shared.clone();
        loop {
            let mut changed = false;
            {
                let mut core = shared.core.lock();
                let now = core.now();
                while let Some(t) = core.pop_due_timer(now) {
                    core.fire_timer(t)?;
                    changed = true;
                }
                core.device.advance_to(now);
                changed |= self.finish_fluid(&mut core)?;
                for (w, state) in self.workers.iter_mut().enumerate() {
                    if let Worker::BlockedOnEvent { task, event } = *state {
                        if core.device.query(event)? == EventState::Complete {
                            core.log(Some(w), task, Transition::Unblock, Provenance::Device);
                            *state = Worker::NeedsPoll(task);
                            changed = true;
                        }
                    }
                }
            }
            for w in 0..self.workers.len() {
                if let Worker::NeedsPoll(task) = self.workers[w] {
                    self.poll_worker(w, task)?;
                    changed = true;
                }
            }
            {
                let mut core = shared.core.lock();
                for w in 0..self.workers.len() {
                    if matches!(self.workers[w], Worker::Idle) {
                        if let Some(task) = core.ready.pop_front() {
                            core.start(task, w)?;
                            self.workers[w] = Worker::NeedsPoll(task);
                            changed = true;
                        }
                    }
                }
                self.dispatch_legacy(&core);
            }
            if !changed {
                return Ok(());
            }
        }
    }

    fn finish_fluid(&mut self, core: &mut Core) -> Result<bool> {
        let mut changed = false;
        for w in &mut self.workers {
            if let Worker::Computing { task, remaining } = *w {
                if remaining <= EPS {
                    *w = Worker::NeedsPoll(task);
                    changed = true;
                }
            }
        }
        let now = core.now();
        for p in &mut self.pools {
            for t in &mut p.threads {
                let Some((item, rem, started)) = t.item.take() else {
                    continue;
                };
                if rem > EPS {
                    t.item = Some((item, rem, started));
                    continue;
                }
                changed = true;
                core.stats.legacy_items += 1;
                core.stats.legacy_delay += (now - started).saturating_sub(item.cost);
                let job = &mut self.jobs[item.job];
                job.outstanding -= 1;
                if job.outstanding == 0 {
                    let w = job.worker;
                    if let Worker::BlockedOnPool { task, .. } = self.workers[w] {
                        core.log(Some(w), task, Transition::Unblock, Provenance::Pool);
                        self.workers[w] = Worker::NeedsPoll(task);
                    }
                }
            }
        }
        Ok(changed)
    }

    fn dispatch_legacy(&mut self, core: &Core) {
        let now = core.now();
        for p in &mut self.pools {
            for t in &mut p.threads {
                if t.item.is_none() {
                    if let Some(item) = p.queue.pop_front() {
                        let work = item.cost.0 as f64;
                        t.item = Some((item, work, now));
                    }
                }
            }
        }
    }

    fn poll_worker(&mut self, w: usize, task: TaskId) -> Result<()> {
        let shared = self.shared.clone();
        let mut fut = {
            let mut core = shared.core.lock();
            let slot = core.tasks.get_mut(&task).ok_or(Error::Unknown { kind: "task", id: task.0 })?;
            slot.future.take().expect("polled task has a body")
        };
        let mut cx = Context::from_waker(Waker::noop());
        let res = fut.as_mut().poll(&mut cx);
        let mut core = shared.core.lock();
        match res {
            Poll::Ready(Ok(())) => {
                self.workers[w] = Worker::Idle;
                core.finish_body(task, w)
            }
            Poll::Ready(Err(e)) => Err(e),
            Poll::Pending => {
                let slot = core.tasks.get_mut(&task).expect("pending task keeps its slot");
                slot.future = Some(fut);
                let req = slot.request.take().ok_or_else(|| {
                    Error::Assertion(format!("task {task} awaited something outside the runtime"))
                })?;
                self.apply(&mut core, w, task, req)
            }
        }
    }

    fn apply(&mut self, core: &mut Core, w: usize, task: TaskId, req: Request) -> Result<()> {
        self.workers[w] = Worker::Idle;
        match req {
            Request::Compute(c) => {
                self.workers[w] = Worker::Computing {
                    task,
                    remaining: c.0 as f64,
                };
            }
            Request::Yield => core.yield_task(task, w)?,
            Request::Suspend(tok) => core.park(tok, w)?,
            Request::Sleep(until) => core.sleep_task(task, until, w),
            Request::BlockOnEvent(event) => {
                core.log(Some(w), task, Transition::Block, Provenance::Task);
                self.workers[w] = Worker::BlockedOnEvent { task, event };
            }
            Request::LegacyRun(items) => {
                core.log(Some(w), task, Transition::Block, Provenance::Task);
                let InstanceId(inst) = core.instance_of(task);
                let job = self.jobs.len();
                self.jobs.push(Job {
                    worker: w,
                    outstanding: items.len(),
                });
                let pool = &mut self.pools[inst as usize];
                pool.queue.extend(items.into_iter().map(|cost| Item { job, cost }));
                self.workers[w] = Worker::BlockedOnPool { task };
            }
        }
        if matches!(self.workers[w], Worker::Idle) {
            if let Some(slot) = core.tasks.get_mut(&task) {
                slot.worker = None;
            }
        }
        Ok(())
    }
}
