//! OS-thread engine.
//!
//! One thread per worker pulls from the shared ready queue, and a service
//! thread completes device ops and fires timers as wall-clock deadlines
//! pass. Compute requests burn CPU for the requested number of
//! microseconds, so oversubscribed legacy pools genuinely slow down.

use std::collections::VecDeque;
use std::sync::{Arc, OnceLock};
use std::task::{Context, Poll, Waker};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::{Core, InstanceId, Provenance, Request, Shared, SubstrateMode, TaskFuture, Transition};
use crate::depsys::TaskId;
use crate::error::{Error, Result};
use crate::simdev::EventState;
use crate::time::{VTime, TICKS_PER_UNIT};

/// Longest a sleeping thread waits before rechecking shared state.
const MAX_NAP: Duration = Duration::from_millis(2);

fn spins_per_us() -> f64 {
    static CAL: OnceLock<f64> = OnceLock::new();
    *CAL.get_or_init(|| {
        let n = 2_000_000u64;
        let t0 = Instant::now();
        spin(n);
        let us = t0.elapsed().as_secs_f64() * 1e6;
        (n as f64 / us.max(1.0)).max(1.0)
    })
}

fn spin(n: u64) -> u64 {
    let mut x = 0x9e37_79b9_7f4a_7c15u64;
    for i in 0..n {
        x = std::hint::black_box(x.rotate_left(5) ^ i).wrapping_mul(0x100_0000_01b3);
    }
    x
}

/// Burns CPU for about `cost` when the thread has a core to itself.
pub(crate) fn burn(cost: VTime) {
    let us = cost.0 as f64 / TICKS_PER_UNIT as f64;
    std::hint::black_box(spin((us * spins_per_us()) as u64));
}

struct Job {
    remaining: Mutex<usize>,
    done: Condvar,
}

struct PoolItem {
    cost: VTime,
    job: Arc<Job>,
}

struct LegacyPool {
    queue: Mutex<(VecDeque<PoolItem>, bool)>,
    cv: Condvar,
}

pub(crate) struct RealEngine {
    shared: Arc<Shared>,
    done: Mutex<bool>,
    pools: Vec<Arc<LegacyPool>>,
}

impl RealEngine {
    pub fn new(shared: Arc<Shared>) -> Self {
        RealEngine {
            shared,
            done: Mutex::new(false),
            pools: Vec::new(),
        }
    }

    fn is_done(&self) -> bool {
        *self.done.lock()
    }

    fn stop(&self, core: &mut Core, err: Option<Error>) {
        if let Some(e) = err {
            core.failure.get_or_insert(e);
        }
        *self.done.lock() = true;
        self.shared.cv.notify_all();
    }

    pub fn run(mut self) -> Result<()> {
        spins_per_us();
        let instances = self.shared.core.lock().instances.len();
        if self.shared.config.mode == SubstrateMode::Uncoordinated {
            self.pools = (0..instances)
                .map(|_| {
                    Arc::new(LegacyPool {
                        queue: Mutex::new((VecDeque::new(), false)),
                        cv: Condvar::new(),
                    })
                })
                .collect();
        }
        let this = &self;
        thread::scope(|s| {
            for pool in &this.pools {
                for _ in 0..this.shared.config.pool_threads() {
                    let pool = pool.clone();
                    let shared = this.shared.clone();
                    s.spawn(move || pool_thread(&shared, &pool));
                }
            }
            for w in 0..this.shared.config.workers {
                s.spawn(move || this.worker(w));
            }
            s.spawn(move || this.service());
            // wait for the worker side to finish, then release the pools
            let mut core = this.shared.core.lock();
            while !this.is_done() {
                this.shared.cv.wait_for(&mut core, MAX_NAP);
            }
            drop(core);
            for pool in &this.pools {
                pool.queue.lock().1 = true;
                pool.cv.notify_all();
            }
        });
        match self.shared.core.lock().failure.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn service(&self) {
        let mut core = self.shared.core.lock();
        loop {
            if self.is_done() {
                return;
            }
            let now = core.now();
            let mut woke = !core.device.advance_to(now).is_empty();
            while let Some(t) = core.pop_due_timer(now) {
                if let Err(e) = core.fire_timer(t) {
                    self.stop(&mut core, Some(e));
                    return;
                }
                woke = true;
            }
            if woke {
                self.shared.cv.notify_all();
            }
            let next = [core.next_timer(), core.device.next_deadline()].into_iter().flatten().min();
            let nap = next.map_or(MAX_NAP, |t| {
                let ns = t.saturating_sub(core.now()).0 / (TICKS_PER_UNIT / 1000);
                Duration::from_nanos(ns).min(MAX_NAP)
            });
            if !nap.is_zero() {
                self.shared.cv.wait_for(&mut core, nap);
            }
        }
    }

    fn worker(&self, w: usize) {
        let mut core = self.shared.core.lock();
        loop {
            if self.is_done() {
                return;
            }
            let Some(task) = core.ready.pop_front() else {
                self.shared.cv.wait_for(&mut core, MAX_NAP);
                continue;
            };
            let fut = core.start(task, w).and_then(|_| {
                core.tasks
                    .get_mut(&task)
                    .and_then(|s| s.future.take())
                    .ok_or_else(|| Error::Assertion(format!("task {task} dispatched without a body")))
            });
            let res = match fut {
                Ok(fut) => {
                    drop(core);
                    let r = self.drive(w, task, fut);
                    core = self.shared.core.lock();
                    r
                }
                Err(e) => Err(e),
            };
            if let Err(e) = res {
                self.stop(&mut core, Some(e));
                return;
            }
            if core.alive_user == 0 {
                self.stop(&mut core, None);
                return;
            }
        }
    }

    /// Runs `task` on worker `w` until it leaves the worker.
    fn drive(&self, w: usize, task: TaskId, mut fut: TaskFuture) -> Result<()> {
        let mut cx = Context::from_waker(Waker::noop());
        loop {
            let res = fut.as_mut().poll(&mut cx);
            let mut core = self.shared.core.lock();
            let req = match res {
                Poll::Ready(r) => {
                    r?;
                    core.finish_body(task, w)?;
                    drop(core);
                    self.shared.cv.notify_all();
                    return Ok(());
                }
                Poll::Pending => core
                    .tasks
                    .get_mut(&task)
                    .and_then(|s| s.request.take())
                    .ok_or_else(|| Error::Assertion(format!("task {task} awaited something outside the runtime")))?,
            };
            match req {
                Request::Compute(c) => {
                    drop(core);
                    burn(c);
                }
                Request::BlockOnEvent(ev) => {
                    core.log(Some(w), task, Transition::Block, Provenance::Task);
                    loop {
                        let now = core.now();
                        core.device.advance_to(now);
                        if core.device.query(ev)? == EventState::Complete {
                            break;
                        }
                        self.shared.cv.wait_for(&mut core, MAX_NAP);
                    }
                    core.log(Some(w), task, Transition::Unblock, Provenance::Device);
                }
                Request::LegacyRun(items) => {
                    core.log(Some(w), task, Transition::Block, Provenance::Task);
                    let InstanceId(inst) = core.instance_of(task);
                    drop(core);
                    let job = Arc::new(Job {
                        remaining: Mutex::new(items.len()),
                        done: Condvar::new(),
                    });
                    let pool = &self.pools[inst as usize];
                    {
                        let mut q = pool.queue.lock();
                        q.0.extend(items.into_iter().map(|cost| PoolItem { cost, job: job.clone() }));
                    }
                    pool.cv.notify_all();
                    let mut left = job.remaining.lock();
                    while *left > 0 {
                        job.done.wait(&mut left);
                    }
                    drop(left);
                    self.shared.core.lock().log(Some(w), task, Transition::Unblock, Provenance::Pool);
                }
                other => {
                    let slot = core.tasks.get_mut(&task).expect("running task keeps its slot");
                    slot.future = Some(fut);
                    slot.worker = None;
                    match other {
                        Request::Yield => core.yield_task(task, w)?,
                        Request::Suspend(tok) => core.park(tok, w)?,
                        Request::Sleep(until) => core.sleep_task(task, until, w),
                        _ => unreachable!(),
                    }
                    drop(core);
                    self.shared.cv.notify_all();
                    return Ok(());
                }
            }
        }
    }
}

fn pool_thread(shared: &Shared, pool: &LegacyPool) {
    loop {
        let item = {
            let mut q = pool.queue.lock();
            loop {
                if let Some(item) = q.0.pop_front() {
                    break item;
                }
                if q.1 {
                    return;
                }
                pool.cv.wait(&mut q);
            }
        };
        let t0 = Instant::now();
        burn(item.cost);
        let took = VTime(t0.elapsed().as_nanos() as u64 * (TICKS_PER_UNIT / 1000));
        {
            let mut core = shared.core.lock();
            core.stats.legacy_items += 1;
            core.stats.legacy_delay += took.saturating_sub(item.cost);
        }
        let mut left = item.job.remaining.lock();
        *left -= 1;
        if *left == 0 {
            item.job.done.notify_all();
        }
    }
}
