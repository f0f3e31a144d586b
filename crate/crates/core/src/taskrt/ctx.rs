use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};

use super::{InstanceId, Request, ResumeToken, RuntimeConfig, Shared, TaskFuture};
use crate::depsys::{AccessRegion, TaskId};
use crate::error::{Error, Result};
use crate::simdev::{Arena, DeviceOp, EventId, EventState, OpKind, StreamId};
use crate::taskrt::Provenance;
use crate::time::VTime;

/// What to create: a label for traces, the access annotations, and the
/// runtime instance that submits it.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub label: String,
    pub accesses: Vec<AccessRegion>,
    pub instance: InstanceId,
}

impl TaskSpec {
    pub fn new(label: impl Into<String>) -> Self {
        TaskSpec {
            label: label.into(),
            accesses: Vec::new(),
            instance: InstanceId::MAIN,
        }
    }

    pub fn access(mut self, region: AccessRegion) -> Self {
        self.accesses.push(region);
        self
    }

    pub fn accesses(mut self, regions: impl IntoIterator<Item = AccessRegion>) -> Self {
        self.accesses.extend(regions);
        self
    }

    pub fn instance(mut self, instance: InstanceId) -> Self {
        self.instance = instance;
        self
    }
}

/// Handle passed to every task body.
#[derive(Clone)]
pub struct TaskCtx {
    shared: Arc<Shared>,
    id: TaskId,
}

/// Posts a request on first poll and completes on the next one. The
/// engine only polls again once the request has been serviced.
struct Syscall<'a> {
    ctx: &'a TaskCtx,
    req: Option<Request>,
}

impl Future for Syscall<'_> {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        match self.req.take() {
            Some(req) => {
                let mut core = self.ctx.shared.core.lock();
                if let Some(slot) = core.tasks.get_mut(&self.ctx.id) {
                    slot.request = Some(req);
                }
                Poll::Pending
            }
            None => Poll::Ready(()),
        }
    }
}

impl TaskCtx {
    pub(crate) fn new(shared: Arc<Shared>, id: TaskId) -> Self {
        TaskCtx { shared, id }
    }

    fn syscall(&self, req: Request) -> Syscall<'_> {
        Syscall { ctx: self, req: Some(req) }
    }

    pub fn id(&self) -> TaskId {
        self.id
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.shared.arena
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.shared.config
    }

    pub fn now(&self) -> VTime {
        self.shared.core.lock().now()
    }

    pub(crate) fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    /// Creates a child task. Dependencies on earlier siblings are inferred
    /// from the access annotations.
    pub fn spawn<F, Fut>(&self, spec: TaskSpec, body: F) -> Result<TaskId>
    where
        F: FnOnce(TaskCtx) -> Fut,
        Fut: Future<Output = Result<()>> + Send + 'static,
    {
        let id = {
            let mut core = self.shared.core.lock();
            core.ensure_running(self.id)?;
            core.alloc_task_id()
        };
        let fut: TaskFuture = Box::pin(body(TaskCtx::new(self.shared.clone(), id)));
        let mut core = self.shared.core.lock();
        let w = core.worker_of(self.id);
        core.register_task(id, Some(self.id), spec, fut, w)?;
        drop(core);
        self.shared.cv.notify_all();
        Ok(id)
    }

    /// Occupies the worker for `cost` (virtual time, or a busy spin of
    /// that many microseconds in real mode).
    pub async fn compute(&self, cost: VTime) -> Result<()> {
        self.shared.core.lock().ensure_running(self.id)?;
        if cost > VTime::ZERO {
            self.syscall(Request::Compute(cost)).await;
        }
        Ok(())
    }

    /// Goes to the back of the ready queue.
    pub async fn yield_now(&self) -> Result<()> {
        self.shared.core.lock().ensure_running(self.id)?;
        self.syscall(Request::Yield).await;
        Ok(())
    }

    /// Arms a token for a later [`TaskCtx::suspend`]. A resume that
    /// arrives before the suspend is latched.
    pub fn prepare_suspend(&self) -> Result<ResumeToken> {
        let mut core = self.shared.core.lock();
        core.ensure_running(self.id)?;
        Ok(core.arm_token(self.id))
    }

    /// Frees the worker until `tok` is resumed.
    pub async fn suspend(&self, tok: ResumeToken) -> Result<()> {
        if tok.task != self.id {
            return Err(Error::contract(format!("token of task {} used by task {}", tok.task, self.id)));
        }
        self.shared.core.lock().ensure_running(self.id)?;
        self.syscall(Request::Suspend(tok)).await;
        Ok(())
    }

    /// Resumes another task's token from inside this task.
    pub fn resume(&self, tok: ResumeToken) -> Result<()> {
        let mut core = self.shared.core.lock();
        let w = core.worker_of(self.id);
        core.resume(tok, Provenance::External, w)?;
        drop(core);
        self.shared.cv.notify_all();
        Ok(())
    }

    /// Waits until every child created so far has finished, including
    /// children whose release is deferred on device work.
    pub async fn taskwait(&self) -> Result<()> {
        let tok = self.shared.core.lock().begin_taskwait(self.id)?;
        if let Some(tok) = tok {
            self.syscall(Request::Suspend(tok)).await;
        }
        Ok(())
    }

    /// Records the start of iteration `k`; tasks created afterwards are
    /// attributed to it.
    pub fn mark_iteration(&self, k: u32) {
        self.shared.core.lock().mark_iteration(self.id, k);
    }

    pub(crate) async fn sleep_until(&self, t: VTime) {
        self.syscall(Request::Sleep(t)).await;
    }

    pub(crate) async fn park(&self, tok: ResumeToken) {
        self.syscall(Request::Suspend(tok)).await;
    }

    pub fn create_stream(&self) -> StreamId {
        self.shared.core.lock().device.create_stream()
    }

    /// Puts `op` on `stream` without waiting for it.
    pub fn enqueue(&self, stream: StreamId, op: DeviceOp) -> Result<EventId> {
        let mut core = self.shared.core.lock();
        core.ensure_running(self.id)?;
        let now = core.now();
        let ev = core.device.enqueue(stream, op, now)?;
        drop(core);
        self.shared.cv.notify_all();
        Ok(ev)
    }

    /// Like [`TaskCtx::enqueue`], but kernels first charge the launch
    /// overhead to this task on the host.
    pub async fn launch(&self, stream: StreamId, op: DeviceOp) -> Result<EventId> {
        if op.kind == OpKind::Kernel {
            let overhead = self.shared.config.device_cost.launch_overhead;
            self.compute(overhead).await?;
        }
        self.enqueue(stream, op)
    }

    pub fn query(&self, ev: EventId) -> Result<EventState> {
        let mut core = self.shared.core.lock();
        let now = core.now();
        if core.device.processed_until() < now && matches!(self.shared.config.clock, super::ClockMode::Real) {
            core.device.advance_to(now);
        }
        core.device.query(ev)
    }

    /// Holds the worker until `ev` completes.
    pub async fn wait_blocking(&self, ev: EventId) -> Result<()> {
        {
            let core = self.shared.core.lock();
            core.ensure_running(self.id)?;
            if core.device.query(ev)? == EventState::Complete {
                return Ok(());
            }
        }
        self.syscall(Request::BlockOnEvent(ev)).await;
        Ok(())
    }

    /// Holds the worker until everything enqueued on `stream` completed.
    pub async fn stream_synchronize(&self, stream: StreamId) -> Result<()> {
        let last = self.shared.core.lock().device.last_event(stream)?;
        match last {
            Some(ev) => self.wait_blocking(ev).await,
            None => Ok(()),
        }
    }

    /// Hands `items` (one cost each) to this task's instance's private
    /// thread pool and blocks the worker until all are done. On a unified
    /// substrate the items run inline instead.
    pub async fn legacy_run(&self, items: Vec<VTime>) -> Result<()> {
        self.shared.core.lock().ensure_running(self.id)?;
        if items.is_empty() {
            return Ok(());
        }
        match self.shared.config.mode {
            super::SubstrateMode::Uncoordinated => {
                self.syscall(Request::LegacyRun(items)).await;
                Ok(())
            }
            super::SubstrateMode::Unified => {
                let total = items.iter().fold(VTime::ZERO, |a, &b| a + b);
                self.compute(total).await
            }
        }
    }
}
