//! The mixed host/device loop: for every `i`
//!
//! ```text
//! C0 { write x[i] }                       host
//! G0 { read x[i], write y[i] }            copy in, kernel, copy out
//! C1 { read x[i] }                        host
//! C2 { read y[i] }                        host
//! ```
//!
//! G0 either waits on its stream (blocking backend) or binds its last
//! event to the task and returns (task-aware backend).

use crate::depsys::AccessMode::{Read, Write};
use crate::depsys::TaskId;
use crate::error::Result;
use crate::simdev::{DeviceOp, KernelArgs};
use crate::taskrt::{RunReport, Runtime, RuntimeConfig, TaskSpec};
use crate::time::VTime;
use parking_lot::Mutex;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code4Backend {
    Blocking,
    TaskAware,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Code4Config {
    pub n: usize,
    pub backend: Code4Backend,
    pub c0_cost: VTime,
    pub c1_cost: VTime,
    pub c2_cost: VTime,
    pub kernel_cost: VTime,
    /// Cost of each host/device copy; zero leaves the copies out.
    pub copy_cost: VTime,
}

impl Code4Config {
    pub fn new(n: usize, backend: Code4Backend) -> Self {
        Code4Config {
            n,
            backend,
            c0_cost: VTime::units(1),
            c1_cost: VTime::units(2),
            c2_cost: VTime::units(1),
            kernel_cost: VTime::units(10),
            copy_cost: VTime::ZERO,
        }
    }
}

/// Task ids per index, as created.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Code4Tasks {
    pub c0: Vec<TaskId>,
    pub g0: Vec<TaskId>,
    pub c1: Vec<TaskId>,
    pub c2: Vec<TaskId>,
}

#[derive(Debug)]
pub struct Code4Run {
    pub report: RunReport,
    pub tasks: Code4Tasks,
    /// `z[i] = y[i] + 1 = 2 x[i] + 1` as computed by C2.
    pub z: Vec<f64>,
}

pub fn code4_run(rt_cfg: RuntimeConfig, cfg: &Code4Config) -> Result<Code4Run> {
    let n = cfg.n;
    let mut rt_cfg = rt_cfg;
    rt_cfg.arena_capacity = rt_cfg.arena_capacity.max(3 * n + 1);
    let rt = Runtime::new(rt_cfg)?;
    let scale = rt.register_kernel("scale", |arena, a: &KernelArgs| {
        let i = a.ints[0] as usize;
        arena.set(&a.buffers[1], i, 2.0 * arena.get(&a.buffers[0], i));
    });
    let arena = rt.arena();
    let x = arena.alloc(n.max(1))?;
    let y = arena.alloc(n.max(1))?;
    let z = arena.alloc(n.max(1))?;
    let ids = Arc::new(Mutex::new(Code4Tasks::default()));
    let ids2 = ids.clone();
    let cfg = *cfg;
    let report = rt.run("code4", move |ctx| async move {
        for i in 0..n {
            let (xi, yi) = (x.region(i..i + 1, Write), y.region(i..i + 1, Write));
            let c0 = ctx.spawn(TaskSpec::new(format!("C0[{i}]")).access(xi), move |t| async move {
                t.compute(cfg.c0_cost).await?;
                t.arena().set(&x, i, i as f64 + 1.0);
                Ok(())
            })?;
            let spec = TaskSpec::new(format!("G0[{i}]")).access(x.region(i..i + 1, Read)).access(yi);
            let g0 = ctx.spawn(spec, move |t| async move {
                let s = t.ta_get_queue().await?;
                if cfg.copy_cost > VTime::ZERO {
                    t.enqueue(s, DeviceOp::copy_h2d(x.slice(i..i + 1)).with_cost(cfg.copy_cost))?;
                }
                let args = KernelArgs {
                    buffers: vec![x, y],
                    scalars: vec![],
                    ints: vec![i as u64],
                };
                let mut ev = t.launch(s, DeviceOp::kernel(scale, args).with_cost(cfg.kernel_cost)).await?;
                if cfg.copy_cost > VTime::ZERO {
                    ev = t.enqueue(s, DeviceOp::copy_d2h(y.slice(i..i + 1)).with_cost(cfg.copy_cost))?;
                }
                match cfg.backend {
                    Code4Backend::Blocking => {
                        t.stream_synchronize(s).await?;
                        t.ta_return_queue(s)
                    }
                    Code4Backend::TaskAware => {
                        t.ta_synchronize_event_async(ev)?;
                        t.ta_return_queue(s)
                    }
                }
            })?;
            let c1 = ctx.spawn(TaskSpec::new(format!("C1[{i}]")).access(x.region(i..i + 1, Read)), move |t| async move {
                t.compute(cfg.c1_cost).await
            })?;
            let spec = TaskSpec::new(format!("C2[{i}]"))
                .access(y.region(i..i + 1, Read))
                .access(z.region(i..i + 1, Write));
            let c2 = ctx.spawn(spec, move |t| async move {
                t.compute(cfg.c2_cost).await?;
                t.arena().set(&z, i, t.arena().get(&y, i) + 1.0);
                Ok(())
            })?;
            let mut ids = ids2.lock();
            ids.c0.push(c0);
            ids.g0.push(g0);
            ids.c1.push(c1);
            ids.c2.push(c2);
        }
        ctx.taskwait().await
    })?;
    let tasks = ids.lock().clone();
    let mut zs = arena.read(&z);
    zs.truncate(n);
    Ok(Code4Run { report, tasks, z: zs })
}
