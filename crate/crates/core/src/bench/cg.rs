//! Conjugate gradient in the HPCCG formulation.
//!
//! The task variant splits every vector kernel into equal row tiles and
//! combines dot-product partials in a reduction task, always in tile
//! order. One taskwait per iteration lets the root read the residual.
//! Costs are virtual: `per_nnz` per SpMV nonzero and `per_elem` per
//! vector element, divided by `device_speedup` when a kernel runs on the
//! simulated device.

use std::ops::Range;
use std::sync::Arc;

use super::csr::CsrMatrix;
use super::kernels::{self, args, CgKernels};
use crate::depsys::AccessMode::{Read, ReadWrite, Write};
use crate::error::{Error, Result};
use crate::simdev::{Buffer, DeviceOp, KernelArgs};
use crate::taskrt::{InstanceId, RunReport, Runtime, RuntimeConfig, SubstrateMode, TaskCtx, TaskSpec};
use crate::time::VTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Every kernel runs whole-vector inside the root task.
    Monolithic,
    /// Kernels split into this many row tiles, one task per tile.
    Tasks(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Host,
    /// Device kernels followed by a blocking stream wait.
    DeviceBlocking,
    /// Device kernels bound to the task with the task-aware layer.
    DeviceTa,
}

/// How tile kernels reach the cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substrate {
    /// Each tile kernel is plain work of its task.
    SingleRt,
    /// Each tile kernel is split over the private thread pool of one of
    /// several runtime instances.
    MultiRtUncoordinated,
    /// Same split, but the pieces are tasks on the shared substrate.
    MultiRtUnified,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgCosts {
    pub per_nnz: f64,
    pub per_elem: f64,
    pub device_speedup: f64,
}

impl Default for CgCosts {
    fn default() -> Self {
        CgCosts {
            per_nnz: 0.001,
            per_elem: 0.0005,
            device_speedup: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Stop once the residual norm is at or below this.
    pub tolerance: f64,
    pub variant: Variant,
    pub backend: Backend,
    pub substrate: Substrate,
    /// Runtime instances for the multi-runtime substrates.
    pub instances: usize,
    /// Pieces per tile kernel for the multi-runtime substrates; `None`
    /// means one per worker.
    pub split: Option<usize>,
    pub costs: CgCosts,
}

impl CgConfig {
    pub fn new(max_iters: usize, variant: Variant, backend: Backend) -> Self {
        CgConfig {
            max_iters,
            tolerance: 0.0,
            variant,
            backend,
            substrate: Substrate::SingleRt,
            instances: 4,
            split: None,
            costs: CgCosts::default(),
        }
    }

    pub fn substrate(mut self, s: Substrate) -> Self {
        self.substrate = s;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    /// Residual norm before the first iteration and after each one.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Plain sequential CG on slices.
pub fn cg_reference(a: &CsrMatrix, b: &[f64], max_iters: usize, tolerance: f64) -> CgResult {
    let n = a.n();
    let all = 0..n;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut rtrans = kernels::dot(&r, &r, all.clone());
    let mut beta = 0.0;
    let mut residuals = vec![rtrans.sqrt()];
    let mut iterations = 0;
    while iterations < max_iters && rtrans.sqrt() > tolerance {
        if iterations == 0 {
            let r2 = r.clone();
            kernels::waxpby(1.0, &r, 0.0, &r2, all.clone(), &mut p);
        } else {
            let p2 = p.clone();
            kernels::waxpby(1.0, &r, beta, &p2, all.clone(), &mut p);
        }
        kernels::spmv(a, &p, all.clone(), &mut ap);
        let alpha = rtrans / kernels::dot(&p, &ap, all.clone());
        let x2 = x.clone();
        kernels::waxpby(1.0, &x2, alpha, &p, all.clone(), &mut x);
        let r2 = r.clone();
        kernels::waxpby(1.0, &r2, -alpha, &ap, all.clone(), &mut r);
        let rr = kernels::dot(&r, &r, all.clone());
        beta = rr / rtrans;
        rtrans = rr;
        residuals.push(rtrans.sqrt());
        iterations += 1;
    }
    CgResult {
        converged: rtrans.sqrt() <= tolerance,
        x,
        residuals,
        iterations,
    }
}

const RTRANS: usize = 0;
const ALPHA: usize = 1;
const BETA: usize = 2;

#[derive(Debug, Clone, Copy)]
enum Kernel {
    Spmv,
    Dot,
    Waxpby,
}

#[derive(Debug, Clone, Copy)]
struct Bufs {
    x: Buffer,
    r: Buffer,
    p: Buffer,
    ap: Buffer,
    scal: Buffer,
    part_pap: Buffer,
    part_rr: Buffer,
}

struct Env {
    a: Arc<CsrMatrix>,
    bufs: Bufs,
    kernels: CgKernels,
    backend: Backend,
    substrate: Substrate,
    instances: Vec<InstanceId>,
    split: usize,
    costs: CgCosts,
    tiles: Vec<Range<usize>>,
}

fn units(u: f64) -> VTime {
    VTime(VTime::from_units(u).0.max(1))
}

impl Env {
    fn apply(&self, ctx: &TaskCtx, k: Kernel, a: &KernelArgs) {
        let arena = ctx.arena();
        match k {
            Kernel::Spmv => args::run_spmv(arena, &self.a, a),
            Kernel::Dot => args::run_dot(arena, a),
            Kernel::Waxpby => args::run_waxpby(arena, a),
        }
    }

    fn kernel_id(&self, k: Kernel) -> crate::simdev::KernelId {
        match k {
            Kernel::Spmv => self.kernels.spmv,
            Kernel::Dot => self.kernels.dot,
            Kernel::Waxpby => self.kernels.waxpby,
        }
    }

    fn instance(&self, tile: usize) -> InstanceId {
        if self.instances.is_empty() {
            InstanceId::MAIN
        } else {
            self.instances[tile % self.instances.len()]
        }
    }

    /// CPU time of a tile kernel, laid out per substrate.
    async fn host_work(&self, ctx: &TaskCtx, cost: VTime, in_root: bool, tile: usize) -> Result<()> {
        if in_root || self.substrate == Substrate::SingleRt {
            return ctx.compute(cost).await;
        }
        let piece = VTime((cost.0 / self.split as u64).max(1));
        ctx.compute(ctx.config().device_cost.launch_overhead).await?;
        match self.substrate {
            Substrate::MultiRtUncoordinated => ctx.legacy_run(vec![piece; self.split]).await,
            _ => {
                let inst = self.instance(tile);
                for _ in 0..self.split {
                    ctx.spawn(TaskSpec::new("piece").instance(inst), move |c| async move {
                        c.compute(piece).await
                    })?;
                }
                ctx.taskwait().await
            }
        }
    }

    async fn exec(&self, ctx: &TaskCtx, k: Kernel, a: KernelArgs, cost: VTime, in_root: bool, tile: usize) -> Result<()> {
        match self.backend {
            Backend::Host => {
                self.host_work(ctx, cost, in_root, tile).await?;
                self.apply(ctx, k, &a);
                Ok(())
            }
            Backend::DeviceBlocking => {
                let s = ctx.ta_get_queue().await?;
                let op = DeviceOp::kernel(self.kernel_id(k), a).with_cost(self.device_cost(cost));
                let ev = ctx.launch(s, op).await?;
                ctx.wait_blocking(ev).await?;
                ctx.ta_return_queue(s)
            }
            Backend::DeviceTa => {
                let s = ctx.ta_get_queue().await?;
                let op = DeviceOp::kernel(self.kernel_id(k), a).with_cost(self.device_cost(cost));
                let ev = ctx.launch(s, op).await?;
                if in_root {
                    ctx.ta_return_queue(s)?;
                    ctx.ta_wait_blocking(ev).await
                } else {
                    ctx.ta_synchronize_event_async(ev)?;
                    ctx.ta_return_queue(s)
                }
            }
        }
    }

    fn device_cost(&self, host: VTime) -> VTime {
        VTime(((host.0 as f64 / self.costs.device_speedup) as u64).max(1))
    }

    fn vec_cost(&self, len: usize) -> VTime {
        units(len as f64 * self.costs.per_elem)
    }

    fn spmv_cost(&self, rows: Range<usize>) -> VTime {
        units(self.a.nnz_in(rows) as f64 * self.costs.per_nnz)
    }
}

fn validate(a: &CsrMatrix, b: &[f64], cfg: &CgConfig) -> Result<()> {
    if b.len() != a.n() {
        return Err(Error::invalid(format!("right-hand side has {} entries for n={}", b.len(), a.n())));
    }
    if let Variant::Tasks(t) = cfg.variant {
        if t == 0 || t > a.n() {
            return Err(Error::invalid(format!("tile count {t} must be in 1..={}", a.n())));
        }
    }
    if cfg.backend != Backend::Host && cfg.substrate != Substrate::SingleRt {
        return Err(Error::invalid("device backends only run on the single-runtime substrate"));
    }
    if cfg.substrate != Substrate::SingleRt && cfg.instances == 0 {
        return Err(Error::invalid("multi-runtime substrates need at least one instance"));
    }
    if cfg.split == Some(0) {
        return Err(Error::invalid("kernel split must be at least 1"));
    }
    Ok(())
}

/// Equal row blocks.
pub fn tile_plan(n: usize, tiles: usize) -> Vec<Range<usize>> {
    (0..tiles).map(|i| i * n / tiles..(i + 1) * n / tiles).collect()
}

/// Runs CG on a runtime built from `rt_cfg` (its substrate mode is set
/// from `cfg.substrate`).
pub fn cg_solve(mut rt_cfg: RuntimeConfig, a: Arc<CsrMatrix>, b: &[f64], cfg: &CgConfig) -> Result<(CgResult, RunReport)> {
    validate(&a, b, cfg)?;
    let n = a.n();
    let tiles = match cfg.variant {
        Variant::Monolithic => 1,
        Variant::Tasks(t) => t,
    };
    rt_cfg.mode = match cfg.substrate {
        Substrate::MultiRtUncoordinated => SubstrateMode::Uncoordinated,
        _ => SubstrateMode::Unified,
    };
    rt_cfg.arena_capacity = rt_cfg.arena_capacity.max(5 * n + 4 * tiles + 8);
    let split = cfg.split.unwrap_or(rt_cfg.workers);
    let rt = Runtime::new(rt_cfg)?;
    let kernels = kernels::register_cg_kernels(&rt, a.clone());
    let instances = match cfg.substrate {
        Substrate::SingleRt => Vec::new(),
        _ => (0..cfg.instances).map(|i| rt.add_instance(&format!("rt{i}"))).collect(),
    };
    let arena = rt.arena();
    let bufs = Bufs {
        x: arena.alloc(n)?,
        r: arena.alloc_from(b)?,
        p: arena.alloc(n)?,
        ap: arena.alloc(n)?,
        scal: arena.alloc(4)?,
        part_pap: arena.alloc(2 * tiles)?,
        part_rr: arena.alloc(2 * tiles)?,
    };
    let env = Arc::new(Env {
        a,
        bufs,
        kernels,
        backend: cfg.backend,
        substrate: cfg.substrate,
        instances,
        split,
        costs: cfg.costs,
        tiles: tile_plan(n, tiles),
    });
    let (max_iters, tol, variant) = (cfg.max_iters, cfg.tolerance, cfg.variant);
    let out = Arc::new(parking_lot::Mutex::new((Vec::new(), 0usize)));
    let out2 = out.clone();
    let report = rt.run("cg", move |ctx| async move {
        let arena = ctx.arena().clone();
        let bf = env.bufs;
        let rtrans = kernels::dot_arena(&arena, &bf.r, &bf.r, 0..n).value();
        arena.set(&bf.scal, RTRANS, rtrans);
        ctx.compute(env.vec_cost(n)).await?;
        let mut residuals = vec![rtrans.sqrt()];
        let mut k = 0;
        while k < max_iters && residuals[k] > tol {
            ctx.mark_iteration(k as u32);
            match variant {
                Variant::Monolithic => monolithic_iteration(&ctx, &env, k).await?,
                Variant::Tasks(_) => {
                    task_iteration(&ctx, &env, k)?;
                    ctx.taskwait().await?;
                }
            }
            residuals.push(arena.get(&bf.scal, RTRANS).sqrt());
            k += 1;
        }
        ctx.mark_iteration(k as u32);
        *out2.lock() = (residuals, k);
        Ok(())
    })?;
    let (residuals, iterations) = out.lock().clone();
    let x = arena.read(&bufs.x);
    Ok((
        CgResult {
            converged: residuals.last().is_some_and(|&r| r <= cfg.tolerance),
            x,
            residuals,
            iterations,
        },
        report,
    ))
}

async fn monolithic_iteration(ctx: &TaskCtx, env: &Env, k: usize) -> Result<()> {
    let bf = env.bufs;
    let arena = ctx.arena();
    let all = 0..bf.x.len();
    let n = all.len();
    let p_args = if k == 0 {
        args::waxpby(1.0, None, bf.r, 0.0, None, bf.r, bf.p, bf.scal, all.clone())
    } else {
        args::waxpby(1.0, None, bf.r, 1.0, Some(BETA), bf.p, bf.p, bf.scal, all.clone())
    };
    env.exec(ctx, Kernel::Waxpby, p_args, env.vec_cost(n), true, 0).await?;
    env.exec(ctx, Kernel::Spmv, args::spmv(bf.p, bf.ap, all.clone()), env.spmv_cost(all.clone()), true, 0)
        .await?;
    env.exec(ctx, Kernel::Dot, args::dot(bf.p, bf.ap, bf.part_pap, 0, all.clone()), env.vec_cost(n), true, 0)
        .await?;
    reduce_alpha(arena, &bf, 1);
    let x_args = args::waxpby(1.0, None, bf.x, 1.0, Some(ALPHA), bf.p, bf.x, bf.scal, all.clone());
    env.exec(ctx, Kernel::Waxpby, x_args, env.vec_cost(n), true, 0).await?;
    let r_args = args::waxpby(1.0, None, bf.r, -1.0, Some(ALPHA), bf.ap, bf.r, bf.scal, all.clone());
    env.exec(ctx, Kernel::Waxpby, r_args, env.vec_cost(n), true, 0).await?;
    env.exec(ctx, Kernel::Dot, args::dot(bf.r, bf.r, bf.part_rr, 0, all), env.vec_cost(n), true, 0)
        .await?;
    reduce_rtrans(arena, &bf, 1);
    Ok(())
}

fn sum_partials(arena: &crate::simdev::Arena, parts: &Buffer, tiles: usize) -> f64 {
    let mut acc = kernels::Acc::default();
    for i in 0..tiles {
        acc.merge(kernels::Acc {
            hi: arena.get(parts, 2 * i),
            lo: arena.get(parts, 2 * i + 1),
        });
    }
    acc.value()
}

fn reduce_alpha(arena: &crate::simdev::Arena, bf: &Bufs, tiles: usize) {
    let pap = sum_partials(arena, &bf.part_pap, tiles);
    arena.set(&bf.scal, ALPHA, arena.get(&bf.scal, RTRANS) / pap);
}

fn reduce_rtrans(arena: &crate::simdev::Arena, bf: &Bufs, tiles: usize) {
    let rr = sum_partials(arena, &bf.part_rr, tiles);
    let old = arena.get(&bf.scal, RTRANS);
    arena.set(&bf.scal, BETA, rr / old);
    arena.set(&bf.scal, RTRANS, rr);
}

/// Spawns one iteration's task graph.
fn task_iteration(ctx: &TaskCtx, env: &Arc<Env>, k: usize) -> Result<()> {
    let bf = env.bufs;
    let t = env.tiles.len();
    let tile_task = |label: &str, i: usize, accesses: Vec<crate::depsys::AccessRegion>, kern: Kernel, a: KernelArgs, cost: VTime| {
        let env = env.clone();
        ctx.spawn(
            TaskSpec::new(format!("{label}[{i}]")).accesses(accesses).instance(env.instance(i)),
            move |c| async move { env.exec(&c, kern, a, cost, false, i).await },
        )
    };
    let cell = |i: usize, mode| bf.scal.region(i..i + 1, mode);

    for (i, rows) in env.tiles.iter().cloned().enumerate() {
        let (acc, a) = if k == 0 {
            (
                vec![bf.r.region(rows.clone(), Read), bf.p.region(rows.clone(), Write)],
                args::waxpby(1.0, None, bf.r, 0.0, None, bf.r, bf.p, bf.scal, rows.clone()),
            )
        } else {
            (
                vec![bf.r.region(rows.clone(), Read), cell(BETA, Read), bf.p.region(rows.clone(), ReadWrite)],
                args::waxpby(1.0, None, bf.r, 1.0, Some(BETA), bf.p, bf.p, bf.scal, rows.clone()),
            )
        };
        tile_task("p", i, acc, Kernel::Waxpby, a, env.vec_cost(rows.len()))?;
    }
    for (i, rows) in env.tiles.iter().cloned().enumerate() {
        let cols = env.a.column_span(rows.clone());
        let acc = vec![bf.p.region(cols, Read), bf.ap.region(rows.clone(), Write)];
        tile_task("spmv", i, acc, Kernel::Spmv, args::spmv(bf.p, bf.ap, rows.clone()), env.spmv_cost(rows))?;
    }
    for (i, rows) in env.tiles.iter().cloned().enumerate() {
        let acc = vec![
            bf.p.region(rows.clone(), Read),
            bf.ap.region(rows.clone(), Read),
            bf.part_pap.region(2 * i..2 * i + 2, Write),
        ];
        let a = args::dot(bf.p, bf.ap, bf.part_pap, i, rows.clone());
        tile_task("pAp", i, acc, Kernel::Dot, a, env.vec_cost(rows.len()))?;
    }
    {
        let env = env.clone();
        let acc = vec![bf.part_pap.whole(Read), cell(RTRANS, Read), cell(ALPHA, Write)];
        ctx.spawn(TaskSpec::new("alpha").accesses(acc), move |c| async move {
            c.compute(env.vec_cost(t)).await?;
            reduce_alpha(c.arena(), &env.bufs, t);
            Ok(())
        })?;
    }
    for (i, rows) in env.tiles.iter().cloned().enumerate() {
        let acc = vec![cell(ALPHA, Read), bf.p.region(rows.clone(), Read), bf.x.region(rows.clone(), ReadWrite)];
        let a = args::waxpby(1.0, None, bf.x, 1.0, Some(ALPHA), bf.p, bf.x, bf.scal, rows.clone());
        tile_task("x", i, acc, Kernel::Waxpby, a, env.vec_cost(rows.len()))?;
    }
    for (i, rows) in env.tiles.iter().cloned().enumerate() {
        let acc = vec![cell(ALPHA, Read), bf.ap.region(rows.clone(), Read), bf.r.region(rows.clone(), ReadWrite)];
        let a = args::waxpby(1.0, None, bf.r, -1.0, Some(ALPHA), bf.ap, bf.r, bf.scal, rows.clone());
        tile_task("r", i, acc, Kernel::Waxpby, a, env.vec_cost(rows.len()))?;
    }
    for (i, rows) in env.tiles.iter().cloned().enumerate() {
        let acc = vec![bf.r.region(rows.clone(), Read), bf.part_rr.region(2 * i..2 * i + 2, Write)];
        let a = args::dot(bf.r, bf.r, bf.part_rr, i, rows.clone());
        tile_task("rr", i, acc, Kernel::Dot, a, env.vec_cost(rows.len()))?;
    }
    let env = env.clone();
    let acc = vec![bf.part_rr.whole(Read), cell(RTRANS, ReadWrite), cell(BETA, Write)];
    ctx.spawn(TaskSpec::new("rtrans").accesses(acc), move |c| async move {
        c.compute(env.vec_cost(t)).await?;
        reduce_rtrans(c.arena(), &env.bufs, t);
        Ok(())
    })?;
    Ok(())
}
