//! Backward matmul over bias and weights, decomposed along the output
//! channel.
//!
//! Each iteration first produces `dout (B,T,OC)` and `inp (B,T,C)` in
//! `(B_GRAN, T_GRAN)` blocks, then runs two task families: bias gradient
//! `dbias[o] += sum_{b,t} dout[b,t,o]` and weight gradient
//! `dweight[o,c] += sum_{b,t} dout[b,t,o] * inp[b,t,c]`, one task per
//! output-channel slice. The slice tasks depend on the producers through
//! multidependencies: one single-element region at the start of every
//! `(b, t)` block, as in the OmpSs-2 taskloop.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depsys::AccessMode::{Read, ReadWrite, Write};
use crate::depsys::AccessRegion;
use crate::error::{Error, Result};
use crate::simdev::{Arena, Buffer};
use crate::taskrt::{RunReport, Runtime, RuntimeConfig, TaskCtx, TaskSpec};
use crate::time::VTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub b: usize,
    pub t: usize,
    pub c: usize,
    pub oc: usize,
    pub b_gran: usize,
    pub t_gran: usize,
    pub oc_split: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            b: 4,
            t: 16,
            c: 32,
            oc: 64,
            b_gran: 1,
            t_gran: 4,
            oc_split: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("B", self.b),
            ("T", self.t),
            ("C", self.c),
            ("OC", self.oc),
            ("B_GRAN", self.b_gran),
            ("T_GRAN", self.t_gran),
            ("OC_SPLIT", self.oc_split),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Output channels per slice task.
    pub fn oc_gran(&self) -> usize {
        (self.oc / self.oc_split).max(1)
    }

    /// `o` slices, the last one clamped to `OC`.
    pub fn oc_slices(&self) -> Vec<(usize, usize)> {
        let g = self.oc_gran();
        (0..self.oc).step_by(g).map(|o| (o, (o + g).min(self.oc))).collect()
    }

    /// Producer blocks `(b0, b1, t0, t1)`.
    pub fn blocks(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        for b in (0..self.b).step_by(self.b_gran.min(self.b)) {
            for t in (0..self.t).step_by(self.t_gran.min(self.t)) {
                out.push((b, (b + self.b_gran).min(self.b), t, (t + self.t_gran).min(self.t)));
            }
        }
        out
    }

    /// Producer predecessors of every slice task.
    pub fn inputs_per_slice(&self) -> usize {
        self.b.div_ceil(self.b_gran.min(self.b)) * self.t.div_ceil(self.t_gran.min(self.t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineCosts {
    pub per_elem: f64,
    pub per_flop: f64,
}

impl Default for PipelineCosts {
    fn default() -> Self {
        PipelineCosts {
            per_elem: 0.0005,
            per_flop: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineVariant {
    /// Everything runs in the root task.
    Monolithic,
    Tasks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub dbias: Vec<f64>,
    pub dweight: Vec<f64>,
}

/// Activations for iteration `k`: `(dout, inp)`.
pub fn pipeline_inputs(cfg: &PipelineConfig, seed: u64, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64));
    let dout = (0..cfg.b * cfg.t * cfg.oc).map(|_| rng.random_range(-1.0..1.0)).collect();
    let inp = (0..cfg.b * cfg.t * cfg.c).map(|_| rng.random_range(-1.0..1.0)).collect();
    (dout, inp)
}

/// Sequential gradients accumulated over `iters` iterations.
pub fn pipeline_reference(cfg: &PipelineConfig, seed: u64, iters: usize) -> PipelineOutput {
    let (bn, tn, c, oc) = (cfg.b, cfg.t, cfg.c, cfg.oc);
    let mut dbias = vec![0.0; oc];
    let mut dweight = vec![0.0; oc * c];
    for k in 0..iters {
        let (dout, inp) = pipeline_inputs(cfg, seed, k);
        for o in 0..oc {
            let mut sum = 0.0;
            for b in 0..bn {
                for t in 0..tn {
                    sum += dout[b * tn * oc + t * oc + o];
                }
            }
            dbias[o] += sum;
        }
        for o in 0..oc {
            for b in 0..bn {
                for t in 0..tn {
                    let d = dout[b * tn * oc + t * oc + o];
                    for i in 0..c {
                        dweight[o * c + i] += d * inp[b * tn * c + t * c + i];
                    }
                }
            }
        }
    }
    PipelineOutput { dbias, dweight }
}

#[derive(Clone, Copy)]
struct Bufs {
    dout: Buffer,
    inp: Buffer,
    dbias: Buffer,
    dweight: Buffer,
}

fn bias_slice(arena: &Arena, cfg: &PipelineConfig, bf: &Bufs, o0: usize, o1: usize) {
    let (tn, oc) = (cfg.t, cfg.oc);
    for o in o0..o1 {
        let mut sum = 0.0;
        for b in 0..cfg.b {
            for t in 0..tn {
                sum += arena.get(&bf.dout, b * tn * oc + t * oc + o);
            }
        }
        arena.set(&bf.dbias, o, arena.get(&bf.dbias, o) + sum);
    }
}

fn weight_slice(arena: &Arena, cfg: &PipelineConfig, bf: &Bufs, o0: usize, o1: usize) {
    let (tn, c, oc) = (cfg.t, cfg.c, cfg.oc);
    for o in o0..o1 {
        for b in 0..cfg.b {
            for t in 0..tn {
                let d = arena.get(&bf.dout, b * tn * oc + t * oc + o);
                for i in 0..c {
                    let cell = o * c + i;
                    let v = arena.get(&bf.dweight, cell) + d * arena.get(&bf.inp, b * tn * c + t * c + i);
                    arena.set(&bf.dweight, cell, v);
                }
            }
        }
    }
}

fn produce(arena: &Arena, cfg: &PipelineConfig, bf: &Bufs, src: &(Vec<f64>, Vec<f64>), blk: (usize, usize, usize, usize)) {
    let (b0, b1, t0, t1) = blk;
    for b in b0..b1 {
        for t in t0..t1 {
            for o in 0..cfg.oc {
                let i = b * cfg.t * cfg.oc + t * cfg.oc + o;
                arena.set(&bf.dout, i, src.0[i]);
            }
            for c in 0..cfg.c {
                let i = b * cfg.t * cfg.c + t * cfg.c + c;
                arena.set(&bf.inp, i, src.1[i]);
            }
        }
    }
}

fn block_regions(cfg: &PipelineConfig, bf: &Bufs, blk: (usize, usize, usize, usize)) -> Vec<AccessRegion> {
    let (b0, b1, t0, t1) = blk;
    let mut out = Vec::new();
    for b in b0..b1 {
        out.push(bf.dout.region(b * cfg.t * cfg.oc + t0 * cfg.oc..b * cfg.t * cfg.oc + t1 * cfg.oc, Write));
        out.push(bf.inp.region(b * cfg.t * cfg.c + t0 * cfg.c..b * cfg.t * cfg.c + t1 * cfg.c, Write));
    }
    out
}

/// `{buf[b*T*W + t*W], b=0;B:B_GRAN, t=0;T:T_GRAN}` as unit regions.
fn multidep(cfg: &PipelineConfig, buf: &Buffer, width: usize) -> Vec<AccessRegion> {
    cfg.blocks()
        .into_iter()
        .map(|(b, _, t, _)| {
            let at = b * cfg.t * width + t * width;
            buf.region(at..at + 1, Read)
        })
        .collect()
}

/// Runs `iters` backward steps. Each iteration ends with a taskwait so
/// iteration times can be read from the marks.
pub fn pipeline_run(
    rt_cfg: RuntimeConfig,
    cfg: &PipelineConfig,
    variant: PipelineVariant,
    costs: PipelineCosts,
    seed: u64,
    iters: usize,
) -> Result<(PipelineOutput, RunReport)> {
    cfg.validate()?;
    let cfg = *cfg;
    let (bt, c, oc) = (cfg.b * cfg.t, cfg.c, cfg.oc);
    let mut rt_cfg = rt_cfg;
    rt_cfg.arena_capacity = rt_cfg.arena_capacity.max(bt * oc + bt * c + oc + oc * c);
    let rt = Runtime::new(rt_cfg)?;
    let arena = rt.arena();
    let bf = Bufs {
        dout: arena.alloc(bt * oc)?,
        inp: arena.alloc(bt * c)?,
        dbias: arena.alloc(oc)?,
        dweight: arena.alloc(oc * c)?,
    };
    let cost = move |u: f64| VTime(VTime::from_units(u).0.max(1));
    rt.run("pipeline", move |ctx: TaskCtx| async move {
        for k in 0..iters {
            ctx.mark_iteration(k as u32);
            let src = Arc::new(pipeline_inputs(&cfg, seed, k));
            match variant {
                PipelineVariant::Monolithic => {
                    let arena = ctx.arena();
                    let elems = (bt * (oc + c)) as f64;
                    ctx.compute(cost(elems * costs.per_elem)).await?;
                    for blk in cfg.blocks() {
                        produce(arena, &cfg, &bf, &src, blk);
                    }
                    ctx.compute(cost((bt * oc) as f64 * costs.per_elem)).await?;
                    bias_slice(arena, &cfg, &bf, 0, oc);
                    ctx.compute(cost((bt * oc * c) as f64 * costs.per_flop)).await?;
                    weight_slice(arena, &cfg, &bf, 0, oc);
                }
                PipelineVariant::Tasks => {
                    for blk in cfg.blocks() {
                        let src = src.clone();
                        let elems = ((blk.1 - blk.0) * (blk.3 - blk.2) * (oc + c)) as f64;
                        let spec = TaskSpec::new(format!("produce[{},{}]", blk.0, blk.2))
                            .accesses(block_regions(&cfg, &bf, blk));
                        ctx.spawn(spec, move |t| async move {
                            t.compute(cost(elems * costs.per_elem)).await?;
                            produce(t.arena(), &cfg, &bf, &src, blk);
                            Ok(())
                        })?;
                    }
                    for (o0, o1) in cfg.oc_slices() {
                        let spec = TaskSpec::new(format!("dbias[{o0}..{o1}]"))
                            .accesses(multidep(&cfg, &bf.dout, oc))
                            .access(bf.dbias.region(o0..o1, ReadWrite));
                        let work = (bt * (o1 - o0)) as f64 * costs.per_elem;
                        ctx.spawn(spec, move |t| async move {
                            t.compute(cost(work)).await?;
                            bias_slice(t.arena(), &cfg, &bf, o0, o1);
                            Ok(())
                        })?;
                    }
                    for (o0, o1) in cfg.oc_slices() {
                        let spec = TaskSpec::new(format!("dweight[{o0}..{o1}]"))
                            .accesses(multidep(&cfg, &bf.dout, oc))
                            .accesses(multidep(&cfg, &bf.inp, c))
                            .access(bf.dweight.region(o0 * c..o1 * c, ReadWrite));
                        let work = (bt * (o1 - o0) * c) as f64 * costs.per_flop;
                        ctx.spawn(spec, move |t| async move {
                            t.compute(cost(work)).await?;
                            weight_slice(t.arena(), &cfg, &bf, o0, o1);
                            Ok(())
                        })?;
                    }
                    ctx.taskwait().await?;
                }
            }
        }
        ctx.mark_iteration(iters as u32);
        Ok(())
    })
    .map(|report| {
        (
            PipelineOutput {
                dbias: arena.read(&bf.dbias),
                dweight: arena.read(&bf.dweight),
            },
            report,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_clamp_last() {
        let cfg = PipelineConfig {
            oc: 10,
            oc_split: 3,
            ..Default::default()
        };
        assert_eq!(cfg.oc_slices(), vec![(0, 3), (3, 6), (6, 9), (9, 10)]);
        let one = PipelineConfig {
            oc_split: 1,
            ..Default::default()
        };
        assert_eq!(one.oc_slices(), vec![(0, 64)]);
    }

    #[test]
    fn blocks_clamp_and_count() {
        let cfg = PipelineConfig {
            t: 10,
            t_gran: 4,
            ..Default::default()
        };
        let blocks = cfg.blocks();
        assert_eq!(blocks.len(), 4 * 3);
        assert!(blocks.contains(&(3, 4, 8, 10)));
        assert_eq!(cfg.inputs_per_slice(), 12);
    }

    #[test]
    fn zero_dimension_rejected() {
        let cfg = PipelineConfig {
            t_gran: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
