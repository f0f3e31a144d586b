//! CG kernel triad: SpMV, waxpby and dot.
//!
//! Each kernel has a slice form and an arena form. The arena forms are
//! what tasks and device kernels run; they take their operands from
//! [`KernelArgs`] so host and device execution share one code path.

use std::ops::Range;
use std::sync::Arc;

use super::csr::CsrMatrix;
use crate::simdev::{Arena, Buffer, KernelArgs, KernelId};
use crate::taskrt::Runtime;

/// `y[i] = sum_k A[i,k] * x[k]` for every row `i` in `rows`.
pub fn spmv(a: &CsrMatrix, x: &[f64], rows: Range<usize>, y: &mut [f64]) {
    let (rp, ci, v) = (a.row_ptr(), a.col_idx(), a.values());
    for i in rows {
        let mut wrk = 0.0;
        for k in rp[i]..rp[i + 1] {
            wrk += v[k] * x[ci[k]];
        }
        y[i] = wrk;
    }
}

/// Compensated running sum: `hi + lo` carries roughly twice the
/// precision of an `f64`, so combining tile partials in any grouping
/// rounds to the same value as one sweep over the whole range.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Acc {
    pub hi: f64,
    pub lo: f64,
}

impl Acc {
    pub fn add(&mut self, v: f64) {
        let s = self.hi + v;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (v - bb);
        self.hi = s;
        self.lo += err;
    }

    pub fn merge(&mut self, other: Acc) {
        self.add(other.hi);
        self.lo += other.lo;
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

pub fn dot_acc(x: &[f64], y: &[f64], range: Range<usize>) -> Acc {
    let mut acc = Acc::default();
    for i in range {
        acc.add(x[i] * y[i]);
    }
    acc
}

/// Inner product over `range`.
pub fn dot(x: &[f64], y: &[f64], range: Range<usize>) -> f64 {
    dot_acc(x, y, range).value()
}

/// `w = alpha * x + beta * y` over `range`.
pub fn waxpby(alpha: f64, x: &[f64], beta: f64, y: &[f64], range: Range<usize>, w: &mut [f64]) {
    for i in range {
        w[i] = alpha * x[i] + beta * y[i];
    }
}

pub fn spmv_arena(arena: &Arena, a: &CsrMatrix, x: &Buffer, y: &Buffer, rows: Range<usize>) {
    let (rp, ci, v) = (a.row_ptr(), a.col_idx(), a.values());
    for i in rows {
        let mut wrk = 0.0;
        for k in rp[i]..rp[i + 1] {
            wrk += v[k] * arena.get(x, ci[k]);
        }
        arena.set(y, i, wrk);
    }
}

pub fn dot_arena(arena: &Arena, x: &Buffer, y: &Buffer, range: Range<usize>) -> Acc {
    let mut acc = Acc::default();
    for i in range {
        acc.add(arena.get(x, i) * arena.get(y, i));
    }
    acc
}

pub fn waxpby_arena(arena: &Arena, alpha: f64, x: &Buffer, beta: f64, y: &Buffer, w: &Buffer, range: Range<usize>) {
    for i in range {
        arena.set(w, i, alpha * arena.get(x, i) + beta * arena.get(y, i));
    }
}

/// Marks a waxpby coefficient that is not scaled by an arena cell.
pub const NO_COEF: u64 = u64::MAX;

/// Argument blocks and their interpretation.
pub mod args {
    use super::*;

    /// `y[rows] = A x[..]`.
    pub fn spmv(x: Buffer, y: Buffer, rows: Range<usize>) -> KernelArgs {
        KernelArgs {
            buffers: vec![x, y],
            scalars: vec![],
            ints: vec![rows.start as u64, rows.end as u64],
        }
    }

    /// `out[2*slot..2*slot+2] = x[range] . y[range]` as an [`Acc`] pair.
    pub fn dot(x: Buffer, y: Buffer, out: Buffer, slot: usize, range: Range<usize>) -> KernelArgs {
        KernelArgs {
            buffers: vec![x, y, out],
            scalars: vec![],
            ints: vec![range.start as u64, range.end as u64, slot as u64],
        }
    }

    /// `w = a * x + b * y` where `a = alpha * coef[alpha_cell]` (and
    /// likewise for `b`); cells read when the kernel runs.
    #[allow(clippy::too_many_arguments)]
    pub fn waxpby(
        alpha: f64,
        alpha_cell: Option<usize>,
        x: Buffer,
        beta: f64,
        beta_cell: Option<usize>,
        y: Buffer,
        w: Buffer,
        coef: Buffer,
        range: Range<usize>,
    ) -> KernelArgs {
        let cell = |c: Option<usize>| c.map_or(NO_COEF, |c| c as u64);
        KernelArgs {
            buffers: vec![x, y, w, coef],
            scalars: vec![alpha, beta],
            ints: vec![range.start as u64, range.end as u64, cell(alpha_cell), cell(beta_cell)],
        }
    }

    fn range(args: &KernelArgs) -> Range<usize> {
        args.ints[0] as usize..args.ints[1] as usize
    }

    pub fn run_spmv(arena: &Arena, a: &CsrMatrix, args: &KernelArgs) {
        spmv_arena(arena, a, &args.buffers[0], &args.buffers[1], range(args));
    }

    pub fn run_dot(arena: &Arena, args: &KernelArgs) {
        let acc = dot_arena(arena, &args.buffers[0], &args.buffers[1], range(args));
        let slot = args.ints[2] as usize;
        arena.set(&args.buffers[2], 2 * slot, acc.hi);
        arena.set(&args.buffers[2], 2 * slot + 1, acc.lo);
    }

    pub fn run_waxpby(arena: &Arena, args: &KernelArgs) {
        let coef = &args.buffers[3];
        let scale = |base: f64, cell: u64| {
            if cell == NO_COEF {
                base
            } else {
                base * arena.get(coef, cell as usize)
            }
        };
        let alpha = scale(args.scalars[0], args.ints[2]);
        let beta = scale(args.scalars[1], args.ints[3]);
        let [x, y, w, _] = &args.buffers[..] else {
            panic!("waxpby takes four buffers");
        };
        waxpby_arena(arena, alpha, x, beta, y, w, range(args));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CgKernels {
    pub spmv: KernelId,
    pub dot: KernelId,
    pub waxpby: KernelId,
}

/// Registers the triad as device kernels, with `a` bound into SpMV.
pub fn register_cg_kernels(rt: &Runtime, a: Arc<CsrMatrix>) -> CgKernels {
    CgKernels {
        spmv: rt.register_kernel("spmv", move |arena, args| args::run_spmv(arena, &a, args)),
        dot: rt.register_kernel("dot", args::run_dot),
        waxpby: rt.register_kernel("waxpby", args::run_waxpby),
    }
}
