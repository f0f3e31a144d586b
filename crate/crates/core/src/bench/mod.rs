//! Benchmark workloads: HPCCG-style conjugate gradient, the llm.c
//! matmul-backward pipeline and a small mixed host/device workload.

pub mod cg;
pub mod code4;
pub mod csr;
pub mod kernels;
pub mod pipeline;

pub use cg::{cg_reference, cg_solve, Backend, CgConfig, CgCosts, CgResult, Substrate, Variant};
pub use code4::{code4_run, Code4Backend, Code4Config, Code4Run, Code4Tasks};
pub use csr::{gen_stencil_matrix, CsrMatrix};
pub use pipeline::{pipeline_reference, pipeline_run, PipelineConfig, PipelineCosts, PipelineOutput, PipelineVariant};
