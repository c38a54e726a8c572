//! Reference implementations and compute accounting.
//!
//! [`dense`] re-runs the head on materialized grids, either at every cell
//! (the dense head) or only at selected cells (sparse-on-dense). Both share
//! the per-cell arithmetic of [`crate::ops`], so agreement with the sparse
//! path is exact. [`flops`] counts multiply-accumulates from run shapes.

pub mod dense;
pub mod flops;

pub use dense::{
    dense_children, dense_conv3x3, dense_deform_conv, dense_fuse_backbone, dense_halve, dense_pointwise,
    dense_process, dense_sfm, dense_stage_oracle, run_dense_pipeline, run_sparse_on_dense_pipeline,
    sparse_on_dense_oracle, CellMask, DenseRun, DenseStage,
};
pub use flops::{count_flops, FlopReport, OpCount, Trace, TraceEntry};
