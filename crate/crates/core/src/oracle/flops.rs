//! Analytic multiply-accumulate counts for the sparse head and its dense
//! counterpart, derived from the shapes of a run.
//!
//! Cost per op at `n` sites:
//! - `linear`: `n * f_in * f_out`
//! - `conv3x3`: `n * 9 * f_in * f_out`
//! - `bilinear`: `n * 4 * f_in` (one 4-tap blend of an `f_in` vector)
//! - `gather`, `scatter`: `n * f_in` row copies, tracked as overhead and
//!   excluded from the headline totals.

use std::fmt::Write as _;

use crate::config::{PipelineConfig, REFINE_STAGES};
use crate::error::{ensure, Error, Result};
use crate::params::{ProcessingKind, DEFORM_OFFSETS};
use crate::pipeline::PipelineRun;
use crate::tensor::{ROI_ALIGN_SAMPLING_RATIO, ROI_GRID};

/// One op of the trace with its site counts on both paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub stage: usize,
    /// Head component, e.g. `processing` or `children`.
    pub module: String,
    /// `linear`, `conv3x3`, `bilinear`, `gather` or `scatter`.
    pub op: String,
    pub sparse_sites: u64,
    pub dense_sites: u64,
    pub f_in: u64,
    pub f_out: u64,
}

/// Shapes of one run, enough to count its arithmetic.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
    /// Per stage 0..=3: `(stored rows, dense rows)`.
    pub storage: Vec<(u64, u64)>,
}

impl Trace {
    fn push(&mut self, stage: usize, module: &str, op: &str, sites: (u64, u64), f_in: usize, f_out: usize) {
        self.entries.push(TraceEntry {
            stage,
            module: module.to_string(),
            op: op.to_string(),
            sparse_sites: sites.0,
            dense_sites: sites.1,
            f_in: f_in as u64,
            f_out: f_out as u64,
        });
    }

    fn mlp2(&mut self, stage: usize, module: &str, sites: (u64, u64), f_in: usize, hidden: usize, f_out: usize) {
        self.push(stage, module, "linear", sites, f_in, hidden);
        self.push(stage, module, "linear", sites, hidden, f_out);
    }

    /// Trace of a finished run. The dense path is the same head with every
    /// refinement stage applied at every cell.
    pub fn from_run(run: &PipelineRun, config: &PipelineConfig) -> Result<Self> {
        ensure!(run.stages.len() == REFINE_STAGES + 1, "trace needs all 4 stages, got {}", run.stages.len());
        let mut t = Trace::default();
        let (n_rois, h0, w0) = run.stages[0].grid();
        let f0 = config.feature_dim;
        let cells0 = (n_rois * h0 * w0) as u64;
        let both = (cells0, cells0);
        let samples = (ROI_ALIGN_SAMPLING_RATIO * ROI_ALIGN_SAMPLING_RATIO) as u64;
        t.push(0, "roi_align", "bilinear", (cells0 * samples, cells0 * samples), config.backbone_channels, config.backbone_channels);
        t.mlp2(0, "query_fusion", both, 2 * f0, f0, f0);
        for _ in 0..4 {
            t.push(0, "fcn", "conv3x3", both, f0, f0);
        }
        t.mlp2(0, "seg_head", both, f0, f0, 1);
        t.mlp2(0, "refine_head", both, f0, f0, 1);
        t.storage.push((cells0, cells0));
        debug_assert_eq!((h0, w0), (ROI_GRID, ROI_GRID));

        for s in 1..=REFINE_STAGES {
            let sps = run.stages[s].sps().ok_or_else(|| Error::invalid(format!("stage {s} is not sparse")))?;
            let (f_prev, f) = (config.feature_dim_at(s - 1), config.feature_dim_at(s));
            let parents_dense = (sps.n_cells() / 4) as u64;
            let na = sps.n_active() as u64;
            let np = sps.n_passive() as u64;
            let parents = na / 4;
            let cells = sps.n_cells() as u64;
            let all = (na, cells);
            t.push(s, "partition", "gather", (parents, 0), f_prev, f_prev);
            for _ in 0..4 {
                t.mlp2(s, "children", (parents, parents_dense), f_prev, f_prev, f_prev);
            }
            let cb = config.backbone_sample_dim(s);
            t.push(s, "backbone", "bilinear", all, cb, cb);
            t.mlp2(s, "backbone", all, f_prev + cb, f_prev, f_prev);
            t.push(s, "halve", "linear", (na + np, cells), f_prev, f);
            match config.processing {
                ProcessingKind::Mlp => t.mlp2(s, "processing", all, f, f, f),
                ProcessingKind::Conv => {
                    t.push(s, "processing", "gather", (na * 9, 0), f, f);
                    t.push(s, "processing", "conv3x3", all, f, f);
                }
                ProcessingKind::Deform => {
                    t.push(s, "processing", "linear", all, f, DEFORM_OFFSETS);
                    t.push(s, "processing", "bilinear", (na * 9, cells * 9), f, f);
                    t.push(s, "processing", "conv3x3", all, f, f);
                }
                ProcessingKind::Sfm => {
                    t.push(s, "processing", "gather", (na * 27, 0), f, f);
                    for _ in 0..3 {
                        t.push(s, "processing", "conv3x3", all, f, f);
                    }
                }
            }
            t.mlp2(s, "seg_head", all, f, f, 1);
            t.mlp2(s, "refine_head", all, f, f, 1);
            t.push(s, "processing", "scatter", (na, 0), f, f);
            t.storage.push((na + np, cells));
        }
        Ok(t)
    }
}

/// MACs of `op` at `sites` sites; `None` for overhead ops.
fn op_macs(op: &str, sites: u64, f_in: u64, f_out: u64) -> Result<Option<u64>> {
    Ok(match op {
        "linear" => Some(sites * f_in * f_out),
        "conv3x3" => Some(sites * 9 * f_in * f_out),
        "bilinear" => Some(sites * 4 * f_in),
        "gather" | "scatter" => None,
        other => return Err(Error::invalid(format!("unknown op '{other}' in trace"))),
    })
}

/// Per-op row of a [`FlopReport`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpCount {
    pub stage: usize,
    pub module: String,
    pub op: String,
    pub sparse_macs: u64,
    pub dense_macs: u64,
    pub overhead: bool,
}

/// MAC counts of a traced run. Totals exclude gather/scatter overhead.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub ops: Vec<OpCount>,
    /// Per stage 0..=3: `(sparse, dense)` MACs.
    pub per_stage: Vec<(u64, u64)>,
    pub sparse_total: u64,
    pub dense_total: u64,
    /// Gather/scatter row-copy volume on the sparse path.
    pub sparse_overhead: u64,
    /// Per refinement stage: active cells over all cells.
    pub active_fraction: Vec<f64>,
    /// Per stage 0..=3: `(stored rows, dense rows)`.
    pub storage: Vec<(u64, u64)>,
}

pub fn count_flops(trace: &Trace) -> Result<FlopReport> {
    let stages = trace.storage.len().max(trace.entries.iter().map(|e| e.stage + 1).max().unwrap_or(0));
    let mut report = FlopReport {
        ops: Vec::with_capacity(trace.entries.len()),
        per_stage: vec![(0, 0); stages],
        sparse_total: 0,
        dense_total: 0,
        sparse_overhead: 0,
        active_fraction: Vec::new(),
        storage: trace.storage.clone(),
    };
    for e in &trace.entries {
        let (sparse, dense, overhead) = match op_macs(&e.op, e.sparse_sites, e.f_in, e.f_out)? {
            Some(s) => (s, op_macs(&e.op, e.dense_sites, e.f_in, e.f_out)?.expect("same op"), false),
            None => (e.sparse_sites * e.f_in, e.dense_sites * e.f_in, true),
        };
        if overhead {
            report.sparse_overhead += sparse;
        } else {
            report.per_stage[e.stage].0 += sparse;
            report.per_stage[e.stage].1 += dense;
            report.sparse_total += sparse;
            report.dense_total += dense;
        }
        report.ops.push(OpCount {
            stage: e.stage,
            module: e.module.clone(),
            op: e.op.clone(),
            sparse_macs: sparse,
            dense_macs: dense,
            overhead,
        });
    }
    report.active_fraction = (1..stages)
        .map(|s| {
            trace
                .entries
                .iter()
                .find(|e| e.stage == s && e.module == "seg_head")
                .map(|e| e.sparse_sites as f64 / e.dense_sites.max(1) as f64)
                .unwrap_or(0.0)
        })
        .collect();
    Ok(report)
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl FlopReport {
    /// Sparse over dense MACs of the whole head.
    pub fn ratio(&self) -> f64 {
        ratio(self.sparse_total, self.dense_total)
    }

    /// Sparse over dense MACs of the processing-module convolutions.
    pub fn processing_conv_ratio(&self) -> f64 {
        let (s, d) = self
            .ops
            .iter()
            .filter(|o| o.module == "processing" && o.op == "conv3x3")
            .fold((0, 0), |(s, d), o| (s + o.sparse_macs, d + o.dense_macs));
        ratio(s, d)
    }

    /// Sparse over dense MACs of everything in the refinement stages.
    pub fn refinement_ratio(&self) -> f64 {
        let (s, d) = self.per_stage.iter().skip(1).fold((0, 0), |(s, d), x| (s + x.0, d + x.1));
        ratio(s, d)
    }

    /// Text table, stable column order:
    ///
    /// ```text
    /// flop-report v1
    /// stage module op sparse_macs dense_macs
    /// ...
    /// stage_total <s> <sparse> <dense>
    /// storage <s> <stored_rows> <dense_rows>
    /// active_fraction <s> <f>
    /// total <sparse> <dense>
    /// overhead <sparse>
    /// ratio <r>
    /// processing_conv_ratio <r>
    /// ```
    /// Overhead rows are marked with a trailing `*`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("flop-report v1\nstage module op sparse_macs dense_macs\n");
        for o in &self.ops {
            let mark = if o.overhead { " *" } else { "" };
            let _ = writeln!(s, "{} {} {} {} {}{mark}", o.stage, o.module, o.op, o.sparse_macs, o.dense_macs);
        }
        for (i, (a, b)) in self.per_stage.iter().enumerate() {
            let _ = writeln!(s, "stage_total {i} {a} {b}");
        }
        for (i, (a, b)) in self.storage.iter().enumerate() {
            let _ = writeln!(s, "storage {i} {a} {b}");
        }
        for (i, f) in self.active_fraction.iter().enumerate() {
            let _ = writeln!(s, "active_fraction {} {f:.6}", i + 1);
        }
        let _ = writeln!(s, "total {} {}", self.sparse_total, self.dense_total);
        let _ = writeln!(s, "overhead {}", self.sparse_overhead);
        let _ = writeln!(s, "ratio {:.6}", self.ratio());
        let _ = writeln!(s, "processing_conv_ratio {:.6}", self.processing_conv_ratio());
        s
    }
}
