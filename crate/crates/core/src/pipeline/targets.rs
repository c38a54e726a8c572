//! Training targets and forward loss evaluation.

use super::StageOutputs;
use crate::error::{ensure, Result};
use crate::shape::{MaskSampler, Shape};
use crate::tensor::{RoiBox, RoiDetection};

/// Sub-samples per cell side used to decide whether a cell is mixed.
pub const REFINE_PROBE: usize = 7;

/// Segmentation loss weight of stages 0..=3.
pub const SEG_LOSS_WEIGHTS: [f64; 4] = [0.25, 0.375, 0.375, 0.5];

/// Refinement loss weight of stages 0..=3.
pub const REFINE_LOSS_WEIGHTS: [f64; 4] = [0.25; 4];

/// Ground truth of one RoI: an image-space mask and a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mask: Shape,
    pub label: u32,
}

impl MaskSampler for GroundTruth {
    fn contains(&self, x: f64, y: f64) -> bool {
        self.mask.contains(x, y)
    }
}

/// `(seg, refine)` targets of cell `(row, col)` of an `h x w` grid over `bbox`.
pub fn cell_targets(gt: &impl MaskSampler, bbox: &RoiBox, h: usize, w: usize, row: usize, col: usize) -> (f32, f32) {
    let (cy, cx) = bbox.cell_center(h, w, row, col);
    let seg = if gt.contains(cx, cy) { 1.0 } else { 0.0 };
    let (mut fg, mut bg) = (false, false);
    'probe: for a in 0..REFINE_PROBE {
        for b in 0..REFINE_PROBE {
            let fr = row as f64 + (a as f64 + 0.5) / REFINE_PROBE as f64;
            let fc = col as f64 + (b as f64 + 0.5) / REFINE_PROBE as f64;
            let (y, x) = bbox.cell_point(h, w, fr, fc);
            if gt.contains(x, y) {
                fg = true;
            } else {
                bg = true;
            }
            if fg && bg {
                break 'probe;
            }
        }
    }
    (seg, if fg && bg { 1.0 } else { 0.0 })
}

/// Targets of every cell of an `h x w` grid, row-major.
pub fn make_targets(gt: &impl MaskSampler, bbox: &RoiBox, h: usize, w: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    bbox.validate()?;
    ensure!(h > 0 && w > 0, "target grid must be non-empty, got {h}x{w}");
    Ok((0..h * w).map(|c| cell_targets(gt, bbox, h, w, c / w, c % w)).unzip())
}

/// Targets aligned with one stage's predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTargets {
    pub seg: Vec<f32>,
    pub refine: Vec<f32>,
}

/// Targets for every stage of a run: all cells at stage 0, active cells only
/// afterwards.
pub fn targets_for_run(gts: &[GroundTruth], rois: &[RoiDetection], stages: &[StageOutputs]) -> Result<Vec<StageTargets>> {
    ensure!(gts.len() == rois.len(), "{} ground truths for {} RoIs", gts.len(), rois.len());
    stages
        .iter()
        .map(|st| {
            let (n, h, w) = st.grid();
            ensure!(n == rois.len(), "stage {} covers {n} RoIs, expected {}", st.stage, rois.len());
            let (seg, refine) = st
                .predicted_cells()
                .into_iter()
                .map(|flat| {
                    let (r, cell) = (flat / (h * w), flat % (h * w));
                    cell_targets(&gts[r], &rois[r].bbox, h, w, cell / w, cell % w)
                })
                .unzip();
            Ok(StageTargets { seg, refine })
        })
        .collect()
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logits(logit: f32, target: f32) -> f64 {
    let (x, t) = (f64::from(logit), f64::from(target));
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Per-stage mean losses and the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub seg: Vec<f64>,
    pub refine: Vec<f64>,
    pub total: f64,
}

fn mean_bce(logits: &[f32], targets: &[f32]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().zip(targets).map(|(&l, &t)| bce_with_logits(l, t)).sum::<f64>() / logits.len() as f64
}

/// Mean BCE per stage; an empty stage contributes 0.
pub fn eval_losses(stages: &[StageOutputs], targets: &[StageTargets]) -> Result<LossReport> {
    ensure!(stages.len() == targets.len(), "{} stages but {} target sets", stages.len(), targets.len());
    ensure!(stages.len() <= 4, "at most 4 stages, got {}", stages.len());
    let mut report = LossReport { seg: Vec::new(), refine: Vec::new(), total: 0.0 };
    for (s, (st, t)) in stages.iter().zip(targets).enumerate() {
        ensure!(
            t.seg.len() == st.seg_logits.len() && t.refine.len() == st.refine_logits.len(),
            "stage {s}: {} seg / {} refine targets for {} / {} predictions",
            t.seg.len(),
            t.refine.len(),
            st.seg_logits.len(),
            st.refine_logits.len()
        );
        let seg = mean_bce(&st.seg_logits, &t.seg);
        let refine = mean_bce(&st.refine_logits, &t.refine);
        report.total += SEG_LOSS_WEIGHTS[s] * seg + REFINE_LOSS_WEIGHTS[s] * refine;
        report.seg.push(seg);
        report.refine.push(refine);
    }
    Ok(report)
}
