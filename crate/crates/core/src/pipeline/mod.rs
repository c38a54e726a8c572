//! The mask head: a dense stage 0 on a 14x14 RoI grid followed by three
//! sparse refinement stages (28, 56, 112), each refining only the
//! top-scoring cells of the previous grid.

mod masks;
mod targets;

pub use masks::{
    assemble_masks, assemble_refine_scores, build_mask_stacks, paste_roi, rle_encode, score, write_mask_records,
    write_pgm, AssembledMasks, MaskStack,
};
pub use targets::{
    bce_with_logits, cell_targets, eval_losses, make_targets, targets_for_run, GroundTruth, LossReport, StageTargets,
    REFINE_LOSS_WEIGHTS, REFINE_PROBE, SEG_LOSS_WEIGHTS,
};

use crate::config::{PipelineConfig, REFINE_STAGES};
use crate::error::{ensure, Result};
use crate::kernels::relu_in_place;
use crate::ops;
use crate::params::Mlp;
use crate::sps::{RefinementScores, SpsMap};
use crate::tensor::{dense_conv2d, roi_align_all, DenseGrid, FeaturePyramid, RoiBox, RoiDetection, ROI_GRID};
use crate::weights::PipelineWeights;

/// Features carried out of a stage.
#[derive(Debug, Clone, PartialEq)]
pub enum StageFeatures {
    Dense(DenseGrid),
    Sparse(SpsMap),
}

/// Predictions of one stage. At stage 0 the logits cover every cell of the
/// dense grid (flat `[roi][row][col]`); at later stages they are aligned
/// with the active rows of the stage's [`SpsMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs {
    pub stage: usize,
    pub seg_logits: Vec<f32>,
    pub refine_logits: Vec<f32>,
    pub features: StageFeatures,
}

impl StageOutputs {
    /// `(n_rois, height, width)` of the stage grid.
    pub fn grid(&self) -> (usize, usize, usize) {
        match &self.features {
            StageFeatures::Dense(g) => (g.n_rois(), g.height(), g.width()),
            StageFeatures::Sparse(s) => (s.n_rois(), s.height(), s.width()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.features {
            StageFeatures::Dense(g) => g.channels(),
            StageFeatures::Sparse(s) => s.features(),
        }
    }

    /// Flat cell of every prediction, in logit order.
    pub fn predicted_cells(&self) -> Vec<usize> {
        match &self.features {
            StageFeatures::Dense(g) => (0..g.n_cells()).collect(),
            StageFeatures::Sparse(s) => s.active_cells().into_iter().map(|c| s.flat(c)).collect(),
        }
    }

    /// Materialized features of every cell.
    pub fn dense_features(&self) -> DenseGrid {
        match &self.features {
            StageFeatures::Dense(g) => g.clone(),
            StageFeatures::Sparse(s) => s.to_dense(),
        }
    }

    pub fn sps(&self) -> Option<&SpsMap> {
        match &self.features {
            StageFeatures::Sparse(s) => Some(s),
            StageFeatures::Dense(_) => None,
        }
    }

    /// Checks that logit layouts match the grid or the active set.
    pub fn check(&self) -> Result<()> {
        let n = match &self.features {
            StageFeatures::Dense(g) => g.n_cells(),
            StageFeatures::Sparse(s) => s.n_active(),
        };
        ensure!(
            self.seg_logits.len() == n && self.refine_logits.len() == n,
            "stage {} has {} seg / {} refine logits for {n} predicted cells",
            self.stage,
            self.seg_logits.len(),
            self.refine_logits.len()
        );
        Ok(())
    }
}

/// Applies the segmentation and refinement heads to each feature row.
pub(crate) fn apply_heads<'a>(rows: impl Iterator<Item = &'a [f32]>, seg: &Mlp, refine: &Mlp) -> (Vec<f32>, Vec<f32>) {
    rows.map(|r| (seg.forward(r)[0], refine.forward(r)[0])).unzip()
}

/// Dense stage 0: RoIAlign, query fusion, 4-layer FCN, per-cell heads.
pub fn stage0(pyramid: &FeaturePyramid, rois: &[RoiDetection], weights: &PipelineWeights) -> Result<StageOutputs> {
    let aligned = roi_align_all(pyramid, rois)?;
    let queries: Vec<Vec<f32>> = rois.iter().map(|r| r.query.clone()).collect();
    let mut x = ops::fuse_query(&aligned, &queries, &weights.query_fusion)?;
    for (i, k) in weights.fcn.iter().enumerate() {
        x = dense_conv2d(&x, k)?;
        // ReLU separates consecutive convolutions.
        if i + 1 < weights.fcn.len() {
            x = x.map_cells(x.channels(), |_, _, _, v, out| {
                out.copy_from_slice(v);
                relu_in_place(out);
            });
        }
    }
    let (seg_logits, refine_logits) =
        apply_heads((0..x.n_cells()).map(|c| x.cell_flat(c)), &weights.seg_head, &weights.refine_head);
    debug_assert_eq!(x.height(), ROI_GRID);
    Ok(StageOutputs { stage: 0, seg_logits, refine_logits, features: StageFeatures::Dense(x) })
}

/// One sparse refinement stage `s` in `1..=3`.
///
/// Partitions the previous grid by `scores` (top `k` cells), doubles the
/// grid with the child MLPs, fuses backbone features sampled at active cell
/// centers, halves the feature size, runs the processing module and
/// predicts at the active cells.
#[allow(clippy::too_many_arguments)]
pub fn refine_stage(
    prev: &StageOutputs,
    scores: &RefinementScores,
    stage: usize,
    pyramid: &FeaturePyramid,
    rois: &[RoiDetection],
    weights: &PipelineWeights,
    config: &PipelineConfig,
    k: usize,
) -> Result<StageOutputs> {
    ensure!((1..=REFINE_STAGES).contains(&stage), "refinement stage must be 1..=3, got {stage}");
    ensure!(prev.stage + 1 == stage, "stage {stage} cannot follow stage {}", prev.stage);
    ensure!(
        prev.feature_dim() == config.feature_dim_at(stage - 1),
        "stage {stage} expects F_{}={} input features, got {}",
        stage - 1,
        config.feature_dim_at(stage - 1),
        prev.feature_dim()
    );
    let sw = &weights.stages[stage - 1];
    let boxes: Vec<RoiBox> = rois.iter().map(|r| r.bbox).collect();
    let sps = match &prev.features {
        StageFeatures::Dense(g) => SpsMap::build_from_dense(g, scores, k)?,
        StageFeatures::Sparse(m) => m.update_partition(scores, k)?,
    };
    let sps = sps.upsample_split(&sw.children)?;
    let sps = ops::fuse_backbone(
        &sps,
        pyramid,
        &boxes,
        stage as u32,
        &sw.backbone_fusion,
        config.backbone_sample_dim(stage),
    )?;
    let sps = ops::halve_features(&sps, &sw.halve)?;
    let sps = ops::apply_processing(&sps, &sw.processing)?;
    let active = sps.active();
    let (seg_logits, refine_logits) =
        apply_heads((0..active.rows()).map(|a| active.row(a)), &sw.seg_head, &sw.refine_head);
    Ok(StageOutputs { stage, seg_logits, refine_logits, features: StageFeatures::Sparse(sps) })
}

/// Per-run knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Top-K budget for stages 1, 2, 3.
    pub budgets: [usize; REFINE_STAGES],
    /// Replaces the predicted refinement scores used for selection at stages
    /// 1, 2, 3 (scores live on the grid of the previous stage).
    pub score_override: Option<[RefinementScores; REFINE_STAGES]>,
}

impl RunOptions {
    pub fn from_config(config: &PipelineConfig) -> Self {
        Self { budgets: [config.top_k; REFINE_STAGES], score_override: None }
    }
}

/// A full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    /// Stages 0..=3.
    pub stages: Vec<StageOutputs>,
    /// Scores the selection at stages 1..=3 was made with.
    pub selection_scores: Vec<RefinementScores>,
}

impl PipelineRun {
    pub fn masks(&self) -> Result<AssembledMasks> {
        assemble_masks(&self.stages)
    }
}

/// Runs stage 0 and the three refinement stages. Without an override, the
/// selection scores of stage `s` are the sigmoid of the refinement logits
/// assembled on the previous grid (nearest upsampling, overwritten where the
/// previous stage predicted).
pub fn run_pipeline(
    pyramid: &FeaturePyramid,
    rois: &[RoiDetection],
    weights: &PipelineWeights,
    config: &PipelineConfig,
    opts: &RunOptions,
) -> Result<PipelineRun> {
    config.validate()?;
    for (i, r) in rois.iter().enumerate() {
        ensure!(
            r.query.len() == config.feature_dim,
            "RoI {i}: query dim {} does not match feature_dim {}",
            r.query.len(),
            config.feature_dim
        );
    }
    ensure!(
        pyramid.channels() == config.backbone_channels,
        "pyramid has {} channels, config expects backbone_channels={}",
        pyramid.channels(),
        config.backbone_channels
    );
    let mut stages = vec![stage0(pyramid, rois, weights)?];
    let mut selection_scores = Vec::with_capacity(REFINE_STAGES);
    for s in 1..=REFINE_STAGES {
        let scores = match &opts.score_override {
            Some(o) => o[s - 1].clone(),
            None => assemble_refine_scores(&stages)?,
        };
        let out = refine_stage(&stages[s - 1], &scores, s, pyramid, rois, weights, config, opts.budgets[s - 1])?;
        selection_scores.push(scores);
        stages.push(out);
    }
    Ok(PipelineRun { stages, selection_scores })
}

/// Convenience holder for a validated config and matching weights.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub weights: PipelineWeights,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, weights: PipelineWeights) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        Ok(Self { config, weights })
    }

    pub fn run(&self, pyramid: &FeaturePyramid, rois: &[RoiDetection], opts: &RunOptions) -> Result<PipelineRun> {
        run_pipeline(pyramid, rois, &self.weights, &self.config, opts)
    }
}
