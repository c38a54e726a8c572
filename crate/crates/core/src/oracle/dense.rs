//! Dense references: every op runs on a fully materialized grid, either at
//! every cell (dense) or at the cells of a mask (sparse-on-dense, other
//! cells copied unchanged).

use crate::config::{PipelineConfig, REFINE_STAGES};
use crate::error::{ensure, Result};
use crate::kernels::sigmoid;
use crate::ops::{backbone_sample_at, conv_at, deform_at, process_at, residual_concat, sfm_at};
use crate::params::{ConvKernel, DeformConvParams, Mlp, ProcessingModule, SfmParams};
use crate::pipeline::{self, AssembledMasks, RunOptions, StageFeatures, StageOutputs};
use crate::sps::RefinementScores;
use crate::tensor::{DenseGrid, FeaturePyramid, RoiBox, RoiDetection};
use crate::weights::PipelineWeights;

/// Cells to update; `None` means every cell.
pub type CellMask<'a> = Option<&'a [bool]>;

fn check_mask(grid: &DenseGrid, mask: CellMask<'_>) -> Result<()> {
    if let Some(m) = mask {
        ensure!(m.len() == grid.n_cells(), "mask covers {} cells, grid has {}", m.len(), grid.n_cells());
    }
    Ok(())
}

/// Writes `f(roi, row, col, input, output)` at masked cells; other cells keep
/// their input feature, which requires `out_channels == channels`.
fn update_cells(
    grid: &DenseGrid,
    mask: CellMask<'_>,
    out_channels: usize,
    mut f: impl FnMut(usize, usize, usize, &[f32], &mut [f32]),
) -> Result<DenseGrid> {
    check_mask(grid, mask)?;
    ensure!(
        mask.is_none() || out_channels == grid.channels(),
        "masked update must preserve the feature size ({} -> {out_channels})",
        grid.channels()
    );
    let (h, w) = (grid.height(), grid.width());
    Ok(grid.map_cells(out_channels, |r, i, j, x, out| {
        if mask.is_none_or(|m| m[(r * h + i) * w + j]) {
            f(r, i, j, x, out);
        } else {
            out.copy_from_slice(x);
        }
    }))
}

fn check_dims(what: &str, (f_in, f_out): (usize, usize), grid: &DenseGrid) -> Result<()> {
    ensure!(f_in == grid.channels(), "{what} expects input dim {f_in}, feature size is {}", grid.channels());
    ensure!(f_out == grid.channels(), "{what} must preserve the feature size");
    Ok(())
}

pub fn dense_pointwise(grid: &DenseGrid, mask: CellMask<'_>, mlp: &Mlp) -> Result<DenseGrid> {
    check_dims("pointwise MLP", (mlp.in_dim(), mlp.out_dim()), grid)?;
    update_cells(grid, mask, mlp.out_dim(), |_, _, _, x, out| out.copy_from_slice(&mlp.forward(x)))
}

pub fn dense_conv3x3(grid: &DenseGrid, mask: CellMask<'_>, kernel: &ConvKernel) -> Result<DenseGrid> {
    check_dims("conv kernel", (kernel.f_in(), kernel.f_out()), grid)?;
    let mut patch = vec![0.0; 9 * kernel.f_in()];
    update_cells(grid, mask, kernel.f_out(), |r, i, j, _, out| {
        conv_at(|a, b| grid.cell_checked(r, a, b), i, j, kernel, &mut patch, out)
    })
}

pub fn dense_deform_conv(grid: &DenseGrid, mask: CellMask<'_>, params: &DeformConvParams) -> Result<DenseGrid> {
    check_dims("deformable conv", (params.f_in(), params.f_out()), grid)?;
    let mut patch = vec![0.0; 9 * params.f_in()];
    update_cells(grid, mask, params.f_out(), |r, i, j, x, out| {
        deform_at(|a, b| grid.cell_checked(r, a, b), x, i, j, params, &mut patch, out)
    })
}

pub fn dense_sfm(grid: &DenseGrid, mask: CellMask<'_>, params: &SfmParams) -> Result<DenseGrid> {
    check_dims("SFM", (params.f_in(), params.f_out()), grid)?;
    let mut patch = vec![0.0; 9 * params.f_in()];
    update_cells(grid, mask, params.f_out(), |r, i, j, _, out| {
        sfm_at(|a, b| grid.cell_checked(r, a, b), i, j, params, &mut patch, out)
    })
}

pub fn dense_process(grid: &DenseGrid, mask: CellMask<'_>, module: &ProcessingModule) -> Result<DenseGrid> {
    check_dims("processing module", module.dims(), grid)?;
    let mut patch = vec![0.0; 9 * module.dims().0];
    update_cells(grid, mask, module.dims().1, |r, i, j, x, out| {
        process_at(|a, b| grid.cell_checked(r, a, b), x, i, j, module, &mut patch, out)
    })
}

/// Projects every cell `F -> F/2`.
pub fn dense_halve(grid: &DenseGrid, mlp: &Mlp) -> Result<DenseGrid> {
    let f = grid.channels();
    ensure!(
        mlp.in_dim() == f && mlp.out_dim() * 2 == f,
        "halving MLP maps {}->{}, expected {f}->{}",
        mlp.in_dim(),
        mlp.out_dim(),
        f / 2
    );
    update_cells(grid, None, f / 2, |_, _, _, x, out| out.copy_from_slice(&mlp.forward(x)))
}

/// Residual backbone fusion at masked cells.
#[allow(clippy::too_many_arguments)]
pub fn dense_fuse_backbone(
    grid: &DenseGrid,
    mask: CellMask<'_>,
    pyramid: &FeaturePyramid,
    boxes: &[RoiBox],
    stage: u32,
    mlp: &Mlp,
    backbone_channels: usize,
) -> Result<DenseGrid> {
    let f = grid.channels();
    ensure!(boxes.len() == grid.n_rois(), "{} boxes for {} RoIs", boxes.len(), grid.n_rois());
    ensure!(
        mlp.in_dim() == f + backbone_channels && mlp.out_dim() == f,
        "backbone fusion MLP maps {}->{}, expected {}->{f}",
        mlp.in_dim(),
        mlp.out_dim(),
        f + backbone_channels
    );
    ensure!(backbone_channels <= pyramid.channels(), "backbone sample size exceeds pyramid channels");
    let (h, w) = (grid.height(), grid.width());
    let mut err = None;
    let out = update_cells(grid, mask, f, |r, i, j, x, out| {
        match backbone_sample_at(pyramid, &boxes[r], stage, h, w, i, j, backbone_channels) {
            Ok(b) => out.copy_from_slice(&residual_concat(x, &b, mlp)),
            Err(e) => err = Some(e),
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Doubles the grid. Children of masked parents come from `children[c]`
/// (`c = 2 * drow + dcol`); other children copy the parent. Returns the
/// grid and the child mask.
pub fn dense_children(grid: &DenseGrid, parents: CellMask<'_>, children: &[Mlp; 4]) -> Result<(DenseGrid, Vec<bool>)> {
    check_mask(grid, parents)?;
    for m in children {
        ensure!(m.in_dim() == grid.channels() && m.out_dim() == grid.channels(), "child MLPs must preserve F");
    }
    let up = grid.upsample_nearest2x();
    let (ph, pw) = (grid.height(), grid.width());
    let (h, w) = (up.height(), up.width());
    let mask: Vec<bool> = (0..up.n_cells())
        .map(|flat| {
            let (r, i, j) = (flat / (h * w), flat / w % h, flat % w);
            parents.is_none_or(|m| m[(r * ph + i / 2) * pw + j / 2])
        })
        .collect();
    let out = update_cells(&up, Some(&mask), up.channels(), |_, i, j, x, out| {
        out.copy_from_slice(&children[2 * (i % 2) + j % 2].forward(x))
    })?;
    Ok((out, mask))
}

/// One stage on a materialized grid. `seg_logits` / `refine_logits` hold a
/// value for every cell; only cells with `predicted[cell]` carry a
/// prediction, the rest are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStage {
    pub stage: usize,
    pub features: DenseGrid,
    pub seg_logits: Vec<f32>,
    pub refine_logits: Vec<f32>,
    pub predicted: Vec<bool>,
}

impl DenseStage {
    /// Materializes a pipeline stage: features via `to_dense`, logits
    /// scattered to their cells.
    pub fn from_outputs(out: &StageOutputs) -> Self {
        let features = out.dense_features();
        let n = features.n_cells();
        let mut stage =
            Self { stage: out.stage, features, seg_logits: vec![0.0; n], refine_logits: vec![0.0; n], predicted: vec![false; n] };
        for (k, flat) in out.predicted_cells().into_iter().enumerate() {
            stage.seg_logits[flat] = out.seg_logits[k];
            stage.refine_logits[flat] = out.refine_logits[k];
            stage.predicted[flat] = true;
        }
        stage
    }

    /// `(n_rois, height, width)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.features.n_rois(), self.features.height(), self.features.width())
    }
}

/// Refinement stage `stage` updating only the children of `active_parents`
/// (cells of `prev`); `None` updates every cell (the dense stage).
#[allow(clippy::too_many_arguments)]
pub fn sparse_on_dense_oracle(
    prev: &DenseGrid,
    active_parents: CellMask<'_>,
    stage: usize,
    pyramid: &FeaturePyramid,
    rois: &[RoiDetection],
    weights: &PipelineWeights,
    config: &PipelineConfig,
) -> Result<DenseStage> {
    ensure!((1..=REFINE_STAGES).contains(&stage), "refinement stage must be 1..=3, got {stage}");
    ensure!(
        prev.channels() == config.feature_dim_at(stage - 1),
        "stage {stage} expects F_{}={} input features, got {}",
        stage - 1,
        config.feature_dim_at(stage - 1),
        prev.channels()
    );
    let sw = &weights.stages[stage - 1];
    let boxes: Vec<RoiBox> = rois.iter().map(|r| r.bbox).collect();
    let (x, mask) = dense_children(prev, active_parents, &sw.children)?;
    let x = dense_fuse_backbone(
        &x,
        Some(&mask),
        pyramid,
        &boxes,
        stage as u32,
        &sw.backbone_fusion,
        config.backbone_sample_dim(stage),
    )?;
    let x = dense_halve(&x, &sw.halve)?;
    let x = dense_process(&x, Some(&mask), &sw.processing)?;
    let n = x.n_cells();
    let (mut seg_logits, mut refine_logits) = (vec![0.0; n], vec![0.0; n]);
    for flat in (0..n).filter(|&c| mask[c]) {
        let cell = x.cell_flat(flat);
        seg_logits[flat] = sw.seg_head.forward(cell)[0];
        refine_logits[flat] = sw.refine_head.forward(cell)[0];
    }
    Ok(DenseStage { stage, features: x, seg_logits, refine_logits, predicted: mask })
}

/// Refinement stage `stage` evaluated at every cell of the doubled grid.
pub fn dense_stage_oracle(
    prev: &DenseGrid,
    stage: usize,
    pyramid: &FeaturePyramid,
    rois: &[RoiDetection],
    weights: &PipelineWeights,
    config: &PipelineConfig,
) -> Result<DenseStage> {
    sparse_on_dense_oracle(prev, None, stage, pyramid, rois, weights, config)
}

/// Stages and assembled masks of an oracle run.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRun {
    pub stages: Vec<DenseStage>,
    pub masks: AssembledMasks,
    /// Scores the selection at stages 1..=3 was made with (empty for the
    /// fully dense run).
    pub selection_scores: Vec<RefinementScores>,
}

/// Probability maps per stage: sigmoid at stage 0, then x2 nearest copies
/// overwritten at predicted cells.
fn overwrite_chain(stages: &[DenseStage], pick: impl Fn(&DenseStage) -> &[f32]) -> Vec<Vec<f32>> {
    let mut levels: Vec<Vec<f32>> = Vec::new();
    for st in stages {
        let (n, h, w) = st.grid();
        let mut cur = vec![0.0; n * h * w];
        for (flat, v) in cur.iter_mut().enumerate() {
            if st.predicted[flat] {
                *v = sigmoid(pick(st)[flat]);
            } else if let Some(prev) = levels.last() {
                let (r, i, j) = (flat / (h * w), flat / w % h, flat % w);
                *v = prev[(r * (h / 2) + i / 2) * (w / 2) + j / 2];
            }
        }
        levels.push(cur);
    }
    levels
}

fn dense_stage0(pyramid: &FeaturePyramid, rois: &[RoiDetection], weights: &PipelineWeights) -> Result<DenseStage> {
    let out = pipeline::stage0(pyramid, rois, weights)?;
    debug_assert!(matches!(out.features, StageFeatures::Dense(_)));
    Ok(DenseStage::from_outputs(&out))
}

fn finish(stages: Vec<DenseStage>, selection_scores: Vec<RefinementScores>) -> DenseRun {
    let n_rois = stages[0].grid().0;
    let masks = AssembledMasks { n_rois, levels: overwrite_chain(&stages, |s| &s.seg_logits) };
    DenseRun { stages, masks, selection_scores }
}

/// The dense reference head: every stage processes every cell.
pub fn run_dense_pipeline(
    pyramid: &FeaturePyramid,
    rois: &[RoiDetection],
    weights: &PipelineWeights,
    config: &PipelineConfig,
) -> Result<DenseRun> {
    config.validate()?;
    let mut stages = vec![dense_stage0(pyramid, rois, weights)?];
    for s in 1..=REFINE_STAGES {
        let next = dense_stage_oracle(&stages[s - 1].features, s, pyramid, rois, weights, config)?;
        stages.push(next);
    }
    Ok(finish(stages, Vec::new()))
}

/// The sparse-on-dense reference head: same selection rule and budgets as
/// the sparse pipeline, computed on materialized grids.
pub fn run_sparse_on_dense_pipeline(
    pyramid: &FeaturePyramid,
    rois: &[RoiDetection],
    weights: &PipelineWeights,
    config: &PipelineConfig,
    opts: &RunOptions,
) -> Result<DenseRun> {
    config.validate()?;
    let mut stages = vec![dense_stage0(pyramid, rois, weights)?];
    let mut selection_scores = Vec::with_capacity(REFINE_STAGES);
    for s in 1..=REFINE_STAGES {
        let scores = match &opts.score_override {
            Some(o) => o[s - 1].clone(),
            None => {
                let (n, h, w) = stages[s - 1].grid();
                let levels = overwrite_chain(&stages, |st| &st.refine_logits);
                RefinementScores::new(n, h, w, levels.into_iter().last().expect("nonempty"))?
            }
        };
        let prev = &stages[s - 1];
        let (n, h, w) = prev.grid();
        ensure!(scores.layout() == (n, h, w), "stage {s} scores do not match the {n}x{h}x{w} grid");
        let mut parents = vec![false; n * h * w];
        for flat in scores.top_k(opts.budgets[s - 1]) {
            parents[flat] = true;
        }
        let next = sparse_on_dense_oracle(&prev.features, Some(&parents), s, pyramid, rois, weights, config)?;
        selection_scores.push(scores);
        stages.push(next);
    }
    Ok(finish(stages, selection_scores))
}
