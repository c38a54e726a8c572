//! 2D operations evaluated only at the active cells of an [`SpsMap`].
//!
//! Each op computes new active rows, then performs one scatter. Passive
//! rows and the index grid are shared with the input, except for
//! [`halve_features`] which projects passive rows too.
//!
//! The per-cell kernels (`*_at`) take a feature lookup closure so the dense
//! reference path in [`crate::oracle`] can run the exact same arithmetic
//! over a materialized grid.

use crate::error::{ensure, Result};
use crate::kernels::{self, gather_patch, relu_in_place};
use crate::params::{ConvKernel, DeformConvParams, Mlp, ProcessingModule, SfmParams};
use crate::sps::{CellId, FeatureMatrix, SpsMap};
use crate::tensor::{level_select_initial, level_select_stage, DenseGrid, FeaturePyramid, RoiBox};

/// 3x3 convolution output at one cell.
pub(crate) fn conv_at<'a, F>(fetch: F, row: usize, col: usize, kernel: &ConvKernel, patch: &mut [f32], out: &mut [f32])
where
    F: Fn(i64, i64) -> Option<&'a [f32]>,
{
    gather_patch(fetch, row as i64, col as i64, kernel.dilation() as i64, patch);
    kernel.contract(patch, out);
}

/// Deformable 3x3 convolution output at one cell with feature `own`.
pub(crate) fn deform_at<'a, F>(
    fetch: F,
    own: &[f32],
    row: usize,
    col: usize,
    params: &DeformConvParams,
    patch: &mut [f32],
    out: &mut [f32],
) where
    F: Fn(i64, i64) -> Option<&'a [f32]> + Copy,
{
    let offsets = params.offset_predictor().forward(own);
    let f_in = params.f_in();
    for t in 0..9 {
        let ky = (t / 3) as f64 - 1.0;
        let kx = (t % 3) as f64 - 1.0;
        let y = row as f64 + 0.5 + ky + f64::from(offsets[2 * t]);
        let x = col as f64 + 0.5 + kx + f64::from(offsets[2 * t + 1]);
        kernels::bilinear(y, x, fetch, &mut patch[t * f_in..(t + 1) * f_in]);
    }
    params.base().contract(patch, out);
}

/// Sum of the three dilated convolutions at one cell, then ReLU.
pub(crate) fn sfm_at<'a, F>(fetch: F, row: usize, col: usize, params: &SfmParams, patch: &mut [f32], out: &mut [f32])
where
    F: Fn(i64, i64) -> Option<&'a [f32]> + Copy,
{
    let mut tmp = vec![0.0; out.len()];
    let [c1, c3, c5] = params.convs();
    conv_at(fetch, row, col, c1, patch, out);
    for k in [c3, c5] {
        conv_at(fetch, row, col, k, patch, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += *t;
        }
    }
    relu_in_place(out);
}

/// Processing-module output at one cell.
pub(crate) fn process_at<'a, F>(
    fetch: F,
    own: &[f32],
    row: usize,
    col: usize,
    module: &ProcessingModule,
    patch: &mut [f32],
    out: &mut [f32],
) where
    F: Fn(i64, i64) -> Option<&'a [f32]> + Copy,
{
    match module {
        ProcessingModule::Mlp(m) => out.copy_from_slice(&m.forward(own)),
        ProcessingModule::Conv(k) => {
            conv_at(fetch, row, col, k, patch, out);
            relu_in_place(out);
        }
        ProcessingModule::Deform(p) => {
            deform_at(fetch, own, row, col, p, patch, out);
            relu_in_place(out);
        }
        ProcessingModule::Sfm(p) => sfm_at(fetch, row, col, p, patch, out),
    }
}

/// `x + mlp(concat(x, extra))`.
pub(crate) fn residual_concat(x: &[f32], extra: &[f32], mlp: &Mlp) -> Vec<f32> {
    let mut cat = Vec::with_capacity(x.len() + extra.len());
    cat.extend_from_slice(x);
    cat.extend_from_slice(extra);
    let delta = mlp.forward(&cat);
    x.iter().zip(delta).map(|(a, d)| a + d).collect()
}

/// Backbone feature for cell `(row, col)` of an `h x w` grid over `bbox`,
/// sampled from `P_{k_s}` at the cell center.
pub(crate) fn backbone_sample_at(
    pyramid: &FeaturePyramid,
    bbox: &RoiBox,
    stage: u32,
    h: usize,
    w: usize,
    row: usize,
    col: usize,
    channels: usize,
) -> Result<Vec<f32>> {
    let level = level_select_stage(level_select_initial(bbox)?, stage);
    let (y, x) = bbox.cell_center(h, w, row, col);
    let mut out = vec![0.0; channels];
    pyramid.sample_image_point(level, y, x, &mut out)?;
    Ok(out)
}

fn check_in(what: &str, expected: usize, got: usize) -> Result<()> {
    ensure!(expected == got, "{what} expects input dim {expected}, feature size is {got}");
    Ok(())
}

fn map_active(
    sps: &SpsMap,
    out_dim: usize,
    mut f: impl FnMut(CellId, &[f32], &mut [f32]),
) -> Result<SpsMap> {
    let cells = sps.active_cells();
    let out = sps.active().map_rows(out_dim, |a, row, dst| f(cells[a], row, dst));
    sps.scatter_update(out)
}

/// Applies `mlp` to every active row independently.
pub fn sparse_pointwise(sps: &SpsMap, mlp: &Mlp) -> Result<SpsMap> {
    check_in("pointwise MLP", mlp.in_dim(), sps.features())?;
    ensure!(mlp.out_dim() == sps.features(), "pointwise MLP must preserve the feature size");
    map_active(sps, mlp.out_dim(), |_, row, dst| dst.copy_from_slice(&mlp.forward(row)))
}

/// 3x3 convolution (any dilation) at every active cell, reading neighbors
/// through the index grid with zero padding.
pub fn sparse_conv3x3(sps: &SpsMap, kernel: &ConvKernel) -> Result<SpsMap> {
    check_in("conv kernel", kernel.f_in(), sps.features())?;
    ensure!(kernel.f_out() == sps.features(), "sparse conv must preserve the feature size");
    let mut patch = vec![0.0; 9 * kernel.f_in()];
    map_active(sps, kernel.f_out(), |c, _, dst| {
        conv_at(|i, j| sps.lookup(c.roi, i, j), c.row, c.col, kernel, &mut patch, dst)
    })
}

/// Deformable 3x3 convolution: offsets predicted from each active feature,
/// taps fetched by bilinear gathers.
pub fn sparse_deform_conv(sps: &SpsMap, params: &DeformConvParams) -> Result<SpsMap> {
    check_in("deformable conv", params.f_in(), sps.features())?;
    ensure!(params.f_out() == sps.features(), "deformable conv must preserve the feature size");
    let mut patch = vec![0.0; 9 * params.f_in()];
    map_active(sps, params.f_out(), |c, own, dst| {
        deform_at(|i, j| sps.lookup(c.roi, i, j), own, c.row, c.col, params, &mut patch, dst)
    })
}

/// Sum of dilation-1/3/5 convolutions of the same input, then ReLU.
pub fn sfm(sps: &SpsMap, params: &SfmParams) -> Result<SpsMap> {
    check_in("SFM", params.f_in(), sps.features())?;
    ensure!(params.f_out() == sps.features(), "SFM must preserve the feature size");
    let mut patch = vec![0.0; 9 * params.f_in()];
    map_active(sps, params.f_out(), |c, _, dst| {
        sfm_at(|i, j| sps.lookup(c.roi, i, j), c.row, c.col, params, &mut patch, dst)
    })
}

/// Runs whichever processing module `module` holds.
pub fn apply_processing(sps: &SpsMap, module: &ProcessingModule) -> Result<SpsMap> {
    let (f_in, f_out) = module.dims();
    check_in("processing module", f_in, sps.features())?;
    ensure!(f_out == sps.features(), "processing module must preserve the feature size");
    let mut patch = vec![0.0; 9 * f_in];
    map_active(sps, f_out, |c, own, dst| {
        process_at(|i, j| sps.lookup(c.roi, i, j), own, c.row, c.col, module, &mut patch, dst)
    })
}

/// Residual query fusion on a dense grid:
/// `out[r, :, i, j] = x + mlp(concat(x, query[r]))`.
pub fn fuse_query(grid: &DenseGrid, queries: &[Vec<f32>], mlp: &Mlp) -> Result<DenseGrid> {
    let f = grid.channels();
    ensure!(queries.len() == grid.n_rois(), "{} queries for {} RoIs", queries.len(), grid.n_rois());
    for q in queries {
        ensure!(q.len() == f, "query dim {} does not match feature size {f}", q.len());
    }
    ensure!(
        mlp.in_dim() == 2 * f && mlp.out_dim() == f,
        "query fusion MLP maps {}->{}, expected {}->{f}",
        mlp.in_dim(),
        mlp.out_dim(),
        2 * f
    );
    Ok(grid.map_cells(f, |r, _, _, x, out| out.copy_from_slice(&residual_concat(x, &queries[r], mlp))))
}

/// Residual fusion of each active feature with the backbone feature sampled
/// at its cell center from level `k_s` of the pyramid. Only the first
/// `backbone_channels` pyramid channels are used.
pub fn fuse_backbone(
    sps: &SpsMap,
    pyramid: &FeaturePyramid,
    boxes: &[RoiBox],
    stage: u32,
    mlp: &Mlp,
    backbone_channels: usize,
) -> Result<SpsMap> {
    let f = sps.features();
    ensure!(boxes.len() == sps.n_rois(), "{} boxes for {} RoIs", boxes.len(), sps.n_rois());
    ensure!(
        backbone_channels >= 1 && backbone_channels <= pyramid.channels(),
        "backbone sample size {backbone_channels} exceeds pyramid channels {}",
        pyramid.channels()
    );
    ensure!(
        mlp.in_dim() == f + backbone_channels && mlp.out_dim() == f,
        "backbone fusion MLP maps {}->{}, expected {}->{f}",
        mlp.in_dim(),
        mlp.out_dim(),
        f + backbone_channels
    );
    let cells = sps.active_cells();
    let (h, w) = (sps.height(), sps.width());
    let mut out = FeatureMatrix::zeros(sps.n_active(), f);
    for (a, c) in cells.iter().enumerate() {
        let b = backbone_sample_at(pyramid, &boxes[c.roi], stage, h, w, c.row, c.col, backbone_channels)?;
        out.row_mut(a).copy_from_slice(&residual_concat(sps.active().row(a), &b, mlp));
    }
    sps.scatter_update(out)
}

/// Projects active AND passive rows through the same one-layer map
/// `F -> F/2`; the index grid is unchanged.
pub fn halve_features(sps: &SpsMap, mlp: &Mlp) -> Result<SpsMap> {
    let f = sps.features();
    ensure!(f.is_multiple_of(2), "cannot halve odd feature size {f}");
    ensure!(mlp.layers().len() == 1, "feature halving uses a one-layer MLP");
    ensure!(
        mlp.in_dim() == f && mlp.out_dim() == f / 2,
        "halving MLP maps {}->{}, expected {f}->{}",
        mlp.in_dim(),
        mlp.out_dim(),
        f / 2
    );
    let project = |m: &FeatureMatrix| m.map_rows(f / 2, |_, row, dst| dst.copy_from_slice(&mlp.forward(row)));
    Ok(sps.replace_features(project(sps.active()), project(sps.passive())))
}
