//! Seeded random instances of every data type, for randomized checks.
//!
//! `integer` instances draw small integers so every intermediate value is
//! exactly representable and results can be compared bit for bit.

use rand::Rng;

use crate::error::Result;
use crate::params::{ConvKernel, DeformConvParams, Linear, Mlp, ProcessingKind, ProcessingModule, SfmParams, DEFORM_OFFSETS};
use crate::sps::{RefinementScores, SpsMap};
use crate::tensor::{DenseGrid, FeaturePyramid, RoiBox};

pub fn values(rng: &mut impl Rng, n: usize, integer: bool) -> Vec<f32> {
    (0..n)
        .map(|_| if integer { rng.gen_range(-2i32..=2) as f32 } else { rng.gen_range(-1.0f32..1.0) })
        .collect()
}

/// Weights scaled so activations stay O(1) over several layers.
fn weights(rng: &mut impl Rng, n: usize, fan_in: usize, integer: bool) -> Vec<f32> {
    if integer {
        return (0..n).map(|_| rng.gen_range(-1i32..=1) as f32).collect();
    }
    let s = 1.0 / (fan_in as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

pub fn linear(rng: &mut impl Rng, in_dim: usize, out_dim: usize, integer: bool) -> Linear {
    let w = weights(rng, in_dim * out_dim, in_dim, integer);
    let b = weights(rng, out_dim, in_dim, integer);
    Linear::new(in_dim, out_dim, w, b).expect("shapes match")
}

/// One or two layers (`hidden` is used when `layers == 2`).
pub fn mlp(rng: &mut impl Rng, in_dim: usize, hidden: usize, out_dim: usize, layers: usize, integer: bool) -> Mlp {
    if layers == 1 {
        Mlp::single(linear(rng, in_dim, out_dim, integer))
    } else {
        Mlp::two_layer(linear(rng, in_dim, hidden, integer), linear(rng, hidden, out_dim, integer)).expect("chained")
    }
}

pub fn conv(rng: &mut impl Rng, f_in: usize, f_out: usize, dilation: usize, integer: bool) -> ConvKernel {
    let w = weights(rng, f_in * f_out * 9, 9 * f_in, integer);
    let b = weights(rng, f_out, 9 * f_in, integer);
    ConvKernel::new(f_in, f_out, dilation, &w, b).expect("shapes match")
}

pub fn sfm(rng: &mut impl Rng, f: usize, integer: bool) -> SfmParams {
    SfmParams::new([conv(rng, f, f, 1, integer), conv(rng, f, f, 3, integer), conv(rng, f, f, 5, integer)])
        .expect("dilations 1, 3, 5")
}

/// Offsets span a few cells; integer instances predict integer offsets.
pub fn deform(rng: &mut impl Rng, f: usize, integer: bool) -> DeformConvParams {
    let base = conv(rng, f, f, 1, integer);
    let n = f * DEFORM_OFFSETS;
    let (w, b) = if integer {
        let pick = |rng: &mut dyn rand::RngCore| if rng.gen_bool(0.1) { [-1.0, 1.0][rng.gen_range(0..2)] } else { 0.0 };
        ((0..n).map(|_| pick(rng)).collect(), (0..DEFORM_OFFSETS).map(|_| rng.gen_range(-1i32..=1) as f32).collect())
    } else {
        let s = 1.5 / (f as f32).sqrt();
        ((0..n).map(|_| rng.gen_range(-s..s)).collect(), (0..DEFORM_OFFSETS).map(|_| rng.gen_range(-1.5f32..1.5)).collect())
    };
    let offset = Linear::new(f, DEFORM_OFFSETS, w, b).expect("shapes match");
    DeformConvParams::new(base, offset).expect("dilation 1")
}

pub fn processing(rng: &mut impl Rng, kind: ProcessingKind, f: usize, integer: bool) -> ProcessingModule {
    match kind {
        ProcessingKind::Mlp => ProcessingModule::Mlp(mlp(rng, f, f, f, 2, integer)),
        ProcessingKind::Conv => ProcessingModule::Conv(conv(rng, f, f, 1, integer)),
        ProcessingKind::Deform => ProcessingModule::Deform(deform(rng, f, integer)),
        ProcessingKind::Sfm => ProcessingModule::Sfm(sfm(rng, f, integer)),
    }
}

pub fn dense(rng: &mut impl Rng, n_rois: usize, f: usize, h: usize, w: usize, integer: bool) -> DenseGrid {
    DenseGrid::from_channels_last(n_rois, f, h, w, values(rng, n_rois * f * h * w, integer)).expect("shapes match")
}

/// Scores on a coarse lattice of 1/16 steps, so ties are common.
pub fn scores(rng: &mut impl Rng, n_rois: usize, h: usize, w: usize) -> RefinementScores {
    let v = (0..n_rois * h * w).map(|_| rng.gen_range(0..=16) as f32 / 16.0).collect();
    RefinementScores::new(n_rois, h, w, v).expect("values in [0, 1]")
}

/// Limits for [`sps`].
#[derive(Debug, Clone, Copy)]
pub struct SpsLimits {
    pub max_rois: usize,
    /// Largest grid side of the result.
    pub max_side: usize,
    pub max_features: usize,
    pub integer: bool,
}

/// A random valid map: partitioned from a dense grid, and with probability
/// 1/2 additionally split and re-partitioned so passive rows are shared.
pub fn sps(rng: &mut impl Rng, limits: SpsLimits) -> SpsMap {
    let n = rng.gen_range(1..=limits.max_rois);
    let f = rng.gen_range(1..=limits.max_features);
    let split = limits.max_side >= 2 && rng.gen_bool(0.5);
    let max = if split { limits.max_side / 2 } else { limits.max_side };
    let (h, w) = (rng.gen_range(1..=max), rng.gen_range(1..=max));
    let cells = n * h * w;
    let base = dense(rng, n, f, h, w, limits.integer);
    let k = rng.gen_range(0..=cells);
    let s = scores(rng, n, h, w);
    let map = SpsMap::build_from_dense(&base, &s, k).expect("layout matches");
    if !split {
        return map;
    }
    let children: [Mlp; 4] = std::array::from_fn(|_| mlp(rng, f, f, f, 2, limits.integer));
    let up = map.upsample_split(&children).expect("dims match");
    let k = rng.gen_range(0..=up.n_cells());
    let s = scores(rng, n, up.height(), up.width());
    up.update_partition(&s, k).expect("layout matches")
}

/// Pyramid with `channels` channels over an image of the given size.
pub fn pyramid(rng: &mut impl Rng, image_height: usize, image_width: usize, channels: usize, integer: bool) -> Result<FeaturePyramid> {
    FeaturePyramid::from_fn(image_height, image_width, channels, |_, _, _, _| {
        if integer {
            rng.gen_range(-2i32..=2) as f32
        } else {
            rng.gen_range(-1.0f32..1.0)
        }
    })
}

/// Box inside the image, at least 2 pixels on each side. Corners lie on a
/// 1/4 pixel lattice.
pub fn roi_box(rng: &mut impl Rng, image_height: usize, image_width: usize) -> RoiBox {
    let q = |v: f32| (v * 4.0).round() / 4.0;
    let (ih, iw) = (image_height as f32, image_width as f32);
    let x1 = q(rng.gen_range(0.0..(iw - 2.0).max(0.25)));
    let y1 = q(rng.gen_range(0.0..(ih - 2.0).max(0.25)));
    let x2 = q(rng.gen_range((x1 + 2.0).min(iw)..=iw.max(x1 + 2.0)));
    let y2 = q(rng.gen_range((y1 + 2.0).min(ih)..=ih.max(y1 + 2.0)));
    RoiBox::new(x1, y1, x2, y2).expect("non-degenerate")
}
