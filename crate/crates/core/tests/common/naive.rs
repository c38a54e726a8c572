//! Straightforward reference implementations written directly from the
//! operator definitions, sharing no code with the library kernels.
//!
//! Values are rounded to `f32` at the same points the library stores them
//! (after each linear layer, convolution, bilinear sample and residual add),
//! so the only remaining difference is the order of `f64` summation.

#![allow(dead_code)]

use spsmask_core::params::{ConvKernel, DeformConvParams, Linear, Mlp, ProcessingModule, SfmParams};
use spsmask_core::sps::SpsMap;
use spsmask_core::tensor::{DenseGrid, FeaturePyramid, RoiBox};

/// Channels-last grid `[n][h][w][f]`.
#[derive(Debug, Clone)]
pub struct Grid {
    pub n: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn from_dense(g: &DenseGrid) -> Self {
        let (n, f, h, w) = (g.n_rois(), g.channels(), g.height(), g.width());
        let mut data = Vec::with_capacity(n * h * w * f);
        for r in 0..n {
            for i in 0..h {
                for j in 0..w {
                    for c in 0..f {
                        data.push(g.get(r, c, i, j));
                    }
                }
            }
        }
        Self { n, f, h, w, data }
    }

    /// Materializes a sparse map by resolving every index entry by hand.
    pub fn from_sps(m: &SpsMap) -> Self {
        let (n, f, h, w) = (m.n_rois(), m.features(), m.height(), m.width());
        let na = m.n_active() as u32;
        let mut data = Vec::with_capacity(n * h * w * f);
        for &v in m.index() {
            if v < na {
                data.extend_from_slice(m.active().row(v as usize));
            } else {
                data.extend_from_slice(m.passive().row((v - na) as usize));
            }
        }
        Self { n, f, h, w, data }
    }

    pub fn at(&self, r: usize, i: usize, j: usize) -> &[f32] {
        let o = ((r * self.h + i) * self.w + j) * self.f;
        &self.data[o..o + self.f]
    }

    pub fn get(&self, r: usize, i: i64, j: i64) -> Option<&[f32]> {
        if i < 0 || j < 0 || i >= self.h as i64 || j >= self.w as i64 {
            None
        } else {
            Some(self.at(r, i as usize, j as usize))
        }
    }
}

/// Whether cell `flat` of `m` holds an active row.
pub fn is_active(m: &SpsMap, flat: usize) -> bool {
    (m.index()[flat] as usize) < m.n_active()
}

pub fn linear(l: &Linear, x: &[f32]) -> Vec<f32> {
    let (fi, fo) = (l.in_dim(), l.out_dim());
    assert_eq!(x.len(), fi);
    (0..fo)
        .map(|o| {
            let mut acc = f64::from(l.bias()[o]);
            for c in 0..fi {
                acc += f64::from(l.weight()[o * fi + c]) * f64::from(x[c]);
            }
            acc as f32
        })
        .collect()
}

pub fn mlp(m: &Mlp, x: &[f32]) -> Vec<f32> {
    let mut h = x.to_vec();
    for (k, l) in m.layers().iter().enumerate() {
        if k > 0 {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = linear(l, &h);
    }
    h
}

pub fn relu(mut v: Vec<f32>) -> Vec<f32> {
    for x in &mut v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    v
}

/// Bilinear interpolation in cell units, cell centers at `+0.5`, zero outside.
pub fn bilinear64(g: &Grid, r: usize, row: f64, col: f64) -> Vec<f64> {
    let y = row - 0.5;
    let x = col - 0.5;
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    let mut out = vec![0f64; g.f];
    for (dy, wy) in [(0i64, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0i64, 1.0 - tx), (1, tx)] {
            if let Some(v) = g.get(r, y0 as i64 + dy, x0 as i64 + dx) {
                for c in 0..g.f {
                    out[c] += wy * wx * f64::from(v[c]);
                }
            }
        }
    }
    out
}

pub fn bilinear(g: &Grid, r: usize, row: f64, col: f64) -> Vec<f32> {
    bilinear64(g, r, row, col).into_iter().map(|v| v as f32).collect()
}

/// 3x3 cross-correlation at one cell; six nested loops.
pub fn conv(g: &Grid, r: usize, i: usize, j: usize, k: &ConvKernel) -> Vec<f32> {
    let d = k.dilation() as i64;
    let mut out = Vec::with_capacity(k.f_out());
    for o in 0..k.f_out() {
        let mut acc = f64::from(k.bias()[o]);
        for ky in 0..3 {
            for kx in 0..3 {
                let Some(x) = g.get(r, i as i64 + (ky as i64 - 1) * d, j as i64 + (kx as i64 - 1) * d) else {
                    continue;
                };
                for c in 0..k.f_in() {
                    acc += f64::from(k.weight_at(o, c, ky, kx)) * f64::from(x[c]);
                }
            }
        }
        out.push(acc as f32);
    }
    out
}

/// Deformable 3x3 convolution: tap `t` is sampled at its regular position
/// shifted by offsets `(2t, 2t+1)` predicted from the cell's own feature.
pub fn deform(g: &Grid, r: usize, i: usize, j: usize, p: &DeformConvParams) -> Vec<f32> {
    let off = linear(p.offset_predictor(), g.at(r, i, j));
    let k = p.base();
    let mut samples = Vec::with_capacity(9);
    for ky in 0..3 {
        for kx in 0..3 {
            let t = ky * 3 + kx;
            let y = i as f64 + 0.5 + (ky as f64 - 1.0) + f64::from(off[2 * t]);
            let x = j as f64 + 0.5 + (kx as f64 - 1.0) + f64::from(off[2 * t + 1]);
            samples.push(bilinear(g, r, y, x));
        }
    }
    (0..k.f_out())
        .map(|o| {
            let mut acc = f64::from(k.bias()[o]);
            for ky in 0..3 {
                for kx in 0..3 {
                    for c in 0..k.f_in() {
                        acc += f64::from(k.weight_at(o, c, ky, kx)) * f64::from(samples[ky * 3 + kx][c]);
                    }
                }
            }
            acc as f32
        })
        .collect()
}

pub fn sfm(g: &Grid, r: usize, i: usize, j: usize, p: &SfmParams) -> Vec<f32> {
    let [a, b, c] = p.convs();
    let (a, b, c) = (conv(g, r, i, j, a), conv(g, r, i, j, b), conv(g, r, i, j, c));
    relu((0..a.len()).map(|o| a[o] + b[o] + c[o]).collect())
}

pub fn process(g: &Grid, r: usize, i: usize, j: usize, m: &ProcessingModule) -> Vec<f32> {
    match m {
        ProcessingModule::Mlp(p) => mlp(p, g.at(r, i, j)),
        ProcessingModule::Conv(k) => relu(conv(g, r, i, j, k)),
        ProcessingModule::Deform(p) => relu(deform(g, r, i, j, p)),
        ProcessingModule::Sfm(p) => sfm(g, r, i, j, p),
    }
}

/// `x + mlp(concat(x, extra))`.
pub fn residual(x: &[f32], extra: &[f32], m: &Mlp) -> Vec<f32> {
    let cat: Vec<f32> = x.iter().chain(extra).copied().collect();
    let d = mlp(m, &cat);
    x.iter().zip(d).map(|(a, b)| a + b).collect()
}

/// Pyramid level from the box size, `2 + min(floor(log2(sqrt(wh)/56)), 3)`,
/// clamped to `[2, 7]`, then lowered by one per stage down to 2.
pub fn level(bbox: &RoiBox, stage: u32) -> u32 {
    let (w, h) = (f64::from(bbox.x2 - bbox.x1), f64::from(bbox.y2 - bbox.y1));
    let k0 = (2.0 + ((w * h).sqrt() / 56.0).log2().floor().min(3.0)).clamp(2.0, 7.0) as u32;
    k0.saturating_sub(stage).max(2)
}

pub fn pyramid_level(p: &FeaturePyramid, k: u32) -> Grid {
    Grid::from_dense(p.level(k).unwrap())
}

/// Backbone feature at the center of cell `(i, j)` of an `h x w` grid over
/// `bbox`, first `ch` channels.
#[allow(clippy::too_many_arguments)]
pub fn backbone(p: &FeaturePyramid, bbox: &RoiBox, stage: u32, h: usize, w: usize, i: usize, j: usize, ch: usize) -> Vec<f32> {
    let k = level(bbox, stage);
    let g = pyramid_level(p, k);
    let y = f64::from(bbox.y1) + (i as f64 + 0.5) / h as f64 * f64::from(bbox.y2 - bbox.y1);
    let x = f64::from(bbox.x1) + (j as f64 + 0.5) / w as f64 * f64::from(bbox.x2 - bbox.x1);
    let s = f64::from(1u32 << k);
    let mut v = bilinear(&g, 0, y / s, x / s);
    v.truncate(ch);
    v
}

/// RoIAlign with a 2x2 sample lattice per bin, averaged.
pub fn roi_align(p: &FeaturePyramid, bbox: &RoiBox, oh: usize, ow: usize) -> Grid {
    let k = level(bbox, 0);
    let g = pyramid_level(p, k);
    let s = f64::from(1u32 << k);
    let (bh, bw) = (f64::from(bbox.y2 - bbox.y1) / s / oh as f64, f64::from(bbox.x2 - bbox.x1) / s / ow as f64);
    let mut data = Vec::with_capacity(oh * ow * g.f);
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = vec![0f64; g.f];
            for sy in 0..2 {
                for sx in 0..2 {
                    let y = f64::from(bbox.y1) / s + (i as f64 + (sy as f64 + 0.5) / 2.0) * bh;
                    let x = f64::from(bbox.x1) / s + (j as f64 + (sx as f64 + 0.5) / 2.0) * bw;
                    for (a, v) in acc.iter_mut().zip(bilinear64(&g, 0, y, x)) {
                        *a += v / 4.0;
                    }
                }
            }
            data.extend(acc.into_iter().map(|v| v as f32));
        }
    }
    Grid { n: 1, f: g.f, h: oh, w: ow, data }
}

/// `|got - want| <= tol * max(|want|, 1)` element-wise.
pub fn close(got: &[f32], want: &[f32], tol: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("length {} vs {}", got.len(), want.len()));
    }
    for (k, (&a, &b)) in got.iter().zip(want).enumerate() {
        let (a, b) = (f64::from(a), f64::from(b));
        if !((a - b).abs() <= tol * b.abs().max(1.0)) {
            return Err(format!("element {k}: got {a}, want {b}"));
        }
    }
    Ok(())
}

/// Exact element-wise equality.
pub fn exact(got: &[f32], want: &[f32]) -> Result<(), String> {
    match got.iter().zip(want).position(|(a, b)| a != b) {
        None if got.len() == want.len() => Ok(()),
        None => Err(format!("length {} vs {}", got.len(), want.len())),
        Some(k) => Err(format!("element {k}: got {}, want {}", got[k], want[k])),
    }
}

/// Split reference: the child at `(i, j)` of an active parent is child MLP
/// `2 * (i % 2) + (j % 2)` of the parent feature; a passive parent's
/// children copy the parent.
pub fn upsample(m: &SpsMap, children: &[Mlp; 4]) -> Grid {
    let g = Grid::from_sps(m);
    let (h, w) = (2 * g.h, 2 * g.w);
    let mut data = Vec::with_capacity(g.n * h * w * g.f);
    for r in 0..g.n {
        for i in 0..h {
            for j in 0..w {
                let parent = g.at(r, i / 2, j / 2);
                if is_active(m, (r * g.h + i / 2) * g.w + j / 2) {
                    data.extend(mlp(&children[2 * (i % 2) + j % 2], parent));
                } else {
                    data.extend_from_slice(parent);
                }
            }
        }
    }
    Grid { n: g.n, f: g.f, h, w, data }
}
