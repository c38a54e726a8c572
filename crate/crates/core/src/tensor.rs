//! Dense feature grids, the backbone feature pyramid, RoI boxes, level
//! selection, bilinear sampling, RoIAlign and dense 3x3 convolution.

use crate::error::{ensure, Result};
use crate::kernels::{self, gather_patch};
use crate::params::ConvKernel;

/// Side length of the stage-0 RoI grid.
pub const ROI_GRID: usize = 14;

/// RoIAlign sample points per bin along each axis.
pub const ROI_ALIGN_SAMPLING_RATIO: usize = 2;

pub const MIN_LEVEL: u32 = 2;
pub const MAX_LEVEL: u32 = 7;

/// Dense feature tensor indexed `[roi, channel, row, col]`.
///
/// Storage is channels-last (`[roi][row][col][channel]`) so the feature
/// vector of one cell is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    n_rois: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DenseGrid {
    pub fn zeros(n_rois: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        ensure!(
            n_rois >= 1 && channels >= 1 && height >= 1 && width >= 1,
            "grid dims must be >= 1, got [{n_rois}, {channels}, {height}, {width}]"
        );
        Ok(Self { n_rois, channels, height, width, data: vec![0.0; n_rois * channels * height * width] })
    }

    /// Builds a grid from channels-last data.
    pub fn from_channels_last(
        n_rois: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let mut g = Self::zeros(n_rois, channels, height, width)?;
        ensure!(
            data.len() == g.data.len(),
            "grid data has {} values, expected {}",
            data.len(),
            g.data.len()
        );
        ensure!(data.iter().all(|v| v.is_finite()), "grid values must be finite");
        g.data = data;
        Ok(g)
    }

    /// Builds a grid by evaluating `f(roi, channel, row, col)`.
    pub fn from_fn(
        n_rois: usize,
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut g = Self::zeros(n_rois, channels, height, width)?;
        for r in 0..n_rois {
            for i in 0..height {
                for j in 0..width {
                    let cell = g.cell_mut(r, i, j);
                    for (c, v) in cell.iter_mut().enumerate() {
                        *v = f(r, c, i, j);
                    }
                }
            }
        }
        ensure!(g.data.iter().all(|v| v.is_finite()), "grid values must be finite");
        Ok(g)
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `[n_rois, channels, height, width]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.n_rois, self.channels, self.height, self.width]
    }

    pub fn n_cells(&self) -> usize {
        self.n_rois * self.height * self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    fn offset(&self, roi: usize, row: usize, col: usize) -> usize {
        ((roi * self.height + row) * self.width + col) * self.channels
    }

    pub fn get(&self, roi: usize, channel: usize, row: usize, col: usize) -> f32 {
        self.data[self.offset(roi, row, col) + channel]
    }

    pub fn set(&mut self, roi: usize, channel: usize, row: usize, col: usize, v: f32) {
        let o = self.offset(roi, row, col);
        self.data[o + channel] = v;
    }

    #[inline]
    pub fn cell(&self, roi: usize, row: usize, col: usize) -> &[f32] {
        let o = self.offset(roi, row, col);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, roi: usize, row: usize, col: usize) -> &mut [f32] {
        let o = self.offset(roi, row, col);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    /// Cell by flat index `roi * H * W + row * W + col`.
    pub fn cell_flat(&self, flat: usize) -> &[f32] {
        &self.data[flat * self.channels..(flat + 1) * self.channels]
    }

    pub fn cell_flat_mut(&mut self, flat: usize) -> &mut [f32] {
        let c = self.channels;
        &mut self.data[flat * c..(flat + 1) * c]
    }

    /// Cell lookup with signed coordinates; `None` outside the grid.
    #[inline]
    pub fn cell_checked(&self, roi: usize, row: i64, col: i64) -> Option<&[f32]> {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            return None;
        }
        Some(self.cell(roi, row as usize, col as usize))
    }

    /// Nearest-neighbor x2 upsampling: each cell is copied to its 4 children.
    pub fn upsample_nearest2x(&self) -> DenseGrid {
        let (h, w) = (self.height * 2, self.width * 2);
        let mut out = DenseGrid {
            n_rois: self.n_rois,
            channels: self.channels,
            height: h,
            width: w,
            data: vec![0.0; self.data.len() * 4],
        };
        for r in 0..self.n_rois {
            for i in 0..h {
                for j in 0..w {
                    out.cell_mut(r, i, j).copy_from_slice(self.cell(r, i / 2, j / 2));
                }
            }
        }
        out
    }

    /// Applies `f(roi, row, col, input, output)` at every cell, producing a
    /// grid with `out_channels` channels.
    pub fn map_cells(
        &self,
        out_channels: usize,
        mut f: impl FnMut(usize, usize, usize, &[f32], &mut [f32]),
    ) -> DenseGrid {
        let mut out = DenseGrid {
            n_rois: self.n_rois,
            channels: out_channels,
            height: self.height,
            width: self.width,
            data: vec![0.0; self.n_cells() * out_channels],
        };
        for r in 0..self.n_rois {
            for i in 0..self.height {
                for j in 0..self.width {
                    let o = out.offset(r, i, j);
                    f(r, i, j, self.cell(r, i, j), &mut out.data[o..o + out_channels]);
                }
            }
        }
        out
    }
}

/// Axis-aligned box in image pixels, `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoiBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl RoiBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()),
            "box coordinates must be finite"
        );
        ensure!(
            self.width() > 0.0 && self.height() > 0.0,
            "degenerate box ({}, {}, {}, {}): width and height must be positive",
            self.x1,
            self.y1,
            self.x2,
            self.y2
        );
        Ok(())
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clip(&self, image_height: usize, image_width: usize) -> Result<Self> {
        let (w, h) = (image_width as f32, image_height as f32);
        Self::new(self.x1.clamp(0.0, w), self.y1.clamp(0.0, h), self.x2.clamp(0.0, w), self.y2.clamp(0.0, h))
    }

    /// Image-space center of cell `(row, col)` when the box is split into a
    /// uniform `grid_h x grid_w` grid; returns `(y, x)`.
    pub fn cell_center(&self, grid_h: usize, grid_w: usize, row: usize, col: usize) -> (f64, f64) {
        self.cell_point(grid_h, grid_w, row as f64 + 0.5, col as f64 + 0.5)
    }

    /// Image-space position of fractional grid coordinates `(row, col)`.
    pub fn cell_point(&self, grid_h: usize, grid_w: usize, row: f64, col: f64) -> (f64, f64) {
        let y = f64::from(self.y1) + row / grid_h as f64 * f64::from(self.height());
        let x = f64::from(self.x1) + col / grid_w as f64 * f64::from(self.width());
        (y, x)
    }
}

/// One detected object: box, classification score and query feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiDetection {
    pub bbox: RoiBox,
    pub s_cls: f32,
    pub query: Vec<f32>,
}

impl RoiDetection {
    pub fn new(bbox: RoiBox, s_cls: f32, query: Vec<f32>) -> Result<Self> {
        bbox.validate()?;
        ensure!((0.0..=1.0).contains(&s_cls), "s_cls must lie in [0, 1], got {s_cls}");
        ensure!(query.iter().all(|v| v.is_finite()), "query feature must be finite");
        Ok(Self { bbox, s_cls, query })
    }
}

/// Backbone levels P2..P7; level `k` has stride `2^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    image_height: usize,
    image_width: usize,
    channels: usize,
    levels: Vec<DenseGrid>,
}

pub fn level_stride(k: u32) -> f64 {
    f64::from(1u32 << k)
}

pub fn level_size(image_extent: usize, k: u32) -> usize {
    image_extent.div_ceil(1 << k)
}

impl FeaturePyramid {
    /// `levels[i]` is level `P_{i+2}`; each must be `[1, C_B, ceil(H/2^k), ceil(W/2^k)]`.
    pub fn new(image_height: usize, image_width: usize, levels: Vec<DenseGrid>) -> Result<Self> {
        ensure!(image_height >= 1 && image_width >= 1, "image size must be positive");
        ensure!(
            levels.len() == (MAX_LEVEL - MIN_LEVEL + 1) as usize,
            "pyramid needs levels P2..P7, got {} levels",
            levels.len()
        );
        let channels = levels[0].channels();
        for (i, g) in levels.iter().enumerate() {
            let k = MIN_LEVEL + i as u32;
            let want = [1, channels, level_size(image_height, k), level_size(image_width, k)];
            ensure!(g.shape() == want, "pyramid level P{k} has shape {:?}, expected {want:?}", g.shape());
        }
        Ok(Self { image_height, image_width, channels, levels })
    }

    /// Builds every level from `f(level, channel, row, col)`.
    pub fn from_fn(
        image_height: usize,
        image_width: usize,
        channels: usize,
        mut f: impl FnMut(u32, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let levels = (MIN_LEVEL..=MAX_LEVEL)
            .map(|k| {
                DenseGrid::from_fn(
                    1,
                    channels,
                    level_size(image_height, k),
                    level_size(image_width, k),
                    |_, c, i, j| f(k, c, i, j),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(image_height, image_width, levels)
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn level(&self, k: u32) -> Result<&DenseGrid> {
        ensure!((MIN_LEVEL..=MAX_LEVEL).contains(&k), "pyramid level P{k} does not exist");
        Ok(&self.levels[(k - MIN_LEVEL) as usize])
    }

    /// Bilinear sample of level `k` at image coordinates `(y, x)`, keeping
    /// the first `out.len()` channels.
    pub fn sample_image_point(&self, k: u32, y: f64, x: f64, out: &mut [f32]) -> Result<()> {
        let grid = self.level(k)?;
        ensure!(out.len() <= grid.channels(), "requested {} backbone channels of {}", out.len(), grid.channels());
        let s = level_stride(k);
        let n = out.len();
        kernels::bilinear(y / s, x / s, |i, j| grid.cell_checked(0, i, j).map(|c| &c[..n]), out);
        Ok(())
    }
}

/// Initial pyramid level from the box size:
/// `k0 = 2 + min(floor(log2(sqrt(w*h) / 56)), 3)`, clamped to `[2, 7]`.
pub fn level_select_initial(bbox: &RoiBox) -> Result<u32> {
    bbox.validate()?;
    let (w, h) = (f64::from(bbox.width()), f64::from(bbox.height()));
    let scale = ((w * h).sqrt() / 56.0).log2().floor();
    let k = 2.0 + scale.min(3.0);
    Ok(k.clamp(f64::from(MIN_LEVEL), f64::from(MAX_LEVEL)) as u32)
}

/// Level for refinement stage `s`: `max(k0 - s, 2)`.
pub fn level_select_stage(k0: u32, stage: u32) -> u32 {
    k0.saturating_sub(stage).max(MIN_LEVEL)
}

/// Bilinear sample of `grid[roi]` at continuous `(row, col)` in cell units.
/// Neighbors outside the grid contribute zero.
pub fn bilinear_sample(grid: &DenseGrid, roi: usize, row: f64, col: f64) -> Vec<f32> {
    let mut out = vec![0.0; grid.channels()];
    kernels::bilinear(row, col, |i, j| grid.cell_checked(roi, i, j), &mut out);
    out
}

/// RoIAlign of one detection onto a `out_h x out_w` grid, `[1, C_B, out_h, out_w]`.
///
/// Each output bin averages a 2x2 set of bilinear samples placed uniformly
/// inside the bin.
pub fn roi_align(pyramid: &FeaturePyramid, bbox: &RoiBox, out_h: usize, out_w: usize) -> Result<DenseGrid> {
    let k = level_select_initial(bbox)?;
    let level = pyramid.level(k)?;
    let s = level_stride(k);
    let y1 = f64::from(bbox.y1) / s;
    let x1 = f64::from(bbox.x1) / s;
    let bin_h = f64::from(bbox.height()) / s / out_h as f64;
    let bin_w = f64::from(bbox.width()) / s / out_w as f64;
    let n = ROI_ALIGN_SAMPLING_RATIO;
    let scale = 1.0 / (n * n) as f64;
    let mut out = DenseGrid::zeros(1, level.channels(), out_h, out_w)?;
    let mut acc = vec![0f64; level.channels()];
    for i in 0..out_h {
        for j in 0..out_w {
            acc.fill(0.0);
            for iy in 0..n {
                let y = y1 + i as f64 * bin_h + (iy as f64 + 0.5) * bin_h / n as f64;
                for ix in 0..n {
                    let x = x1 + j as f64 * bin_w + (ix as f64 + 0.5) * bin_w / n as f64;
                    if let Some(taps) = kernels::bilinear_taps(y, x) {
                        kernels::blend_into(&taps, scale, |a, b| level.cell_checked(0, a, b), &mut acc);
                    }
                }
            }
            for (o, a) in out.cell_mut(0, i, j).iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Ok(out)
}

/// RoIAlign for every detection, stacked into `[N_R, C_B, 14, 14]`.
pub fn roi_align_all(pyramid: &FeaturePyramid, rois: &[RoiDetection]) -> Result<DenseGrid> {
    ensure!(!rois.is_empty(), "at least one RoI is required");
    let mut out = DenseGrid::zeros(rois.len(), pyramid.channels(), ROI_GRID, ROI_GRID)?;
    let per = ROI_GRID * ROI_GRID * pyramid.channels();
    for (r, roi) in rois.iter().enumerate() {
        let one = roi_align(pyramid, &roi.bbox, ROI_GRID, ROI_GRID)?;
        out.data[r * per..(r + 1) * per].copy_from_slice(one.as_slice());
    }
    Ok(out)
}

/// Zero-padded 3x3 cross-correlation preserving `H x W`.
pub fn dense_conv2d(grid: &DenseGrid, kernel: &ConvKernel) -> Result<DenseGrid> {
    ensure!(
        kernel.f_in() == grid.channels(),
        "conv kernel expects {} input channels, grid has {}",
        kernel.f_in(),
        grid.channels()
    );
    let d = kernel.dilation() as i64;
    let mut patch = vec![0.0; 9 * grid.channels()];
    Ok(grid.map_cells(kernel.f_out(), |r, i, j, _, out| {
        gather_patch(|a, b| grid.cell_checked(r, a, b), i as i64, j as i64, d, &mut patch);
        kernel.contract(&patch, out);
    }))
}
