//! Mask assembly across stages, RoI pasting, mask scoring and the mask
//! output formats.

use std::io::Write;

use super::{StageFeatures, StageOutputs};
use crate::config::FINAL_MASK_SIZE;
use crate::error::{ensure, Result};
use crate::kernels::{self, sigmoid};
use crate::sps::RefinementScores;
use crate::tensor::{RoiBox, RoiDetection, ROI_GRID};

/// Probability masks per stage, each `[N_R, side, side]` flat.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledMasks {
    pub n_rois: usize,
    /// `levels[s]` has side `14 * 2^s`.
    pub levels: Vec<Vec<f32>>,
}

impl AssembledMasks {
    pub fn side(&self, level: usize) -> usize {
        ROI_GRID << level
    }

    /// Mask of one RoI at one level.
    pub fn roi_mask(&self, level: usize, roi: usize) -> &[f32] {
        let n = self.side(level) * self.side(level);
        &self.levels[level][roi * n..(roi + 1) * n]
    }

    /// The finest assembled level.
    pub fn finest(&self) -> &[f32] {
        self.levels.last().expect("at least stage 0")
    }
}

fn check_chain(stages: &[StageOutputs]) -> Result<()> {
    ensure!(!stages.is_empty(), "mask assembly needs at least stage 0");
    ensure!(stages.len() <= 4, "at most 4 stages (masks stop at {FINAL_MASK_SIZE}x{FINAL_MASK_SIZE})");
    let (n_rois, h, w) = stages[0].grid();
    ensure!(
        matches!(stages[0].features, StageFeatures::Dense(_)) && h == ROI_GRID && w == ROI_GRID,
        "stage 0 must be a dense {ROI_GRID}x{ROI_GRID} grid"
    );
    for (s, st) in stages.iter().enumerate() {
        ensure!(st.stage == s, "stage {} found at position {s}", st.stage);
        st.check()?;
        if s > 0 {
            ensure!(matches!(st.features, StageFeatures::Sparse(_)), "stage {s} must be sparse");
            let side = ROI_GRID << s;
            ensure!(
                st.grid() == (n_rois, side, side),
                "stage {s} grid {:?} breaks the x2 chain (expected {:?})",
                st.grid(),
                (n_rois, side, side)
            );
        }
    }
    Ok(())
}

/// Nearest-neighbor x2 upsampling of a single-channel `[n, h, w]` map.
fn upsample_map(values: &[f32], n: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for r in 0..n {
        for i in 0..2 * h {
            let row = &values[(r * h + i / 2) * w..(r * h + i / 2 + 1) * w];
            for j in 0..2 * w {
                out.push(row[j / 2]);
            }
        }
    }
    out
}

/// sigmoid(stage 0) then, per later stage, x2 nearest upsampling with the
/// predicted cells overwritten.
fn assemble_overwrite(stages: &[StageOutputs], pick: impl Fn(&StageOutputs) -> &[f32]) -> Result<Vec<Vec<f32>>> {
    check_chain(stages)?;
    let mut levels = vec![pick(&stages[0]).iter().map(|&x| sigmoid(x)).collect::<Vec<_>>()];
    for st in &stages[1..] {
        let (n, h, w) = st.grid();
        let mut cur = upsample_map(levels.last().expect("nonempty"), n, h / 2, w / 2);
        for (flat, &logit) in st.predicted_cells().into_iter().zip(pick(st)) {
            cur[flat] = sigmoid(logit);
        }
        levels.push(cur);
    }
    Ok(levels)
}

/// Segmentation masks at 14, 28, 56 and 112 for every RoI.
pub fn assemble_masks(stages: &[StageOutputs]) -> Result<AssembledMasks> {
    let levels = assemble_overwrite(stages, |s| &s.seg_logits)?;
    Ok(AssembledMasks { n_rois: stages[0].grid().0, levels })
}

/// Refinement scores on the grid of the last given stage, assembled the same
/// way as the masks.
pub fn assemble_refine_scores(stages: &[StageOutputs]) -> Result<RefinementScores> {
    let levels = assemble_overwrite(stages, |s| &s.refine_logits)?;
    let (n, h, w) = stages.last().expect("checked").grid();
    RefinementScores::new(n, h, w, levels.into_iter().last().expect("checked"))
}

/// Pastes a `side x side` RoI mask into an image-size map. Pixels whose
/// centers fall inside the box bilinearly sample the mask; all others are 0.
pub fn paste_roi(mask: &[f32], side: usize, bbox: &RoiBox, image_height: usize, image_width: usize) -> Result<Vec<f32>> {
    bbox.validate()?;
    ensure!(mask.len() == side * side, "mask has {} values, expected {side}x{side}", mask.len());
    let mut out = vec![0.0; image_height * image_width];
    let (y1, x1) = (f64::from(bbox.y1), f64::from(bbox.x1));
    let (y2, x2) = (f64::from(bbox.y2), f64::from(bbox.x2));
    let (bh, bw) = (f64::from(bbox.height()), f64::from(bbox.width()));
    let fetch = |i: i64, j: i64| {
        if i < 0 || j < 0 || i >= side as i64 || j >= side as i64 {
            None
        } else {
            let k = i as usize * side + j as usize;
            Some(&mask[k..k + 1])
        }
    };
    let rows = (y1.floor().max(0.0) as usize)..(y2.ceil().max(0.0) as usize).min(image_height);
    let cols = (x1.floor().max(0.0) as usize)..(x2.ceil().max(0.0) as usize).min(image_width);
    for py in rows {
        let cy = py as f64 + 0.5;
        if cy < y1 || cy >= y2 {
            continue;
        }
        for px in cols.clone() {
            let cx = px as f64 + 0.5;
            if cx < x1 || cx >= x2 {
                continue;
            }
            let r = (cy - y1) * side as f64 / bh;
            let c = (cx - x1) * side as f64 / bw;
            kernels::bilinear(r, c, fetch, &mut out[py * image_width + px..py * image_width + px + 1]);
        }
    }
    Ok(out)
}

/// Mask confidence: `s_cls` times the mean probability over cells above
/// `threshold`; zero when no cell is foreground.
pub fn score(mask: &[f32], s_cls: f32, threshold: f32) -> f64 {
    let (sum, count) = mask
        .iter()
        .filter(|&&p| p > threshold)
        .fold((0f64, 0usize), |(s, n), &p| (s + f64::from(p), n + 1));
    if count == 0 {
        0.0
    } else {
        f64::from(s_cls) * (sum / count as f64)
    }
}

/// Final per-RoI products.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    /// Masks at 14, 28, 56 and 112.
    pub levels: [Vec<f32>; 4],
    /// Image-size probability map, row-major.
    pub pasted: Vec<f32>,
    pub image_height: usize,
    pub image_width: usize,
    pub s_seg: f64,
}

pub fn build_mask_stacks(
    masks: &AssembledMasks,
    rois: &[RoiDetection],
    image_height: usize,
    image_width: usize,
    threshold: f32,
) -> Result<Vec<MaskStack>> {
    ensure!(masks.levels.len() == 4, "mask stacks need all 4 stages, got {}", masks.levels.len());
    ensure!(masks.n_rois == rois.len(), "{} masks for {} RoIs", masks.n_rois, rois.len());
    rois.iter()
        .enumerate()
        .map(|(r, roi)| {
            let levels: [Vec<f32>; 4] = std::array::from_fn(|l| masks.roi_mask(l, r).to_vec());
            let pasted = paste_roi(&levels[3], FINAL_MASK_SIZE, &roi.bbox, image_height, image_width)?;
            let s_seg = score(&levels[3], roi.s_cls, threshold);
            Ok(MaskStack { levels, pasted, image_height, image_width, s_seg })
        })
        .collect()
}

/// Run lengths of a binary sequence, starting with a (possibly empty)
/// background run.
pub fn rle_encode(bits: impl IntoIterator<Item = bool>) -> Vec<u32> {
    let mut counts = vec![0u32];
    let mut current = false;
    for b in bits {
        if b != current {
            counts.push(0);
            current = b;
        }
        *counts.last_mut().expect("nonempty") += 1;
    }
    counts
}

/// One line per RoI:
/// `roi <i> height <H> width <W> s_seg <score> rle <c0> <c1> ...`,
/// run lengths over the row-major pasted mask thresholded at `threshold`.
pub fn write_mask_records<W: Write>(stacks: &[MaskStack], threshold: f32, mut w: W) -> std::io::Result<()> {
    for (i, m) in stacks.iter().enumerate() {
        write!(w, "roi {i} height {} width {} s_seg {} rle", m.image_height, m.image_width, m.s_seg)?;
        for c in rle_encode(m.pasted.iter().map(|&p| p > threshold)) {
            write!(w, " {c}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Plain-text portable graymap of a probability map in `[0, 1]`.
pub fn write_pgm<W: Write>(values: &[f32], height: usize, width: usize, mut w: W) -> std::io::Result<()> {
    writeln!(w, "P2\n{width} {height}\n255")?;
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|&p| ((p.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}
