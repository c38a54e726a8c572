//! Synthetic scenes: analytic instance shapes with tight boxes, detector
//! scores, and a seeded backbone pyramid and query features.

use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spsmask_core::pipeline::{cell_targets, GroundTruth};
use spsmask_core::shape::{MaskSampler, Shape};
use spsmask_core::sps::RefinementScores;
use spsmask_core::tensor::{level_size, DenseGrid, FeaturePyramid, RoiBox, RoiDetection, MAX_LEVEL, MIN_LEVEL};

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 32;

const PYRAMID_STREAM: u64 = 1;
const QUERY_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub shape: Shape,
    /// Tight box of the rasterized shape.
    pub bbox: RoiBox,
    pub s_cls: f32,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub instances: Vec<Instance>,
}

/// Rounds to a 1/256 lattice so values survive a JSON round trip exactly.
fn lattice(v: f64) -> f64 {
    (v * 256.0).round() / 256.0
}

fn random_shape(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Shape {
    let side = h.min(w);
    let r = rng.gen_range(0.08 * side..0.25 * side);
    let cx = lattice(rng.gen_range(r..w - r));
    let cy = lattice(rng.gen_range(r..h - r));
    if rng.gen_bool(0.5) {
        let rx = lattice(r);
        let ry = lattice(r * rng.gen_range(0.4..1.0));
        let angle = lattice(rng.gen_range(0.0..std::f64::consts::PI));
        Shape::Ellipse { cx, cy, rx, ry, angle }
    } else {
        // Star-shaped polygon around the center.
        let n = rng.gen_range(5..=9);
        let phase = rng.gen_range(0.0..TAU);
        let vertices = (0..n)
            .map(|k| {
                let a = phase + TAU * k as f64 / n as f64;
                let rr = r * rng.gen_range(0.5..1.0);
                [lattice(cx + rr * a.cos()), lattice(cy + rr * a.sin())]
            })
            .collect();
        Shape::Polygon { vertices }
    }
}

/// Tight box around the foreground pixels of a row-major raster.
pub fn tight_box(raster: &[bool], height: usize, width: usize) -> Option<RoiBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (k, _) in raster.iter().enumerate().filter(|(_, &b)| b) {
        let (r, c) = (k / width, k % width);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    if r0 == usize::MAX {
        return None;
    }
    debug_assert!(r1 < height);
    RoiBox::new(c0 as f32, r0 as f32, (c1 + 1) as f32, (r1 + 1) as f32).ok()
}

impl SyntheticScene {
    pub fn generate(seed: u64, n_instances: usize, image_height: usize, image_width: usize) -> Result<Self> {
        ensure!(n_instances >= 1, "a scene needs at least one instance");
        ensure!(
            image_height >= MIN_IMAGE_SIDE && image_width >= MIN_IMAGE_SIDE,
            "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {image_height}x{image_width}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut instances = Vec::with_capacity(n_instances);
        while instances.len() < n_instances {
            let shape = random_shape(&mut rng, image_height as f64, image_width as f64);
            let Some(bbox) = tight_box(&shape.rasterize(image_height, image_width), image_height, image_width) else {
                continue;
            };
            let s_cls = rng.gen_range(512..1024) as f32 / 1024.0;
            let label = rng.gen_range(0..80);
            instances.push(Instance { shape, bbox, s_cls, label });
        }
        Ok(Self { seed, image_height, image_width, instances })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Self = serde_json::from_str(text).context("parsing scene JSON")?;
        scene.check()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).with_context(|| format!("writing scene {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading scene {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("scene {}", path.display()))
    }

    fn check(&self) -> Result<()> {
        ensure!(!self.instances.is_empty(), "scene has no instances");
        ensure!(self.image_height >= 1 && self.image_width >= 1, "image size must be positive");
        for (i, inst) in self.instances.iter().enumerate() {
            if let Err(e) = inst.bbox.validate() {
                bail!("instance {i}: {e}");
            }
            ensure!((0.0..=1.0).contains(&inst.s_cls), "instance {i}: s_cls {} outside [0, 1]", inst.s_cls);
        }
        Ok(())
    }

    /// Seeded backbone features. Channel 0 carries the union foreground
    /// sampled at each level's pixel centers; the rest is uniform noise.
    pub fn pyramid(&self, channels: usize) -> Result<FeaturePyramid> {
        ensure!(channels >= 1, "pyramid needs at least one channel");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(PYRAMID_STREAM);
        let mut levels = Vec::new();
        for k in MIN_LEVEL..=MAX_LEVEL {
            let (h, w) = (level_size(self.image_height, k), level_size(self.image_width, k));
            let stride = f64::from(1u32 << k);
            let mut data = Vec::with_capacity(h * w * channels);
            for i in 0..h {
                for j in 0..w {
                    let (y, x) = ((i as f64 + 0.5) * stride, (j as f64 + 0.5) * stride);
                    let fg = self.instances.iter().any(|inst| inst.shape.contains(x, y));
                    data.push(if fg { 1.0 } else { -1.0 });
                    data.extend((1..channels).map(|_| rng.gen_range(-1.0f32..1.0)));
                }
            }
            levels.push(DenseGrid::from_channels_last(1, channels, h, w, data)?);
        }
        Ok(FeaturePyramid::new(self.image_height, self.image_width, levels)?)
    }

    /// Seeded query feature per instance.
    pub fn queries(&self, dim: usize) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(QUERY_STREAM);
        self.instances.iter().map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect()
    }

    /// Detections as the mask head sees them.
    pub fn rois(&self, query_dim: usize) -> Result<Vec<RoiDetection>> {
        self.instances
            .iter()
            .zip(self.queries(query_dim))
            .map(|(inst, q)| Ok(RoiDetection::new(inst.bbox, inst.s_cls, q)?))
            .collect()
    }

    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.instances.iter().map(|i| GroundTruth { mask: i.shape.clone(), label: i.label }).collect()
    }
}

/// Scores on an `h x w` grid per RoI: `1 / (1 + d)` with `d` the 8-connected
/// grid distance to the nearest cell whose refinement target is 1 (cells
/// straddling the ground-truth boundary). RoIs without such cells score 0.
pub fn boundary_scores(gts: &[GroundTruth], boxes: &[RoiBox], h: usize, w: usize) -> Result<RefinementScores> {
    ensure!(gts.len() == boxes.len(), "{} ground truths for {} boxes", gts.len(), boxes.len());
    let mut values = Vec::with_capacity(boxes.len() * h * w);
    for (gt, bbox) in gts.iter().zip(boxes) {
        let mut dist = vec![u32::MAX; h * w];
        let mut queue = VecDeque::new();
        for c in 0..h * w {
            if cell_targets(gt, bbox, h, w, c / w, c % w).1 == 1.0 {
                dist[c] = 0;
                queue.push_back(c);
            }
        }
        while let Some(c) = queue.pop_front() {
            let (i, j) = ((c / w) as i64, (c % w) as i64);
            for (di, dj) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                let (a, b) = (i + di, j + dj);
                if a < 0 || b < 0 || a >= h as i64 || b >= w as i64 {
                    continue;
                }
                let n = a as usize * w + b as usize;
                if dist[n] == u32::MAX {
                    dist[n] = dist[c] + 1;
                    queue.push_back(n);
                }
            }
        }
        values.extend(dist.iter().map(|&d| if d == u32::MAX { 0.0 } else { 1.0 / (1.0 + d as f32) }));
    }
    Ok(RefinementScores::new(boxes.len(), h, w, values)?)
}
