#![allow(dead_code)]

pub mod checks;
pub mod naive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spsmask_core::random::SpsLimits;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const SMALL: SpsLimits = SpsLimits { max_rois: 3, max_side: 12, max_features: 6, integer: false };

use spsmask_core::config::PipelineConfig;
use spsmask_core::random;
use spsmask_core::tensor::{FeaturePyramid, RoiDetection};
use spsmask_core::weights::PipelineWeights;

/// Closed-form weights: every tensor holds `a * sin(0.618 k + phase)` where
/// `k` is the flat position, `phase` depends on the tensor name, and `a` is
/// `1/sqrt(fan_in)` for weights and 0.05 for biases.
pub fn constructed(cfg: &PipelineConfig) -> PipelineWeights {
    let mut map = PipelineWeights::zeros(cfg).unwrap().to_tensors();
    for (name, t) in map.0.iter_mut() {
        let phase: f64 = name.bytes().map(f64::from).sum::<f64>() * 0.1;
        let amp = if t.shape.len() == 1 { 0.05 } else { 1.0 / (t.shape[1..].iter().product::<usize>() as f64).sqrt() };
        for (k, v) in t.data.iter_mut().enumerate() {
            *v = (amp * (0.618 * k as f64 + phase).sin()) as f32;
        }
    }
    PipelineWeights::from_tensors(cfg, map).unwrap()
}

pub fn small_config(f0: usize) -> PipelineConfig {
    PipelineConfig { feature_dim: f0, backbone_channels: f0, ..Default::default() }
}

/// Random pyramid and detections over a `size x size` image.
pub fn scene(seed: u64, n_rois: usize, f0: usize, size: usize) -> (FeaturePyramid, Vec<RoiDetection>) {
    let mut r = rng(seed);
    let pyr = random::pyramid(&mut r, size, size, f0, false).unwrap();
    let rois = (0..n_rois)
        .map(|_| {
            let b = random::roi_box(&mut r, size, size);
            RoiDetection::new(b, 0.5, random::values(&mut r, f0, false)).unwrap()
        })
        .collect();
    (pyr, rois)
}
