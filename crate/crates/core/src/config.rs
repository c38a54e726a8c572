//! Pipeline configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::params::ProcessingKind;

/// Number of sparse refinement stages after the dense stage 0.
pub const REFINE_STAGES: usize = 3;

/// Side of the finest mask grid (14 -> 28 -> 56 -> 112).
pub const FINAL_MASK_SIZE: usize = 112;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Cells selected for refinement per stage, across all RoIs of an image.
    pub top_k: usize,
    pub processing: ProcessingKind,
    /// Stage-0 feature size `F_0`; halves every refinement stage.
    pub feature_dim: usize,
    /// Backbone channel count `C_B`.
    pub backbone_channels: usize,
    /// Sample only the first `F_{s-1}` backbone channels during fusion.
    pub reduced_backbone_samples: bool,
    /// Foreground threshold for scoring and RLE output.
    pub mask_threshold: f32,
    /// Seed for generated weights.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: 10_000,
            processing: ProcessingKind::Sfm,
            feature_dim: 256,
            backbone_channels: 256,
            reduced_backbone_samples: false,
            mask_threshold: 0.5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.feature_dim >= 8 && self.feature_dim.is_multiple_of(8),
            "feature_dim must be a positive multiple of 8 (halved three times), got {}",
            self.feature_dim
        );
        ensure!(
            self.backbone_channels == self.feature_dim,
            "backbone_channels ({}) must equal feature_dim ({}): RoIAlign features feed the F_0 query fusion",
            self.backbone_channels,
            self.feature_dim
        );
        ensure!(
            self.mask_threshold > 0.0 && self.mask_threshold < 1.0,
            "mask_threshold must lie in (0, 1), got {}",
            self.mask_threshold
        );
        Ok(())
    }

    /// Feature size `F_s = F_0 / 2^s`.
    pub fn feature_dim_at(&self, stage: usize) -> usize {
        self.feature_dim >> stage
    }

    /// Backbone channels sampled during fusion in stage `s >= 1`.
    pub fn backbone_sample_dim(&self, stage: usize) -> usize {
        if self.reduced_backbone_samples {
            self.feature_dim_at(stage - 1).min(self.backbone_channels)
        } else {
            self.backbone_channels
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::parse(None, format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse { line, message: format!("{}: {message}", path.display()) },
            other => other,
        })
    }
}
