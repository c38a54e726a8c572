//! Sparse-vs-dense compute sweep over forced active fractions.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{ensure, Result};
use spsmask_core::config::{PipelineConfig, REFINE_STAGES};
use spsmask_core::oracle::{count_flops, run_dense_pipeline, FlopReport, Trace};
use spsmask_core::pipeline::{run_pipeline, RunOptions};
use spsmask_core::sps::RefinementScores;
use spsmask_core::tensor::{RoiBox, ROI_GRID};
use spsmask_core::weights::PipelineWeights;

use crate::scene::{boundary_scores, SyntheticScene};

/// Fractions swept when none are given.
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 1.0];

/// `ceil(f * cells)` of the grid each stage selects from.
pub fn budgets_for(fraction: f64, n_rois: usize) -> [usize; REFINE_STAGES] {
    std::array::from_fn(|s| {
        let cells = n_rois * (ROI_GRID << s) * (ROI_GRID << s);
        // The tolerance keeps e.g. 0.05 * 400 from rounding up to 21.
        ((fraction * cells as f64 - 1e-9).ceil().max(0.0) as usize).min(cells)
    })
}

/// Selection scores concentrated at ground-truth boundaries, on the 14, 28
/// and 56 grids.
pub fn forced_scores(scene: &SyntheticScene) -> Result<[RefinementScores; REFINE_STAGES]> {
    let gts = scene.ground_truths();
    let boxes: Vec<RoiBox> = scene.instances.iter().map(|i| i.bbox).collect();
    let grids = (0..REFINE_STAGES)
        .map(|s| boundary_scores(&gts, &boxes, ROI_GRID << s, ROI_GRID << s))
        .collect::<Result<Vec<_>>>()?;
    Ok(grids.try_into().expect("three stages"))
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub fraction: f64,
    pub budgets: [usize; REFINE_STAGES],
    pub report: FlopReport,
    pub sparse_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub n_rois: usize,
    pub config: PipelineConfig,
    pub rows: Vec<BenchRow>,
    pub dense_seconds: f64,
}

pub fn run_bench(
    scene: &SyntheticScene,
    config: &PipelineConfig,
    weights: &PipelineWeights,
    fractions: &[f64],
) -> Result<BenchResult> {
    ensure!(!fractions.is_empty(), "no active fractions given");
    for &f in fractions {
        ensure!(f > 0.0 && f <= 1.0, "active fraction {f} outside (0, 1]");
    }
    weights.check(config)?;
    let pyramid = scene.pyramid(config.backbone_channels)?;
    let rois = scene.rois(config.feature_dim)?;
    let scores = forced_scores(scene)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let budgets = budgets_for(fraction, rois.len());
        let opts = RunOptions { budgets, score_override: Some(scores.clone()) };
        let start = Instant::now();
        let run = run_pipeline(&pyramid, &rois, weights, config, &opts)?;
        let sparse_seconds = start.elapsed().as_secs_f64();
        let report = count_flops(&Trace::from_run(&run, config)?)?;
        rows.push(BenchRow { fraction, budgets, report, sparse_seconds });
    }
    let start = Instant::now();
    run_dense_pipeline(&pyramid, &rois, weights, config)?;
    let dense_seconds = start.elapsed().as_secs_f64();
    Ok(BenchResult { n_rois: rois.len(), config: config.clone(), rows, dense_seconds })
}

impl BenchResult {
    /// Deterministic FLOP table followed by the full report of each fraction.
    pub fn flop_table(&self) -> String {
        let mut s = String::from("bench v1\n");
        let _ = writeln!(
            s,
            "rois {} feature_dim {} processing {} reduced_backbone_samples {}",
            self.n_rois,
            self.config.feature_dim,
            self.config.processing.name(),
            self.config.reduced_backbone_samples
        );
        s.push_str("fraction budget1 budget2 budget3 sparse_macs dense_macs ratio processing_conv_ratio refinement_ratio\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {:.6} {:.6} {:.6}",
                r.fraction,
                r.budgets[0],
                r.budgets[1],
                r.budgets[2],
                r.report.sparse_total,
                r.report.dense_total,
                r.report.ratio(),
                r.report.processing_conv_ratio(),
                r.report.refinement_ratio()
            );
        }
        for r in &self.rows {
            let _ = writeln!(s, "\n# fraction {}", r.fraction);
            s.push_str(&r.report.to_text());
        }
        s
    }

    /// Wall-clock seconds; informational, varies between runs.
    pub fn timing_table(&self) -> String {
        let mut s = String::from("timing (non-normative)\nfraction sparse_seconds dense_seconds speedup\n");
        for r in &self.rows {
            let speedup = if r.sparse_seconds > 0.0 { self.dense_seconds / r.sparse_seconds } else { f64::NAN };
            let _ = writeln!(s, "{} {:.4} {:.4} {:.2}", r.fraction, r.sparse_seconds, self.dense_seconds, speedup);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_round_up_without_float_noise() {
        assert_eq!(budgets_for(0.05, 2), [20, 79, 314]);
        assert_eq!(budgets_for(1.0, 1), [196, 784, 3136]);
        assert_eq!(budgets_for(0.1, 1), [20, 79, 314]);
    }
}
