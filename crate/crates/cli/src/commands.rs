//! Subcommand implementations. Each writes its primary outputs into an
//! output directory and returns a short summary for stdout.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use spsmask_core::config::PipelineConfig;
use spsmask_core::pipeline::{build_mask_stacks, write_mask_records, write_pgm, Pipeline, RunOptions};
use spsmask_core::weights::PipelineWeights;

use crate::bench::run_bench;
use crate::scene::SyntheticScene;
use crate::verify::{run_verify, VerifyOptions, VerifyReport};

pub const SCENE_FILE: &str = "scene.json";
pub const MASKS_FILE: &str = "masks.txt";
pub const BENCH_FILE: &str = "bench.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const VERIFY_FILE: &str = "verify.txt";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Config from a TOML file (or defaults) and weights from a file (or the
/// config's seed).
pub fn load_setup(config: Option<&Path>, weights: Option<&Path>) -> Result<(PipelineConfig, PipelineWeights)> {
    let config = match config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let weights = match weights {
        Some(p) => PipelineWeights::load(&config, p).with_context(|| format!("weights {}", p.display()))?,
        None => PipelineWeights::seeded(&config)?,
    };
    Ok((config, weights))
}

pub fn generate(seed: u64, instances: usize, height: usize, width: usize, out: &Path) -> Result<PathBuf> {
    let scene = SyntheticScene::generate(seed, instances, height, width)?;
    ensure_dir(out)?;
    let path = out.join(SCENE_FILE);
    scene.save(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, Default)]
pub struct DemoOptions {
    /// Overrides the config's top-K budget.
    pub top_k: Option<usize>,
    /// Also write per-stage masks and the pasted mask as PGM images.
    pub dump_stages: bool,
}

/// Runs the head on a scene; writes `masks.txt` and optional PGM dumps.
pub fn demo(
    scene_path: &Path,
    config: &PipelineConfig,
    weights: PipelineWeights,
    out: &Path,
    opts: &DemoOptions,
) -> Result<String> {
    let scene = SyntheticScene::load(scene_path)?;
    let mut config = config.clone();
    if let Some(k) = opts.top_k {
        config.top_k = k;
    }
    let pipeline = Pipeline::new(config, weights)?;
    let pyramid = scene.pyramid(pipeline.config.backbone_channels)?;
    let rois = scene.rois(pipeline.config.feature_dim)?;
    let run = pipeline.run(&pyramid, &rois, &RunOptions::from_config(&pipeline.config))?;
    let masks = run.masks()?;
    let thr = pipeline.config.mask_threshold;
    let stacks = build_mask_stacks(&masks, &rois, scene.image_height, scene.image_width, thr)?;

    ensure_dir(out)?;
    let path = out.join(MASKS_FILE);
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_mask_records(&stacks, thr, BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))?;
    if opts.dump_stages {
        for (r, stack) in stacks.iter().enumerate() {
            for (s, level) in stack.levels.iter().enumerate() {
                let side = masks.side(s);
                let p = out.join(format!("roi{r}_mask{side}.pgm"));
                let mut buf = Vec::new();
                write_pgm(level, side, side, &mut buf)?;
                fs::write(&p, buf).with_context(|| format!("writing {}", p.display()))?;
            }
            let p = out.join(format!("roi{r}_pasted.pgm"));
            let mut buf = Vec::new();
            write_pgm(&stack.pasted, stack.image_height, stack.image_width, &mut buf)?;
            fs::write(&p, buf).with_context(|| format!("writing {}", p.display()))?;
        }
    }
    let mut summary = String::new();
    for (s, st) in run.stages.iter().enumerate() {
        let (n, h, w) = st.grid();
        summary.push_str(&format!(
            "stage {s}: grid {n}x{h}x{w}, features {}, predictions {}\n",
            st.feature_dim(),
            st.seg_logits.len()
        ));
    }
    for (r, stack) in stacks.iter().enumerate() {
        summary.push_str(&format!("roi {r}: s_seg {:.6}\n", stack.s_seg));
    }
    summary.push_str(&format!("wrote {}\n", path.display()));
    Ok(summary)
}

/// Runs the verifier and writes its report when `out` is given.
pub fn verify(opts: &VerifyOptions, out: Option<&Path>) -> Result<VerifyReport> {
    anyhow::ensure!(opts.trials >= 1, "--trials must be at least 1");
    let report = run_verify(opts);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_file(&dir.join(VERIFY_FILE), &report.to_text())?;
    }
    Ok(report)
}

/// Runs the sweep; writes `bench.txt` (deterministic) and `timing.txt`.
pub fn bench(
    scene_path: &Path,
    config: &PipelineConfig,
    weights: &PipelineWeights,
    fractions: &[f64],
    out: &Path,
) -> Result<String> {
    let scene = SyntheticScene::load(scene_path)?;
    let result = run_bench(&scene, config, weights, fractions)?;
    ensure_dir(out)?;
    let flops = result.flop_table();
    let timing = result.timing_table();
    write_file(&out.join(BENCH_FILE), &flops)?;
    write_file(&out.join(TIMING_FILE), &timing)?;
    let head: String = flops.lines().take(3 + result.rows.len()).map(|l| format!("{l}\n")).collect();
    Ok(format!("{head}\n{timing}"))
}
