use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use spsmask::bench::DEFAULT_FRACTIONS;
use spsmask::commands::{self, DemoOptions};
use spsmask::verify::{Fault, VerifyOptions};

#[derive(Parser)]
#[command(name = "spsmask", version, about = "Sparse coarse-to-fine instance mask head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene to <out>/scene.json.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        instances: usize,
        /// Image size as HEIGHTxWIDTH or a single side.
        #[arg(long, default_value = "256", value_parser = parse_size)]
        image_size: (usize, usize),
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the head on a scene and write <out>/masks.txt.
    Demo {
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the config's top-K budget.
        #[arg(long)]
        top_k: Option<usize>,
        /// Also dump per-stage and pasted masks as PGM images.
        #[arg(long)]
        dump_stages: bool,
    },
    /// Randomized oracle-equivalence and invariant checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt every generated map (index-range, active-uniqueness,
        /// orphan-passive) to exercise the validator.
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Sparse vs dense MAC counts and timings over active fractions.
    Bench {
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad image size '{s}': {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|v| (v, v)),
    }
}

/// `Ok(false)` means verification ran and found violations.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { seed, instances, image_size: (h, w), out } => {
            let path = commands::generate(seed, instances, h, w, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Demo { scene, config, weights, out, top_k, dump_stages } => {
            let (config, weights) = commands::load_setup(config.as_deref(), weights.as_deref())?;
            let summary = commands::demo(&scene, &config, weights, &out, &DemoOptions { top_k, dump_stages })?;
            print!("{summary}");
        }
        Command::Verify { seed, trials, out, inject_fault } => {
            let report = commands::verify(&VerifyOptions { seed, trials, fault: inject_fault }, out.as_deref())?;
            print!("{}", report.to_text());
            return Ok(report.ok());
        }
        Command::Bench { scene, config, weights, fractions, out } => {
            let (config, weights) = commands::load_setup(config.as_deref(), weights.as_deref())?;
            let fractions = if fractions.is_empty() { DEFAULT_FRACTIONS.to_vec() } else { fractions };
            if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                bail!("--fractions must lie in (0, 1]");
            }
            print!("{}", commands::bench(&scene, &config, &weights, &fractions, &out)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
