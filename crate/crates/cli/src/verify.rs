//! Randomized oracle-equivalence and invariant checks.
//!
//! Every trial derives its own seed (`base + trial`), so a failure can be
//! reproduced in isolation with `--seed <failing seed> --trials 1`.

use std::fmt::Write as _;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spsmask_core::config::PipelineConfig;
use spsmask_core::oracle::{
    dense_children, dense_conv3x3, dense_deform_conv, dense_fuse_backbone, dense_halve, dense_pointwise, dense_sfm,
    run_sparse_on_dense_pipeline, DenseStage,
};
use spsmask_core::ops;
use spsmask_core::params::{ProcessingKind, SFM_DILATIONS};
use spsmask_core::pipeline::{run_pipeline, RunOptions};
use spsmask_core::random::{self, SpsLimits};
use spsmask_core::sps::{FeatureMatrix, SpsMap};
use spsmask_core::tensor::{DenseGrid, RoiBox, RoiDetection};
use spsmask_core::weights::PipelineWeights;

/// Deliberate corruption applied to every generated map before validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// An index entry points past the stored rows.
    IndexRange,
    /// An active row is referenced twice (or never).
    ActiveUniqueness,
    /// A passive row nobody references.
    OrphanPassive,
}

impl FromStr for Fault {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "index-range" => Ok(Fault::IndexRange),
            "active-uniqueness" => Ok(Fault::ActiveUniqueness),
            "orphan-passive" => Ok(Fault::OrphanPassive),
            other => bail!("unknown fault '{other}' (index-range, active-uniqueness, orphan-passive)"),
        }
    }
}

/// Breaks `map` so that the validator reports `fault`.
pub fn inject_fault(map: &SpsMap, fault: Fault) -> SpsMap {
    let f = map.features();
    let mut index = map.index().to_vec();
    let (mut active, mut passive) = (map.active().clone(), map.passive().clone());
    let extra_row = |m: &FeatureMatrix| {
        let mut data = m.as_slice().to_vec();
        data.extend(std::iter::repeat_n(0.0, f));
        FeatureMatrix::new(m.rows() + 1, f, data).expect("row appended")
    };
    match fault {
        Fault::IndexRange => index[0] = (map.n_active() + map.n_passive()) as u32,
        Fault::ActiveUniqueness => {
            if map.n_active() > 0 && index.len() > 1 {
                let other = index.iter().position(|&v| v != 0).expect("more than one cell");
                index[other] = 0;
            } else {
                // An active row with no cell. Existing references shift by one.
                for v in &mut index {
                    *v += 1;
                }
                let mut data = vec![0.0; f];
                data.extend_from_slice(active.as_slice());
                active = FeatureMatrix::new(active.rows() + 1, f, data).expect("row prepended");
            }
        }
        Fault::OrphanPassive => passive = extra_row(&passive),
    }
    SpsMap::from_parts_unchecked(map.n_rois(), map.height(), map.width(), active, passive, index)
}

/// Outcome of one property across all trials.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub passed: usize,
    pub failed: usize,
    /// Smallest failing trial seed and its message.
    pub first_failure: Option<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.properties.iter().all(|p| p.failed == 0)
    }

    fn record(&mut self, name: &str, seed: u64, outcome: Result<()>) {
        let idx = match self.properties.iter().position(|p| p.name == name) {
            Some(i) => i,
            None => {
                self.properties.push(PropertyResult { name: name.to_string(), passed: 0, failed: 0, first_failure: None });
                self.properties.len() - 1
            }
        };
        let p = &mut self.properties[idx];
        match outcome {
            Ok(()) => p.passed += 1,
            Err(e) => {
                p.failed += 1;
                if p.first_failure.as_ref().is_none_or(|(s, _)| seed < *s) {
                    p.first_failure = Some((seed, format!("{e:#}")));
                }
            }
        }
    }

    /// One line per property, then an overall verdict.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.properties {
            let status = if p.failed == 0 { "PASS" } else { "FAIL" };
            let _ = write!(s, "{status} {} {}/{}", p.name, p.passed, p.passed + p.failed);
            if let Some((seed, msg)) = &p.first_failure {
                let _ = write!(s, " seed={seed}: {msg}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "{}", if self.ok() { "all properties passed" } else { "verification FAILED" });
        s
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub trials: usize,
    pub fault: Option<Fault>,
}

const LIMITS: SpsLimits = SpsLimits { max_rois: 4, max_side: 28, max_features: 16, integer: false };

/// Exact comparison of two dense grids, naming the first differing value.
pub fn compare_grids(what: &str, got: &DenseGrid, want: &DenseGrid) -> Result<()> {
    if got.shape() != want.shape() {
        bail!("{what}: shape {:?} vs oracle {:?}", got.shape(), want.shape());
    }
    let f = got.channels().max(1);
    match got.as_slice().iter().zip(want.as_slice()).position(|(a, b)| a.to_bits() != b.to_bits()) {
        None => Ok(()),
        Some(k) => Err(anyhow!(
            "{what}: cell {} channel {} is {} but the oracle gives {}",
            k / f,
            k % f,
            got.as_slice()[k],
            want.as_slice()[k]
        )),
    }
}

fn validated(what: &str, m: &SpsMap) -> Result<()> {
    m.validate().map_err(|v| anyhow!("{what} broke '{}': {v}", v.name()))
}

fn op_checks(report: &mut VerifyReport, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let integer = rng.gen_bool(0.25);
    let m = random::sps(&mut rng, SpsLimits { integer, ..LIMITS });
    let f = m.features();
    let dense = m.to_dense();
    let mask = m.active_mask();
    let mask = Some(mask.as_slice());
    let run = |rng: &mut ChaCha8Rng, name: &str| -> Result<()> {
        let (got, want) = match name {
            "sparse_pointwise" => {
                let mlp = random::mlp(rng, f, f, f, 2, integer);
                (ops::sparse_pointwise(&m, &mlp)?, dense_pointwise(&dense, mask, &mlp)?)
            }
            "sparse_conv3x3 d=1" | "sparse_conv3x3 d=3" | "sparse_conv3x3 d=5" => {
                let d = name.as_bytes()[name.len() - 1] - b'0';
                let k = random::conv(rng, f, f, d as usize, integer);
                (ops::sparse_conv3x3(&m, &k)?, dense_conv3x3(&dense, mask, &k)?)
            }
            "sparse_deform_conv" => {
                let p = random::deform(rng, f, integer);
                (ops::sparse_deform_conv(&m, &p)?, dense_deform_conv(&dense, mask, &p)?)
            }
            "sfm" => {
                let p = random::sfm(rng, f, integer);
                (ops::sfm(&m, &p)?, dense_sfm(&dense, mask, &p)?)
            }
            "halve_features" => {
                let mut even = m.clone();
                if f % 2 == 1 {
                    // Double the feature size so it can be halved.
                    let mlp = random::mlp(rng, f, f, 2 * f, 1, integer);
                    let act = even.active().map_rows(2 * f, |_, r, o| o.copy_from_slice(&mlp.forward(r)));
                    let pas = even.passive().map_rows(2 * f, |_, r, o| o.copy_from_slice(&mlp.forward(r)));
                    even = SpsMap::from_parts(m.n_rois(), m.height(), m.width(), act, pas, m.index().to_vec())?;
                }
                let fe = even.features();
                let mlp = random::mlp(rng, fe, fe, fe / 2, 1, integer);
                (ops::halve_features(&even, &mlp)?, dense_halve(&even.to_dense(), &mlp)?)
            }
            "fuse_backbone" => {
                let (ih, iw) = (rng.gen_range(32..=256), rng.gen_range(32..=256));
                let cb = rng.gen_range(1..=8);
                let pyr = random::pyramid(rng, ih, iw, cb, integer)?;
                let boxes: Vec<RoiBox> = (0..m.n_rois()).map(|_| random::roi_box(rng, ih, iw)).collect();
                let stage = rng.gen_range(1..=3);
                let used = rng.gen_range(1..=cb);
                let mlp = random::mlp(rng, f + used, f, f, 2, integer);
                (
                    ops::fuse_backbone(&m, &pyr, &boxes, stage, &mlp, used)?,
                    dense_fuse_backbone(&dense, mask, &pyr, &boxes, stage, &mlp, used)?,
                )
            }
            "upsample_split" => {
                let children = std::array::from_fn(|_| random::mlp(rng, f, f, f, 2, integer));
                (m.upsample_split(&children)?, dense_children(&dense, mask, &children)?.0)
            }
            other => unreachable!("unknown op check {other}"),
        };
        validated(name, &got)?;
        compare_grids(name, &got.to_dense(), &want)
    };
    let names = [
        "sparse_pointwise",
        "sparse_conv3x3 d=1",
        "sparse_conv3x3 d=3",
        "sparse_conv3x3 d=5",
        "sparse_deform_conv",
        "sfm",
        "halve_features",
        "fuse_backbone",
        "upsample_split",
    ];
    debug_assert_eq!(SFM_DILATIONS, [1, 3, 5]);
    for name in names {
        let outcome = run(&mut rng, name);
        report.record(name, seed, outcome);
    }

    let mut text = Vec::new();
    let round_trip = m
        .write_text(&mut text)
        .map_err(anyhow::Error::from)
        .and_then(|_| Ok(SpsMap::read_text(text.as_slice())?))
        .and_then(|back| if back == m { Ok(()) } else { Err(anyhow!("text round trip changed the map")) });
    report.record("text round trip", seed, round_trip);

    let identity = {
        let k = rng.gen_range(0..=dense.n_cells());
        let s = random::scores(&mut rng, m.n_rois(), m.height(), m.width());
        SpsMap::build_from_dense(&dense, &s, k)
            .map_err(anyhow::Error::from)
            .and_then(|b| compare_grids("to_dense(build_from_dense)", &b.to_dense(), &dense))
    };
    report.record("to_dense inverts build_from_dense", seed, identity);
}

fn validator_check(report: &mut VerifyReport, seed: u64, fault: Option<Fault>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut m = random::sps(&mut rng, LIMITS);
    if let Some(fault) = fault {
        m = inject_fault(&m, fault);
    }
    report.record("validator", seed, validated("generated map", &m));
}

/// Small head, random processing module and budgets; the sparse run must
/// equal the sparse-on-dense oracle run at every cell of every stage.
fn pipeline_check(report: &mut VerifyReport, seed: u64) {
    let outcome = (|| -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let kinds = [ProcessingKind::Mlp, ProcessingKind::Conv, ProcessingKind::Deform, ProcessingKind::Sfm];
        let config = PipelineConfig {
            processing: kinds[rng.gen_range(0..4)],
            feature_dim: 8,
            backbone_channels: 8,
            reduced_backbone_samples: rng.gen_bool(0.5),
            seed: rng.gen(),
            ..Default::default()
        };
        let weights = PipelineWeights::seeded(&config)?;
        let (ih, iw) = (rng.gen_range(32..=160), rng.gen_range(32..=160));
        let pyr = random::pyramid(&mut rng, ih, iw, 8, false)?;
        let n = rng.gen_range(1..=2);
        let rois = (0..n)
            .map(|_| {
                let q = random::values(&mut rng, 8, false);
                Ok(RoiDetection::new(random::roi_box(&mut rng, ih, iw), 0.9, q)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let opts = RunOptions {
            budgets: std::array::from_fn(|s| rng.gen_range(0..=(n * 196) << (2 * s))),
            score_override: None,
        };
        let sparse = run_pipeline(&pyr, &rois, &weights, &config, &opts)?;
        let oracle = run_sparse_on_dense_pipeline(&pyr, &rois, &weights, &config, &opts)?;
        for (s, (a, b)) in sparse.stages.iter().zip(&oracle.stages).enumerate() {
            if let Some(m) = a.sps() {
                validated(&format!("stage {s}"), m)?;
            }
            let a = DenseStage::from_outputs(a);
            compare_grids(&format!("stage {s} features"), &a.features, &b.features)?;
            if a.predicted != b.predicted || a.seg_logits != b.seg_logits || a.refine_logits != b.refine_logits {
                bail!("stage {s}: predictions differ from the oracle");
            }
        }
        if sparse.masks()? != oracle.masks {
            bail!("assembled masks differ from the oracle");
        }
        Ok(())
    })();
    report.record("pipeline vs sparse-on-dense", seed, outcome);
}

/// How often the (costlier) pipeline check runs.
pub const PIPELINE_EVERY: usize = 4;

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let mut report = VerifyReport::default();
    for t in 0..opts.trials {
        let seed = opts.seed.wrapping_add(t as u64);
        validator_check(&mut report, seed, opts.fault);
        op_checks(&mut report, seed);
        if t % PIPELINE_EVERY == 0 {
            pipeline_check(&mut report, seed);
        }
    }
    report
}
