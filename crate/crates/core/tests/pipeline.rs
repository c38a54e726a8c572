mod common;

use common::checks::refine_agreement;
use common::naive::{self, Grid};
use common::{constructed, scene, small_config};
use proptest::prelude::*;
use rand::Rng;
use spsmask_core::config::{PipelineConfig, REFINE_STAGES};
use spsmask_core::oracle::{dense_stage_oracle, run_dense_pipeline, run_sparse_on_dense_pipeline, DenseStage};
use spsmask_core::params::ProcessingKind;
use spsmask_core::pipeline::{
    bce_with_logits, eval_losses, paste_roi, run_pipeline, score, stage0, targets_for_run, GroundTruth, RunOptions,
    StageOutputs, StageTargets,
};
use spsmask_core::shape::Shape;
use spsmask_core::sps::RefinementScores;
use spsmask_core::tensor::{RoiBox, ROI_GRID};
use spsmask_core::weights::PipelineWeights;

fn opts(k: usize) -> RunOptions {
    RunOptions { budgets: [k; REFINE_STAGES], score_override: None }
}

#[test]
fn zero_weights_emit_the_final_head_bias() {
    let cfg = small_config(8);
    let mut w = PipelineWeights::zeros(&cfg).unwrap();
    w.seg_head.layers_mut()[1].bias_mut()[0] = 0.75;
    w.refine_head.layers_mut()[1].bias_mut()[0] = -1.25;
    let (pyr, rois) = scene(1, 2, 8, 128);
    let out = stage0(&pyr, &rois, &w).unwrap();
    assert_eq!(out.seg_logits, vec![0.75; 2 * ROI_GRID * ROI_GRID]);
    assert_eq!(out.refine_logits, vec![-1.25; 2 * ROI_GRID * ROI_GRID]);
}

#[test]
fn stage0_matches_composed_reference() {
    let cfg = small_config(8);
    let w = constructed(&cfg);
    let (pyr, rois) = scene(2, 2, 8, 200);
    let out = stage0(&pyr, &rois, &w).unwrap();
    let mut seg = Vec::new();
    let mut refine = Vec::new();
    for roi in &rois {
        let mut x = naive::roi_align(&pyr, &roi.bbox, ROI_GRID, ROI_GRID);
        x.data = x.data.chunks(x.f).flat_map(|c| naive::residual(c, &roi.query, &w.query_fusion)).collect();
        for (l, k) in w.fcn.iter().enumerate() {
            let mut data = Vec::new();
            for i in 0..ROI_GRID {
                for j in 0..ROI_GRID {
                    let v = naive::conv(&x, 0, i, j, k);
                    data.extend(if l < 3 { naive::relu(v) } else { v });
                }
            }
            x = Grid { data, ..x };
        }
        for c in x.data.chunks(x.f) {
            seg.push(naive::mlp(&w.seg_head, c)[0]);
            refine.push(naive::mlp(&w.refine_head, c)[0]);
        }
    }
    naive::close(&out.seg_logits, &seg, 1e-6).unwrap();
    naive::close(&out.refine_logits, &refine, 1e-6).unwrap();
}

#[test]
fn full_width_shape_chain() {
    let cfg = PipelineConfig::default();
    let w = constructed(&cfg);
    let (pyr, rois) = scene(3, 1, 256, 256);
    let run = run_pipeline(&pyr, &rois, &w, &cfg, &opts(0)).unwrap();
    let chain: Vec<(usize, usize, usize)> = run.stages.iter().map(|s| (s.grid().1, s.feature_dim(), s.seg_logits.len())).collect();
    assert_eq!(chain, vec![(14, 256, 196), (28, 128, 0), (56, 64, 0), (112, 32, 0)]);
    // Nothing refined: the final mask is the stage-0 mask upsampled x8.
    let masks = run.masks().unwrap();
    let (m0, m3) = (masks.roi_mask(0, 0), masks.roi_mask(3, 0));
    for i in 0..112 {
        for j in 0..112 {
            assert_eq!(m3[i * 112 + j], m0[(i / 8) * 14 + j / 8]);
        }
    }
}

#[test]
fn masks_change_only_where_a_stage_predicted() {
    let cfg = small_config(8);
    let w = constructed(&cfg);
    let (pyr, rois) = scene(4, 2, 8, 160);
    let run = run_pipeline(&pyr, &rois, &w, &cfg, &opts(150)).unwrap();
    let masks = run.masks().unwrap();
    for s in 1..=REFINE_STAGES {
        let cells = run.stages[s].predicted_cells();
        assert_eq!(cells.len(), run.stages[s].seg_logits.len());
        let mut predicted = vec![false; masks.levels[s].len()];
        cells.iter().for_each(|&c| predicted[c] = true);
        let side = masks.side(s);
        let (cur, prev) = (&masks.levels[s], &masks.levels[s - 1]);
        let mut changed = 0;
        for flat in 0..cur.len() {
            let (r, i, j) = (flat / (side * side), flat / side % side, flat % side);
            let parent = prev[(r * side / 2 + i / 2) * side / 2 + j / 2];
            if !predicted[flat] {
                assert_eq!(cur[flat], parent, "stage {s} cell {flat} changed without a prediction");
            } else if cur[flat] != parent {
                changed += 1;
            }
        }
        assert!(changed > 0, "stage {s} changed nothing");
    }
}

#[test]
fn all_active_pipeline_equals_dense_head() {
    for kind in [ProcessingKind::Sfm, ProcessingKind::Deform, ProcessingKind::Conv, ProcessingKind::Mlp] {
        let cfg = PipelineConfig { processing: kind, ..small_config(8) };
        let w = constructed(&cfg);
        let (pyr, rois) = scene(5, 2, 8, 180);
        let sparse = run_pipeline(&pyr, &rois, &w, &cfg, &opts(usize::MAX)).unwrap();
        let dense = run_dense_pipeline(&pyr, &rois, &w, &cfg).unwrap();
        let masks = sparse.masks().unwrap();
        for s in 0..=REFINE_STAGES {
            naive::close(&masks.levels[s], &dense.masks.levels[s], 1e-6).unwrap();
        }
    }
}

#[test]
fn all_active_stage_equals_dense_stage_oracle() {
    let cfg = small_config(16);
    let w = constructed(&cfg);
    let (pyr, rois) = scene(6, 2, 16, 220);
    let run = run_pipeline(&pyr, &rois, &w, &cfg, &opts(usize::MAX)).unwrap();
    for s in 1..=REFINE_STAGES {
        let want = dense_stage_oracle(&run.stages[s - 1].dense_features(), s, &pyr, &rois, &w, &cfg).unwrap();
        let got = DenseStage::from_outputs(&run.stages[s]);
        assert!(got.predicted.iter().all(|&p| p));
        naive::close(got.features.as_slice(), want.features.as_slice(), 1e-6).unwrap();
        naive::close(&got.seg_logits, &want.seg_logits, 1e-6).unwrap();
        naive::close(&got.refine_logits, &want.refine_logits, 1e-6).unwrap();
    }
}

#[test]
fn sparse_pipeline_equals_sparse_on_dense_for_any_budget() {
    let mut r = common::rng(7);
    for trial in 0..4 {
        let kind = [ProcessingKind::Sfm, ProcessingKind::Deform, ProcessingKind::Conv, ProcessingKind::Mlp][trial];
        let cfg = PipelineConfig { processing: kind, reduced_backbone_samples: trial % 2 == 1, ..small_config(8) };
        let w = constructed(&cfg);
        let (pyr, rois) = scene(8 + trial as u64, 3, 8, 200);
        let budgets = [r.gen_range(0..=600), r.gen_range(0..=2400), r.gen_range(0..=9000)];
        let o = RunOptions { budgets, score_override: None };
        let sparse = run_pipeline(&pyr, &rois, &w, &cfg, &o).unwrap();
        let oracle = run_sparse_on_dense_pipeline(&pyr, &rois, &w, &cfg, &o).unwrap();
        assert_eq!(sparse.selection_scores, oracle.selection_scores);
        for (s, st) in sparse.stages.iter().enumerate() {
            let got = DenseStage::from_outputs(st);
            assert_eq!(got.predicted, oracle.stages[s].predicted, "stage {s}");
            naive::close(&got.seg_logits, &oracle.stages[s].seg_logits, 1e-6).unwrap();
        }
        let masks = sparse.masks().unwrap();
        naive::close(masks.finest(), oracle.masks.finest(), 1e-6).unwrap();
    }
}

#[test]
fn dense_stage_agrees_with_sparse_where_the_receptive_field_is_active() {
    // Columns 0..8 of the 14 grid are selected, so columns 0..16 of the 28
    // grid are active. SFM reads up to 5 cells away, which leaves columns
    // 0..11 with fully active neighbourhoods.
    let cfg = small_config(8);
    let w = constructed(&cfg);
    let (pyr, rois) = scene(12, 2, 8, 200);
    let s0 = stage0(&pyr, &rois, &w).unwrap();
    let values: Vec<f32> = (0..2 * 196).map(|c| 1.0 - (c % 14) as f32 / 14.0).collect();
    let scores = RefinementScores::new(2, 14, 14, values).unwrap();
    let sparse = spsmask_core::pipeline::refine_stage(&s0, &scores, 1, &pyr, &rois, &w, &cfg, 2 * 14 * 8).unwrap();
    let got = DenseStage::from_outputs(&sparse);
    let want = dense_stage_oracle(&s0.dense_features(), 1, &pyr, &rois, &w, &cfg).unwrap();
    let mut compared = 0;
    for flat in 0..got.predicted.len() {
        let col = flat % 28;
        assert_eq!(got.predicted[flat], col < 16);
        if col <= 10 {
            naive::close(&[got.seg_logits[flat]], &[want.seg_logits[flat]], 1e-6).unwrap();
            naive::close(got.features.cell_flat(flat), want.features.cell_flat(flat), 1e-6).unwrap();
            compared += 1;
        }
    }
    assert_eq!(compared, 2 * 28 * 11);
}

fn naive_paste(mask: &[f32], side: usize, b: &RoiBox, ih: usize, iw: usize) -> Vec<f32> {
    let g = Grid { n: 1, f: 1, h: side, w: side, data: mask.to_vec() };
    let mut out = vec![0.0; ih * iw];
    for py in 0..ih {
        for px in 0..iw {
            let (cy, cx) = (py as f64 + 0.5, px as f64 + 0.5);
            let inside = cy >= f64::from(b.y1) && cy < f64::from(b.y2) && cx >= f64::from(b.x1) && cx < f64::from(b.x2);
            if inside {
                let r = (cy - f64::from(b.y1)) / f64::from(b.height()) * side as f64;
                let c = (cx - f64::from(b.x1)) / f64::from(b.width()) * side as f64;
                out[py * iw + px] = naive::bilinear(&g, 0, r, c)[0];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn paste_matches_per_pixel_reference(seed in any::<u64>(), side in prop::sample::select(vec![14usize, 28, 56, 112])) {
        let mut r = common::rng(seed);
        let (ih, iw) = (r.gen_range(16..=96), r.gen_range(16..=96));
        let b = spsmask_core::random::roi_box(&mut r, ih + 8, iw + 8);
        let mask: Vec<f32> = (0..side * side).map(|_| r.gen_range(0.0..1.0)).collect();
        let got = paste_roi(&mask, side, &b, ih, iw).unwrap();
        prop_assert_eq!(naive::close(&got, &naive_paste(&mask, side, &b, ih, iw), 1e-6), Ok(()));
    }

    #[test]
    fn score_is_linear_in_the_class_score(mask in prop::collection::vec(0.0f32..1.0, 1..200), s in 0.0f32..1.0) {
        let unit = score(&mask, 1.0, 0.5);
        prop_assert!((score(&mask, s, 0.5) - f64::from(s) * unit).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&unit));
    }
}

#[test]
fn score_cases() {
    let s = 0.8f32;
    assert!((score(&[1.0; 196], s, 0.5) - f64::from(s)).abs() <= 1e-9);
    assert_eq!(score(&[0.2; 196], s, 0.5), 0.0);
    let half: Vec<f32> = (0..196).map(|k| if k < 98 { 0.9 } else { 0.1 }).collect();
    assert!((score(&half, s, 0.5) - f64::from(s) * f64::from(0.9f32)).abs() <= 1e-9);
}

#[test]
fn refine_targets_agree_with_fine_raster() {
    let (mut agree, mut total) = (0, 0);
    for seed in 0..12 {
        let (a, t) = refine_agreement(seed, [14, 28, 56][seed as usize % 3]);
        agree += a;
        total += t;
    }
    assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
}

fn zero_run(k: usize) -> (Vec<StageOutputs>, Vec<StageTargets>) {
    let cfg = small_config(8);
    let w = PipelineWeights::zeros(&cfg).unwrap();
    let (pyr, rois) = scene(20, 2, 8, 200);
    let run = run_pipeline(&pyr, &rois, &w, &cfg, &opts(k)).unwrap();
    let gts: Vec<GroundTruth> = rois
        .iter()
        .map(|r| GroundTruth {
            mask: Shape::Ellipse {
                cx: f64::from(r.bbox.x1 + r.bbox.x2) / 2.0,
                cy: f64::from(r.bbox.y1 + r.bbox.y2) / 2.0,
                rx: f64::from(r.bbox.width()) / 3.0,
                ry: f64::from(r.bbox.height()) / 3.0,
                angle: 0.3,
            },
            label: 1,
        })
        .collect();
    let targets = targets_for_run(&gts, &rois, &run.stages).unwrap();
    (run.stages, targets)
}

#[test]
fn zero_logits_give_ln2_times_total_weight() {
    let (stages, targets) = zero_run(300);
    assert!(stages.iter().all(|s| s.seg_logits.iter().all(|&l| l == 0.0)));
    let report = eval_losses(&stages, &targets).unwrap();
    assert!((report.total - std::f64::consts::LN_2 * 2.5).abs() <= 1e-9, "{}", report.total);
}

#[test]
fn confident_correct_logits_give_near_zero_loss() {
    let (mut stages, targets) = zero_run(300);
    for (st, t) in stages.iter_mut().zip(&targets) {
        st.seg_logits = t.seg.iter().map(|&v| if v > 0.5 { 20.0 } else { -20.0 }).collect();
        st.refine_logits = t.refine.iter().map(|&v| if v > 0.5 { 20.0 } else { -20.0 }).collect();
    }
    assert!(eval_losses(&stages, &targets).unwrap().total < 1e-6);
}

#[test]
fn single_cell_losses_by_hand() {
    assert!((bce_with_logits(1.5, 1.0) - 0.2014132779827524).abs() <= 1e-12);
    assert!((bce_with_logits(-0.25, 1.0) - 0.8259394198788436).abs() <= 1e-12);
    assert!((bce_with_logits(0.0, 0.0) - std::f64::consts::LN_2).abs() <= 1e-15);
    assert!(bce_with_logits(-80.0, 1.0) > 79.0);
}

#[test]
fn mismatched_weights_name_the_dimension() {
    let w16 = PipelineWeights::zeros(&small_config(16)).unwrap();
    let err = PipelineWeights::from_tensors(&small_config(32), w16.to_tensors()).unwrap_err().to_string();
    assert!(err.contains("F_0=32"), "{err}");

    let cfg = small_config(16);
    let mut map = PipelineWeights::zeros(&cfg).unwrap().to_tensors();
    map.insert("stage2.halve.0.weight", vec![3, 8], vec![0.0; 24]);
    let err = PipelineWeights::from_tensors(&cfg, map).unwrap_err().to_string();
    assert!(err.contains("stage2.halve.0.weight") && err.contains("F_1=8"), "{err}");

    let bad = PipelineConfig { backbone_channels: 64, ..small_config(16) };
    assert!(bad.validate().unwrap_err().to_string().contains("backbone_channels"));
}

#[test]
fn seeded_runs_are_deterministic() {
    let cfg = small_config(8);
    let w = PipelineWeights::seeded(&cfg).unwrap();
    let (pyr, rois) = scene(30, 2, 8, 128);
    let a = run_pipeline(&pyr, &rois, &w, &cfg, &opts(200)).unwrap();
    let b = run_pipeline(&pyr, &rois, &w, &cfg, &opts(200)).unwrap();
    assert_eq!(a, b);
}
