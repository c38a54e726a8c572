//! Per-op comparisons of the sparse path against the naive references.

use rand::Rng;
use spsmask_core::ops;
use spsmask_core::params::ProcessingKind;
use spsmask_core::pipeline::make_targets;
use spsmask_core::random::{self, SpsLimits};
use spsmask_core::shape::{MaskSampler, Shape};
use spsmask_core::sps::{CellId, FeatureMatrix, SpsMap};
use spsmask_core::tensor::RoiBox;

use super::naive::{self, Grid};
use super::rng;

/// Maps with up to 4 RoIs, grids up to 28 x 28 and up to 16 features.
pub const OP_LIMITS: SpsLimits = SpsLimits { max_rois: 4, max_side: 28, max_features: 16, integer: false };

pub const OP_NAMES: [&str; 10] = [
    "sparse_pointwise",
    "sparse_conv3x3 d=1",
    "sparse_conv3x3 d=3",
    "sparse_conv3x3 d=5",
    "sparse_deform_conv",
    "sfm",
    "halve_features",
    "fuse_backbone",
    "upsample_split",
    "apply_processing",
];

fn compare(got: &[f32], want: &[f32], exact: bool) -> Result<(), String> {
    if exact {
        naive::exact(got, want)
    } else {
        naive::close(got, want, 1e-6)
    }
}

/// Active rows of `out` against `reference` evaluated on the input, and the
/// untouched structure.
fn check_active(
    input: &SpsMap,
    out: &SpsMap,
    exact: bool,
    reference: impl Fn(&Grid, usize, usize, usize) -> Vec<f32>,
) -> Result<(), String> {
    out.validate().map_err(|v| format!("validator: {v}"))?;
    if out.index() != input.index() || out.passive() != input.passive() {
        return Err("index grid or passive rows changed".into());
    }
    let g = Grid::from_sps(input);
    for c in 0..input.n_cells() {
        if !naive::is_active(input, c) {
            continue;
        }
        let CellId { roi, row, col } = input.cell_of(c);
        let got = out.active().row(input.index()[c] as usize);
        compare(got, &reference(&g, roi, row, col), exact).map_err(|e| format!("cell {roi},{row},{col}: {e}"))?;
    }
    Ok(())
}

fn with_even_features(r: &mut impl Rng, m: &SpsMap, integer: bool) -> SpsMap {
    let f = m.features();
    if f.is_multiple_of(2) {
        return m.clone();
    }
    let mlp = random::mlp(r, f, f, 2 * f, 1, integer);
    let act = m.active().map_rows(2 * f, |_, x, o| o.copy_from_slice(&naive::mlp(&mlp, x)));
    let pas = m.passive().map_rows(2 * f, |_, x, o| o.copy_from_slice(&naive::mlp(&mlp, x)));
    SpsMap::from_parts(m.n_rois(), m.height(), m.width(), act, pas, m.index().to_vec()).unwrap()
}

/// Runs every op once on a random map drawn from `seed`. A quarter of the
/// seeds use small-integer values and weights; those must match exactly
/// except for backbone fusion, whose sample points are fractional.
pub fn naive_op_checks(seed: u64) -> Vec<(&'static str, Result<(), String>)> {
    let mut r = rng(seed);
    let integer = r.gen_bool(0.25);
    let m = random::sps(&mut r, SpsLimits { integer, ..OP_LIMITS });
    let f = m.features();
    let mut results = Vec::new();
    for name in OP_NAMES {
        let outcome = match name {
            "sparse_pointwise" => {
                let mlp = random::mlp(&mut r, f, f, f, 2, integer);
                let out = ops::sparse_pointwise(&m, &mlp).unwrap();
                check_active(&m, &out, integer, |g, ro, i, j| naive::mlp(&mlp, g.at(ro, i, j)))
            }
            "sparse_conv3x3 d=1" | "sparse_conv3x3 d=3" | "sparse_conv3x3 d=5" => {
                let d = usize::from(name.as_bytes()[name.len() - 1] - b'0');
                let k = random::conv(&mut r, f, f, d, integer);
                let out = ops::sparse_conv3x3(&m, &k).unwrap();
                check_active(&m, &out, integer, |g, ro, i, j| naive::conv(g, ro, i, j, &k))
            }
            "sparse_deform_conv" => {
                let p = random::deform(&mut r, f, integer);
                let out = ops::sparse_deform_conv(&m, &p).unwrap();
                check_active(&m, &out, integer, |g, ro, i, j| naive::deform(g, ro, i, j, &p))
            }
            "sfm" => {
                let p = random::sfm(&mut r, f, integer);
                let out = ops::sfm(&m, &p).unwrap();
                check_active(&m, &out, integer, |g, ro, i, j| naive::sfm(g, ro, i, j, &p))
            }
            "apply_processing" => {
                let kind = [ProcessingKind::Mlp, ProcessingKind::Conv, ProcessingKind::Deform, ProcessingKind::Sfm]
                    [r.gen_range(0..4)];
                let p = random::processing(&mut r, kind, f, integer);
                let out = ops::apply_processing(&m, &p).unwrap();
                check_active(&m, &out, integer, |g, ro, i, j| naive::process(g, ro, i, j, &p))
            }
            "halve_features" => {
                let even = with_even_features(&mut r, &m, integer);
                let fe = even.features();
                let mlp = random::mlp(&mut r, fe, fe, fe / 2, 1, integer);
                let out = ops::halve_features(&even, &mlp).unwrap();
                let want: Vec<f32> = Grid::from_sps(&even).data.chunks(fe).flat_map(|x| naive::mlp(&mlp, x)).collect();
                out.validate()
                    .map_err(|v| format!("validator: {v}"))
                    .and_then(|_| if out.index() == even.index() { Ok(()) } else { Err("index changed".into()) })
                    .and_then(|_| compare(&Grid::from_sps(&out).data, &want, integer))
            }
            "fuse_backbone" => {
                let (ih, iw) = (r.gen_range(32..=256), r.gen_range(32..=256));
                let cb = r.gen_range(1..=8);
                let pyr = random::pyramid(&mut r, ih, iw, cb, integer).unwrap();
                let boxes: Vec<RoiBox> = (0..m.n_rois()).map(|_| random::roi_box(&mut r, ih, iw)).collect();
                let stage = r.gen_range(1..=3);
                let used = r.gen_range(1..=cb);
                let mlp = random::mlp(&mut r, f + used, f, f, 2, integer);
                let out = ops::fuse_backbone(&m, &pyr, &boxes, stage, &mlp, used).unwrap();
                let (h, w) = (m.height(), m.width());
                check_active(&m, &out, false, |g, ro, i, j| {
                    let b = naive::backbone(&pyr, &boxes[ro], stage, h, w, i, j, used);
                    naive::residual(g.at(ro, i, j), &b, &mlp)
                })
            }
            "upsample_split" => {
                let children = std::array::from_fn(|_| random::mlp(&mut r, f, f, f, 2, integer));
                let out = m.upsample_split(&children).unwrap();
                out.validate()
                    .map_err(|v| format!("validator: {v}"))
                    .and_then(|_| compare(&Grid::from_sps(&out).data, &naive::upsample(&m, &children).data, integer))
            }
            other => unreachable!("unknown op {other}"),
        };
        results.push((name, outcome));
    }
    results
}

/// A random op sequence starting from a random map; returns the number of
/// ops applied, or the first validator failure.
pub fn random_sequence(seed: u64, len: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    let limits = SpsLimits { max_rois: 3, max_side: 12, max_features: 6, integer: false };
    let mut m = random::sps(&mut r, limits);
    m.validate().map_err(|v| format!("initial map: {v}"))?;
    let mut applied = 0;
    while applied < len {
        let f = m.features();
        let (name, next) = match r.gen_range(0..9) {
            0 => ("sparse_pointwise", ops::sparse_pointwise(&m, &random::mlp(&mut r, f, f, f, 2, false))),
            1 => {
                let d = [1, 3, 5][r.gen_range(0..3)];
                ("sparse_conv3x3", ops::sparse_conv3x3(&m, &random::conv(&mut r, f, f, d, false)))
            }
            2 => ("sparse_deform_conv", ops::sparse_deform_conv(&m, &random::deform(&mut r, f, false))),
            3 => ("sfm", ops::sfm(&m, &random::sfm(&mut r, f, false))),
            4 if f.is_multiple_of(2) => ("halve_features", ops::halve_features(&m, &random::mlp(&mut r, f, f, f / 2, 1, false))),
            5 if m.height() <= 24 && m.width() <= 24 => {
                let children = std::array::from_fn(|_| random::mlp(&mut r, f, f, f, 2, false));
                ("upsample_split", m.upsample_split(&children))
            }
            6 => {
                let s = random::scores(&mut r, m.n_rois(), m.height(), m.width());
                let k = r.gen_range(0..=m.n_cells());
                ("update_partition", m.update_partition(&s, k))
            }
            7 => {
                let data = random::values(&mut r, m.n_active() * f, false);
                ("scatter_update", m.scatter_update(FeatureMatrix::new(m.n_active(), f, data).unwrap()))
            }
            8 => {
                let (ih, iw) = (r.gen_range(32..=128), r.gen_range(32..=128));
                let pyr = random::pyramid(&mut r, ih, iw, 2, false).unwrap();
                let boxes: Vec<RoiBox> = (0..m.n_rois()).map(|_| random::roi_box(&mut r, ih, iw)).collect();
                let mlp = random::mlp(&mut r, f + 2, f, f, 2, false);
                ("fuse_backbone", ops::fuse_backbone(&m, &pyr, &boxes, r.gen_range(1..=3), &mlp, 2))
            }
            _ => continue,
        };
        let next = next.map_err(|e| format!("op {applied} ({name}) failed: {e}"))?;
        next.validate().map_err(|v| format!("op {applied} ({name}): {v}"))?;
        if next.n_active() + next.n_passive() > next.n_cells() {
            return Err(format!("op {applied} ({name}): storage bound exceeded"));
        }
        m = next;
        applied += 1;
    }
    Ok(applied)
}

/// A cell is a refinement target iff a 64 x 64 lattice over the cell sees
/// both foreground and background.
pub fn raster_refine_target(shape: &Shape, bbox: &RoiBox, h: usize, w: usize, row: usize, col: usize) -> bool {
    const N: usize = 64;
    let (mut fg, mut bg) = (false, false);
    for a in 0..N {
        for b in 0..N {
            let y = f64::from(bbox.y1) + (row as f64 + (a as f64 + 0.5) / N as f64) / h as f64 * f64::from(bbox.height());
            let x = f64::from(bbox.x1) + (col as f64 + (b as f64 + 0.5) / N as f64) / w as f64 * f64::from(bbox.width());
            if shape.contains(x, y) {
                fg = true;
            } else {
                bg = true;
            }
        }
    }
    fg && bg
}

/// Random union of one to three ellipses inside a random box.
pub fn random_blob(seed: u64) -> (Shape, RoiBox) {
    let mut r = rng(seed);
    let (x1, y1) = (r.gen_range(0.0..120.0f32).round(), r.gen_range(0.0..120.0f32).round());
    let (bw, bh) = (r.gen_range(40.0..130.0f32).round(), r.gen_range(40.0..130.0f32).round());
    let bbox = RoiBox::new(x1, y1, x1 + bw, y1 + bh).unwrap();
    let parts = (0..r.gen_range(1..=3))
        .map(|_| Shape::Ellipse {
            cx: f64::from(x1) + r.gen_range(0.25..0.75) * f64::from(bw),
            cy: f64::from(y1) + r.gen_range(0.25..0.75) * f64::from(bh),
            rx: r.gen_range(0.1..0.45) * f64::from(bw),
            ry: r.gen_range(0.1..0.45) * f64::from(bh),
            angle: r.gen_range(0.0..std::f64::consts::PI),
        })
        .collect();
    (Shape::Blob { parts }, bbox)
}

/// `(agreeing cells, cells)` between `make_targets` and the raster oracle
/// for the blob of `seed` on a `side x side` grid.
pub fn refine_agreement(seed: u64, side: usize) -> (usize, usize) {
    let (shape, bbox) = random_blob(seed);
    let (_, refine) = make_targets(&shape, &bbox, side, side).unwrap();
    let agree = (0..side * side)
        .filter(|&c| (refine[c] == 1.0) == raster_refine_target(&shape, &bbox, side, side, c / side, c % side))
        .count();
    (agree, side * side)
}
