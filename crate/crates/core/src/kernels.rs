//! Inner loops shared by the sparse path and the dense reference path.
//!
//! Both paths route every per-cell contraction and interpolation through
//! these functions, so the two storage layouts see identical arithmetic.
//! Accumulation is done in `f64` and rounded once to `f32`.

/// Dot product of two equal-length `f32` slices accumulated in `f64`.
#[inline]
pub(crate) fn dot(w: &[f32], x: &[f32]) -> f64 {
    debug_assert_eq!(w.len(), x.len());
    let mut acc = [0f64; 8];
    let wc = w.chunks_exact(8);
    let xc = x.chunks_exact(8);
    let (wr, xr) = (wc.remainder(), xc.remainder());
    for (a, b) in wc.zip(xc) {
        for k in 0..8 {
            acc[k] += f64::from(a[k]) * f64::from(b[k]);
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (a, b) in wr.iter().zip(xr) {
        s += f64::from(*a) * f64::from(*b);
    }
    s
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    let x = f64::from(x);
    (1.0 / (1.0 + (-x).exp())) as f32
}

#[inline]
pub(crate) fn relu_in_place(v: &mut [f32]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// The four grid cells around a continuous point and their bilinear weights.
///
/// Cell `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTaps {
    pub cells: [(i64, i64); 4],
    pub weights: [f64; 4],
}

pub(crate) fn bilinear_taps(row: f64, col: f64) -> Option<BilinearTaps> {
    if !row.is_finite() || !col.is_finite() {
        return None;
    }
    // Far outside any grid; avoids i64 saturation surprises.
    if row.abs() > 1e9 || col.abs() > 1e9 {
        return None;
    }
    let y = row - 0.5;
    let x = col - 0.5;
    let y0 = y.floor();
    let x0 = x.floor();
    let ty = y - y0;
    let tx = x - x0;
    let (i0, j0) = (y0 as i64, x0 as i64);
    Some(BilinearTaps {
        cells: [(i0, j0), (i0, j0 + 1), (i0 + 1, j0), (i0 + 1, j0 + 1)],
        weights: [(1.0 - ty) * (1.0 - tx), (1.0 - ty) * tx, ty * (1.0 - tx), ty * tx],
    })
}

/// Adds `scale * bilinear(point)` into `acc`. Missing cells (out of bounds)
/// contribute the zero vector.
#[inline]
pub(crate) fn blend_into<'a, F>(taps: &BilinearTaps, scale: f64, fetch: F, acc: &mut [f64])
where
    F: Fn(i64, i64) -> Option<&'a [f32]>,
{
    for (&(i, j), &w) in taps.cells.iter().zip(&taps.weights) {
        if w == 0.0 {
            continue;
        }
        if let Some(feat) = fetch(i, j) {
            let w = w * scale;
            for (a, &v) in acc.iter_mut().zip(feat) {
                *a += w * f64::from(v);
            }
        }
    }
}

/// Bilinear sample of a feature field given by `fetch`, written to `out`.
pub(crate) fn bilinear<'a, F>(row: f64, col: f64, fetch: F, out: &mut [f32])
where
    F: Fn(i64, i64) -> Option<&'a [f32]>,
{
    let mut acc = vec![0f64; out.len()];
    if let Some(taps) = bilinear_taps(row, col) {
        blend_into(&taps, 1.0, fetch, &mut acc);
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
}

/// Row/column offsets of the nine 3x3 taps, row-major.
pub(crate) fn tap_offsets(dilation: i64) -> [(i64, i64); 9] {
    let mut out = [(0, 0); 9];
    for (t, o) in out.iter_mut().enumerate() {
        let ky = (t / 3) as i64 - 1;
        let kx = (t % 3) as i64 - 1;
        *o = (ky * dilation, kx * dilation);
    }
    out
}

/// Gathers a 3x3 neighborhood into `patch`, laid out `[tap][channel]`.
/// Out-of-bounds taps are the zero padding feature.
pub(crate) fn gather_patch<'a, F>(fetch: F, row: i64, col: i64, dilation: i64, patch: &mut [f32])
where
    F: Fn(i64, i64) -> Option<&'a [f32]>,
{
    let f_in = patch.len() / 9;
    for (t, (dy, dx)) in tap_offsets(dilation).into_iter().enumerate() {
        let dst = &mut patch[t * f_in..(t + 1) * f_in];
        match fetch(row + dy, col + dx) {
            Some(feat) => dst.copy_from_slice(feat),
            None => dst.fill(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_is_exact_on_small_integers() {
        let w: Vec<f32> = (0..37).map(|i| (i % 7) as f32 - 3.0).collect();
        let x: Vec<f32> = (0..37).map(|i| (i % 5) as f32 - 2.0).collect();
        let naive: f32 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_eq!(dot(&w, &x) as f32, naive);
    }

    #[test]
    fn taps_at_cell_center_put_all_weight_on_that_cell() {
        let t = bilinear_taps(3.5, 1.5).unwrap();
        assert_eq!(t.cells[0], (3, 1));
        assert_eq!(t.weights, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_points_have_no_taps() {
        assert!(bilinear_taps(f64::NAN, 0.0).is_none());
        assert!(bilinear_taps(0.0, f64::INFINITY).is_none());
    }

    #[test]
    fn sigmoid_midpoint() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(50.0) <= 1.0 && sigmoid(-50.0) >= 0.0);
    }
}
