//! Analytic 2D shapes used as continuous ground-truth masks.

use serde::{Deserialize, Serialize};

/// Anything that can answer "is image point `(x, y)` foreground".
pub trait MaskSampler {
    fn contains(&self, x: f64, y: f64) -> bool;
}

impl<T: MaskSampler + ?Sized> MaskSampler for &T {
    fn contains(&self, x: f64, y: f64) -> bool {
        (**self).contains(x, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Rotated ellipse; `angle` in radians.
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    /// Simple polygon, even-odd fill rule.
    Polygon { vertices: Vec<[f64; 2]> },
    /// Union of several shapes.
    Blob { parts: Vec<Shape> },
}

impl MaskSampler for Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let [xi, yi] = vertices[i];
                    let [xj, yj] = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
            Shape::Blob { parts } => parts.iter().any(|p| p.contains(x, y)),
        }
    }
}

impl Shape {
    /// Pixel raster: pixel `(row, col)` is foreground iff its center is inside.
    pub fn rasterize(&self, height: usize, width: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                out.push(self.contains(c as f64 + 0.5, r as f64 + 0.5));
            }
        }
        out
    }
}
