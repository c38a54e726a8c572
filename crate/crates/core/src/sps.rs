//! Structure-preserving sparse feature maps.
//!
//! An [`SpsMap`] stores the features of an `[N_R, H, W]` grid as three
//! parts: an `N_A x F` matrix of active features, an `N_P x F` matrix of
//! passive features without duplicates, and a dense index grid holding, per
//! cell, the index of the feature it uses. Index values `< N_A` point at
//! active rows; values `>= N_A` point at passive row `value - N_A`. Cells
//! outside the grid read the zero padding feature.
//!
//! Every operation returns a new map; inputs are never mutated.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{ensure, Error, Result};
use crate::kernels;
use crate::params::Mlp;
use crate::tensor::DenseGrid;

/// Row-major `rows x cols` matrix of features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(cols >= 1, "feature matrices need at least one column");
        ensure!(
            data.len() == rows * cols,
            "feature matrix has {} values, expected {rows}x{cols}",
            data.len()
        );
        ensure!(data.iter().all(|v| v.is_finite()), "features must be finite");
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub(crate) fn from_rows_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Applies `f(row_index, input, output)` to every row.
    pub fn map_rows(&self, out_cols: usize, mut f: impl FnMut(usize, &[f32], &mut [f32])) -> FeatureMatrix {
        let mut out = FeatureMatrix::zeros(self.rows, out_cols);
        for i in 0..self.rows {
            f(i, self.row(i), out.row_mut(i));
        }
        out
    }
}

/// A cell of an `[N_R, H, W]` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    pub roi: usize,
    pub row: usize,
    pub col: usize,
}

/// Per-cell refinement scores in `[0, 1]` on an `[N_R, H, W]` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementScores {
    n_rois: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl RefinementScores {
    pub fn new(n_rois: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        ensure!(
            values.len() == n_rois * height * width,
            "score grid has {} values, expected {n_rois}x{height}x{width}",
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "refinement scores must be finite and lie in [0, 1]"
        );
        Ok(Self { n_rois, height, width, values })
    }

    /// Scores from raw refinement logits via the logistic sigmoid.
    pub fn from_logits(n_rois: usize, height: usize, width: usize, logits: &[f32]) -> Result<Self> {
        Self::new(n_rois, height, width, logits.iter().map(|&x| kernels::sigmoid(x)).collect())
    }

    pub fn layout(&self) -> (usize, usize, usize) {
        (self.n_rois, self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Flat cell indices of the `min(k, cells)` highest scores, ordered by
    /// descending score with ties broken by ascending flat index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| match self.values[b].total_cmp(&self.values[a]) {
            Ordering::Equal => a.cmp(&b),
            o => o,
        });
        order.truncate(k.min(self.values.len()));
        order
    }
}

/// Which invariant an [`SpsMap`] violates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InvariantViolation {
    Shape(String),
    IndexRange { cell: CellId, value: u32, limit: usize },
    ActiveUniqueness { active: usize, occurrences: usize },
    OrphanPassive { passive: usize },
    StorageBound { stored: usize, cells: usize },
}

impl InvariantViolation {
    pub fn name(&self) -> &'static str {
        match self {
            InvariantViolation::Shape(_) => "shape consistency",
            InvariantViolation::IndexRange { .. } => "index range",
            InvariantViolation::ActiveUniqueness { .. } => "active uniqueness",
            InvariantViolation::OrphanPassive { .. } => "no orphan passives",
            InvariantViolation::StorageBound { .. } => "storage bound",
        }
    }
}

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violated: ", self.name())?;
        match self {
            InvariantViolation::Shape(m) => write!(f, "{m}"),
            InvariantViolation::IndexRange { cell, value, limit } => write!(
                f,
                "cell ({}, {}, {}) holds index {value}, limit {limit}",
                cell.roi, cell.row, cell.col
            ),
            InvariantViolation::ActiveUniqueness { active, occurrences } => {
                write!(f, "active feature {active} referenced {occurrences} times")
            }
            InvariantViolation::OrphanPassive { passive } => {
                write!(f, "passive feature {passive} is never referenced")
            }
            InvariantViolation::StorageBound { stored, cells } => {
                write!(f, "{stored} stored rows exceed {cells} cells")
            }
        }
    }
}

impl std::error::Error for InvariantViolation {}

/// Structure-preserving sparse feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsMap {
    n_rois: usize,
    height: usize,
    width: usize,
    active: FeatureMatrix,
    passive: FeatureMatrix,
    index: Vec<u32>,
}

impl SpsMap {
    /// Assembles a map from raw parts and validates every invariant.
    pub fn from_parts(
        n_rois: usize,
        height: usize,
        width: usize,
        active: FeatureMatrix,
        passive: FeatureMatrix,
        index: Vec<u32>,
    ) -> Result<Self> {
        let map = Self::from_parts_unchecked(n_rois, height, width, active, passive, index);
        map.validate().map_err(|v| Error::invalid(v.to_string()))?;
        Ok(map)
    }

    /// Assembles a map without validation. Used by tests and the fault
    /// injection hook of the verifier to build deliberately broken maps.
    #[doc(hidden)]
    pub fn from_parts_unchecked(
        n_rois: usize,
        height: usize,
        width: usize,
        active: FeatureMatrix,
        passive: FeatureMatrix,
        index: Vec<u32>,
    ) -> Self {
        Self { n_rois, height, width, active, passive, index }
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_cells(&self) -> usize {
        self.n_rois * self.height * self.width
    }

    /// Feature size `F`.
    pub fn features(&self) -> usize {
        self.active.cols
    }

    pub fn n_active(&self) -> usize {
        self.active.rows
    }

    pub fn n_passive(&self) -> usize {
        self.passive.rows
    }

    pub fn active(&self) -> &FeatureMatrix {
        &self.active
    }

    pub fn passive(&self) -> &FeatureMatrix {
        &self.passive
    }

    /// Index grid, flat `[roi][row][col]`.
    pub fn index(&self) -> &[u32] {
        &self.index
    }

    pub fn flat(&self, cell: CellId) -> usize {
        (cell.roi * self.height + cell.row) * self.width + cell.col
    }

    pub fn cell_of(&self, flat: usize) -> CellId {
        let hw = self.height * self.width;
        CellId { roi: flat / hw, row: (flat % hw) / self.width, col: flat % self.width }
    }

    /// Feature row for an index value.
    #[inline]
    pub fn feature(&self, value: u32) -> &[f32] {
        let v = value as usize;
        if v < self.active.rows {
            self.active.row(v)
        } else {
            self.passive.row(v - self.active.rows)
        }
    }

    /// Feature at a possibly out-of-bounds cell; `None` means padding.
    #[inline]
    pub fn lookup(&self, roi: usize, row: i64, col: i64) -> Option<&[f32]> {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            return None;
        }
        let flat = (roi * self.height + row as usize) * self.width + col as usize;
        Some(self.feature(self.index[flat]))
    }

    /// Cell of every active row, in row order.
    pub fn active_cells(&self) -> Vec<CellId> {
        let mut cells = vec![CellId { roi: 0, row: 0, col: 0 }; self.active.rows];
        for (flat, &v) in self.index.iter().enumerate() {
            if (v as usize) < self.active.rows {
                cells[v as usize] = self.cell_of(flat);
            }
        }
        cells
    }

    /// Per-cell flag: does the cell hold an active feature.
    pub fn active_mask(&self) -> Vec<bool> {
        self.index.iter().map(|&v| (v as usize) < self.active.rows).collect()
    }

    /// Checks index range, active uniqueness, passive references and the
    /// storage bound.
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let cells = self.n_cells();
        if self.index.len() != cells {
            return Err(InvariantViolation::Shape(format!(
                "index grid has {} entries for {} cells",
                self.index.len(),
                cells
            )));
        }
        if self.active.cols != self.passive.cols {
            return Err(InvariantViolation::Shape(format!(
                "active rows have {} features, passive rows {}",
                self.active.cols, self.passive.cols
            )));
        }
        let (na, np) = (self.active.rows, self.passive.rows);
        let limit = na + np;
        let mut counts = vec![0usize; limit];
        for (flat, &v) in self.index.iter().enumerate() {
            if v as usize >= limit {
                return Err(InvariantViolation::IndexRange { cell: self.cell_of(flat), value: v, limit });
            }
            counts[v as usize] += 1;
        }
        if let Some((a, &c)) = counts[..na].iter().enumerate().find(|(_, &c)| c != 1) {
            return Err(InvariantViolation::ActiveUniqueness { active: a, occurrences: c });
        }
        if let Some(p) = counts[na..].iter().position(|&c| c == 0) {
            return Err(InvariantViolation::OrphanPassive { passive: p });
        }
        if limit > cells {
            return Err(InvariantViolation::StorageBound { stored: limit, cells });
        }
        Ok(())
    }

    fn check_scores(&self, scores: &RefinementScores) -> Result<()> {
        ensure!(
            scores.layout() == (self.n_rois, self.height, self.width),
            "score layout {:?} does not match grid {:?}",
            scores.layout(),
            (self.n_rois, self.height, self.width)
        );
        Ok(())
    }

    /// Partitions a dense grid: the `min(K, cells)` highest-scoring cells
    /// become active (rows ordered by descending score, then flat index);
    /// every other cell gets its own passive row in flat order.
    pub fn build_from_dense(dense: &DenseGrid, scores: &RefinementScores, k: usize) -> Result<Self> {
        ensure!(
            scores.layout() == (dense.n_rois(), dense.height(), dense.width()),
            "score layout {:?} does not match dense grid {:?}",
            scores.layout(),
            (dense.n_rois(), dense.height(), dense.width())
        );
        let cells = dense.n_cells();
        let f = dense.channels();
        let selected = scores.top_k(k);
        let na = selected.len();
        let mut index = vec![u32::MAX; cells];
        let mut active = Vec::with_capacity(na * f);
        for (a, &flat) in selected.iter().enumerate() {
            index[flat] = a as u32;
            active.extend_from_slice(dense.cell_flat(flat));
        }
        let mut passive = Vec::with_capacity((cells - na) * f);
        let mut next = na as u32;
        for (flat, slot) in index.iter_mut().enumerate() {
            if *slot == u32::MAX {
                *slot = next;
                next += 1;
                passive.extend_from_slice(dense.cell_flat(flat));
            }
        }
        Ok(Self {
            n_rois: dense.n_rois(),
            height: dense.height(),
            width: dense.width(),
            active: FeatureMatrix::from_rows_unchecked(na, f, active),
            passive: FeatureMatrix::from_rows_unchecked(cells - na, f, passive),
            index,
        })
    }

    /// Re-partitions by the same top-K rule. Each selected cell gets its own
    /// active row (a passive row shared with unselected cells is copied, not
    /// moved); unselected cells keep referencing a deduplicated passive row.
    pub fn update_partition(&self, scores: &RefinementScores, k: usize) -> Result<Self> {
        self.check_scores(scores)?;
        let f = self.features();
        let selected = scores.top_k(k);
        let na = selected.len();
        let mut index = vec![u32::MAX; self.index.len()];
        let mut active = Vec::with_capacity(na * f);
        for (a, &flat) in selected.iter().enumerate() {
            index[flat] = a as u32;
            active.extend_from_slice(self.feature(self.index[flat]));
        }
        // Old index value -> new passive slot, assigned in flat order.
        let mut remap: HashMap<u32, u32> = HashMap::new();
        let mut passive = Vec::new();
        for (flat, slot) in index.iter_mut().enumerate() {
            if *slot != u32::MAX {
                continue;
            }
            let old = self.index[flat];
            let next = remap.len() as u32;
            let p = *remap.entry(old).or_insert_with(|| {
                passive.extend_from_slice(self.feature(old));
                next
            });
            *slot = na as u32 + p;
        }
        let np = remap.len();
        Ok(Self {
            n_rois: self.n_rois,
            height: self.height,
            width: self.width,
            active: FeatureMatrix::from_rows_unchecked(na, f, active),
            passive: FeatureMatrix::from_rows_unchecked(np, f, passive),
            index,
        })
    }

    /// Doubles the grid. Active parent `a` yields children `4a + c`
    /// (`c = 2 * drow + dcol`) computed by `child_mlps[c]`; passive parents
    /// hand their index to all 4 children.
    pub fn upsample_split(&self, child_mlps: &[Mlp; 4]) -> Result<Self> {
        let f = self.features();
        for (c, m) in child_mlps.iter().enumerate() {
            ensure!(
                m.in_dim() == f && m.out_dim() == f,
                "child MLP {c} maps {}->{}, expected {f}->{f}",
                m.in_dim(),
                m.out_dim()
            );
        }
        let na = self.n_active();
        let mut active = Vec::with_capacity(4 * na * f);
        for a in 0..na {
            let parent = self.active.row(a);
            for m in child_mlps {
                active.extend(m.forward(parent));
            }
        }
        let (h, w) = (self.height * 2, self.width * 2);
        let mut index = vec![0u32; self.n_rois * h * w];
        let na_new = (4 * na) as u32;
        for r in 0..self.n_rois {
            for i in 0..h {
                for j in 0..w {
                    let parent = self.index[(r * self.height + i / 2) * self.width + j / 2];
                    let child = (2 * (i % 2) + (j % 2)) as u32;
                    index[(r * h + i) * w + j] = if (parent as usize) < na {
                        4 * parent + child
                    } else {
                        parent - na as u32 + na_new
                    };
                }
            }
        }
        Ok(Self {
            n_rois: self.n_rois,
            height: h,
            width: w,
            active: FeatureMatrix::from_rows_unchecked(4 * na, f, active),
            passive: self.passive.clone(),
            index,
        })
    }

    fn check_cell(&self, cell: CellId) -> Result<()> {
        ensure!(
            cell.roi < self.n_rois && cell.row < self.height && cell.col < self.width,
            "cell ({}, {}, {}) outside grid [{}, {}, {}]",
            cell.roi,
            cell.row,
            cell.col,
            self.n_rois,
            self.height,
            self.width
        );
        Ok(())
    }

    /// Features at `cell + offset` for every offset, zero padding outside
    /// the grid; one row per offset.
    pub fn gather_neighborhood(&self, cell: CellId, offsets: &[(i64, i64)]) -> Result<FeatureMatrix> {
        self.check_cell(cell)?;
        let f = self.features();
        let mut out = FeatureMatrix::zeros(offsets.len(), f);
        for (k, &(dr, dc)) in offsets.iter().enumerate() {
            if let Some(feat) = self.lookup(cell.roi, cell.row as i64 + dr, cell.col as i64 + dc) {
                out.row_mut(k).copy_from_slice(feat);
            }
        }
        Ok(out)
    }

    /// Bilinear blend of the referenced features around continuous
    /// `(row, col)`; cell centers sit at half-integers.
    pub fn gather_bilinear(&self, roi: usize, row: f64, col: f64) -> Result<Vec<f32>> {
        ensure!(roi < self.n_rois, "roi {roi} out of range ({} rois)", self.n_rois);
        let mut out = vec![0.0; self.features()];
        kernels::bilinear(row, col, |i, j| self.lookup(roi, i, j), &mut out);
        Ok(out)
    }

    /// Replaces the active matrix; index grid and passive matrix are kept.
    pub fn scatter_update(&self, new_active: FeatureMatrix) -> Result<Self> {
        ensure!(
            new_active.rows == self.n_active() && new_active.cols == self.features(),
            "scatter of {}x{} into {}x{} active matrix",
            new_active.rows,
            new_active.cols,
            self.n_active(),
            self.features()
        );
        ensure!(new_active.data.iter().all(|v| v.is_finite()), "scattered features must be finite");
        Ok(Self { active: new_active, ..self.clone_structure() })
    }

    /// Replaces both feature matrices (feature size may change).
    pub(crate) fn replace_features(&self, active: FeatureMatrix, passive: FeatureMatrix) -> Self {
        debug_assert_eq!(active.rows, self.n_active());
        debug_assert_eq!(passive.rows, self.n_passive());
        Self { active, passive, ..self.clone_structure() }
    }

    fn clone_structure(&self) -> Self {
        Self {
            n_rois: self.n_rois,
            height: self.height,
            width: self.width,
            active: FeatureMatrix::zeros(0, 1),
            passive: self.passive.clone(),
            index: self.index.clone(),
        }
    }

    /// Materializes `[N_R, F, H, W]`; duplicated passive references expand
    /// into copies.
    pub fn to_dense(&self) -> DenseGrid {
        let mut data = Vec::with_capacity(self.n_cells() * self.features());
        for &v in &self.index {
            data.extend_from_slice(self.feature(v));
        }
        DenseGrid::from_channels_last(self.n_rois, self.features(), self.height, self.width, data)
            .expect("SpsMap shape always yields a valid dense grid")
    }

    /// Writes the debug text format (see `docs/formats.md`).
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sps-map v1")?;
        writeln!(w, "n_rois {}", self.n_rois)?;
        writeln!(w, "height {}", self.height)?;
        writeln!(w, "width {}", self.width)?;
        writeln!(w, "features {}", self.features())?;
        writeln!(w, "n_active {}", self.n_active())?;
        writeln!(w, "n_passive {}", self.n_passive())?;
        for r in 0..self.n_rois {
            writeln!(w, "index roi {r}")?;
            for i in 0..self.height {
                let start = (r * self.height + i) * self.width;
                write_csv(&mut w, &self.index[start..start + self.width])?;
            }
        }
        writeln!(w, "active")?;
        for a in 0..self.n_active() {
            write_csv(&mut w, self.active.row(a))?;
        }
        writeln!(w, "passive")?;
        for p in 0..self.n_passive() {
            write_csv(&mut w, self.passive.row(p))?;
        }
        writeln!(w, "end")
    }

    /// Reads the debug text format and validates the result.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().map(|(n, l)| (n + 1, l));
        let mut next = move || -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((n, Err(e))) => Err(Error::parse(Some(n), e.to_string())),
                None => Err(Error::parse(None, "unexpected end of file")),
            }
        };
        let (n, header) = next()?;
        if header.trim() != "sps-map v1" {
            return Err(Error::parse(Some(n), format!("expected 'sps-map v1', found '{header}'")));
        }
        let mut field = |name: &str| -> Result<usize> {
            let (n, l) = next()?;
            let mut parts = l.split_whitespace();
            match (parts.next(), parts.next().map(str::parse::<usize>)) {
                (Some(k), Some(Ok(v))) if k == name => Ok(v),
                _ => Err(Error::parse(Some(n), format!("expected '{name} <int>', found '{l}'"))),
            }
        };
        let n_rois = field("n_rois")?;
        let height = field("height")?;
        let width = field("width")?;
        let features = field("features")?;
        let na = field("n_active")?;
        let np = field("n_passive")?;
        let mut index = Vec::with_capacity(n_rois * height * width);
        for r in 0..n_rois {
            let (n, l) = next()?;
            if l.trim() != format!("index roi {r}") {
                return Err(Error::parse(Some(n), format!("expected 'index roi {r}', found '{l}'")));
            }
            for _ in 0..height {
                let (n, l) = next()?;
                index.extend(parse_csv::<u32>(n, &l, width)?);
            }
        }
        let mut matrix = |name: &str, rows: usize| -> Result<FeatureMatrix> {
            let (n, l) = next()?;
            if l.trim() != name {
                return Err(Error::parse(Some(n), format!("expected '{name}', found '{l}'")));
            }
            let mut data = Vec::with_capacity(rows * features);
            for _ in 0..rows {
                let (n, l) = next()?;
                data.extend(parse_csv::<f32>(n, &l, features)?);
            }
            FeatureMatrix::new(rows, features, data)
        };
        let active = matrix("active", na)?;
        let passive = matrix("passive", np)?;
        let (n, l) = next()?;
        if l.trim() != "end" {
            return Err(Error::parse(Some(n), format!("expected 'end', found '{l}'")));
        }
        Self::from_parts(n_rois, height, width, active, passive, index)
    }
}

fn write_csv<W: Write, T: fmt::Display>(w: &mut W, values: &[T]) -> std::io::Result<()> {
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            w.write_all(b",")?;
        }
        write!(w, "{v}")?;
    }
    w.write_all(b"\n")
}

fn parse_csv<T: std::str::FromStr>(line_no: usize, line: &str, expected: usize) -> Result<Vec<T>> {
    let vals = line
        .trim()
        .split(',')
        .map(|t| t.trim().parse::<T>())
        .collect::<Result<Vec<T>, _>>()
        .map_err(|_| Error::parse(Some(line_no), format!("malformed value list '{line}'")))?;
    if vals.len() != expected {
        return Err(Error::parse(Some(line_no), format!("expected {expected} values, found {}", vals.len())));
    }
    Ok(vals)
}
