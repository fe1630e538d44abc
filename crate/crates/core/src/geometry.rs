//! Pixel grid, parallel-beam parametrization and ray tracing.
//!
//! The imaged domain is the unit square `[0, 1]²`, split into `N × N` square
//! pixels. Pixel `i` sits at row `i / N` (counted upwards from `x₂ = 0`) and
//! column `i % N` (counted rightwards from `x₁ = 0`).
//!
//! A ray is the infinite line at signed distance `s` from the domain center
//! `(0.5, 0.5)` whose direction makes the angle `φ` with the positive
//! horizontal axis. Its unit normal is `(-sin φ, cos φ)`, so `s > 0` moves the
//! line "left" of its direction of travel. The lines `(φ, s)` and
//! `(φ + 180°, -s)` coincide.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking beam admissibility.
const ADMISSIBLE_EPS: f64 = 1e-12;

/// Relative drop tolerance for ray segments, in units of the pixel width.
const SEGMENT_DROP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGrid {
    side: usize,
}

impl ImageGrid {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::config("grid.n", "pixels per edge must be positive"));
        }
        Ok(Self { side })
    }

    /// Pixels per edge, `N`.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Total pixel count, `n = N²`.
    pub fn pixel_count(&self) -> usize {
        self.side * self.side
    }

    pub fn pixel_width(&self) -> f64 {
        1.0 / self.side as f64
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.side && col < self.side);
        row * self.side + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.side, index % self.side)
    }

    /// Center of pixel `index` as `[x₁, x₂]`.
    pub fn pixel_center(&self, index: usize) -> [f64; 2] {
        let (row, col) = self.row_col(index);
        let h = self.pixel_width();
        [(col as f64 + 0.5) * h, (row as f64 + 0.5) * h]
    }

    /// Pixel containing `point`, or `None` outside the closed unit square.
    pub fn locate(&self, point: [f64; 2]) -> Option<usize> {
        if !(0.0..=1.0).contains(&point[0]) || !(0.0..=1.0).contains(&point[1]) {
            return None;
        }
        let n = self.side as f64;
        let col = ((point[0] * n).floor() as usize).min(self.side - 1);
        let row = ((point[1] * n).floor() as usize).min(self.side - 1);
        Some(self.index(row, col))
    }
}

/// A parallel beam of `detectors` equally spaced rays spanning `width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSpec {
    pub detectors: usize,
    pub width: f64,
}

impl BeamSpec {
    pub fn new(detectors: usize, width: f64) -> Result<Self> {
        if detectors == 0 {
            return Err(Error::config("beam.detectors", "must be positive"));
        }
        if !(width > 0.0 && width <= 1.0 + ADMISSIBLE_EPS) {
            return Err(Error::InadmissibleDesign {
                offset: 0.0,
                width,
            });
        }
        Ok(Self { detectors, width })
    }

    /// Signed ray distances from the domain center for a beam centered at
    /// lateral offset `offset`; ascending, spacing `width / detectors`.
    pub fn ray_offsets(&self, offset: f64) -> Vec<f64> {
        let spacing = self.width / self.detectors as f64;
        (0..self.detectors)
            .map(|i| offset - 0.5 * self.width + (i as f64 + 0.5) * spacing)
            .collect()
    }

    /// Largest admissible `|offset|` for this beam width.
    pub fn max_offset(&self) -> f64 {
        (0.5 - 0.5 * self.width).max(0.0)
    }

    pub fn is_admissible(&self, point: &DesignPoint) -> bool {
        point.offset.abs() + 0.5 * self.width <= 0.5 + ADMISSIBLE_EPS
    }
}

/// One candidate projection: beam angle in degrees and lateral offset of the
/// beam bisector from the domain center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub angle_deg: f64,
    pub offset: f64,
}

impl DesignPoint {
    pub fn new(angle_deg: f64, offset: f64) -> Self {
        Self { angle_deg, offset }
    }
}

/// Axis-aligned rectangle or disk in domain coordinates. A pixel belongs to
/// a shape when its center lies strictly inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Rect { lo: [f64; 2], hi: [f64; 2] },
    Disk { center: [f64; 2], radius: f64 },
}

impl Shape {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Shape::Rect { lo, hi } => lo[0] < p[0] && p[0] < hi[0] && lo[1] < p[1] && p[1] < hi[1],
            Shape::Disk { center, radius } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                dx * dx + dy * dy < radius * radius
            }
        }
    }

    pub fn rasterize(&self, grid: &ImageGrid) -> Vec<bool> {
        (0..grid.pixel_count())
            .map(|i| self.contains(grid.pixel_center(i)))
            .collect()
    }
}

/// Pixels that X-rays cannot pass through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObstructionMask {
    blocked: Vec<bool>,
}

impl ObstructionMask {
    pub fn none(grid: &ImageGrid) -> Self {
        Self {
            blocked: vec![false; grid.pixel_count()],
        }
    }

    pub fn from_shape(grid: &ImageGrid, shape: &Shape) -> Self {
        Self {
            blocked: shape.rasterize(grid),
        }
    }

    pub fn from_mask(grid: &ImageGrid, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != grid.pixel_count() {
            return Err(Error::DimensionMismatch {
                what: "obstruction mask",
                expected: grid.pixel_count(),
                found: blocked.len(),
            });
        }
        Ok(Self { blocked })
    }

    pub fn is_blocked(&self, pixel: usize) -> bool {
        self.blocked[pixel]
    }

    pub fn blocked(&self) -> &[bool] {
        &self.blocked
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.blocked.iter().any(|&b| b)
    }

    /// True when the ray meets a blocked pixel with positive length.
    pub fn blocks(&self, row: &SparseRow) -> bool {
        row.indices.iter().any(|&j| self.blocked[j])
    }
}

/// Sparse row of ray–pixel intersection lengths, sorted by pixel index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.iter().map(|(j, v)| v * x[j]).sum()
    }

    /// Inner product of two sorted sparse rows.
    pub fn dot_sparse(&self, other: &SparseRow) -> f64 {
        let (mut a, mut b, mut acc) = (0, 0, 0.0);
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[a] * other.values[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }
}

/// Reduce `(φ, s)` to the equivalent line with `φ ∈ [-90, 90)`.
fn canonical_line(angle_deg: f64, s: f64) -> (f64, f64) {
    let mut phi = (angle_deg + 90.0).rem_euclid(360.0) - 90.0;
    let mut s = s;
    if phi >= 90.0 {
        phi -= 180.0;
        s = -s;
    }
    (phi, s)
}

/// `(cos φ, sin φ)` with exact values at multiples of 45°.
fn direction(angle_deg: f64) -> (f64, f64) {
    match angle_deg {
        0.0 => (1.0, 0.0),
        -90.0 => (0.0, -1.0),
        45.0 => (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
        -45.0 => (std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
        a => {
            let r = a.to_radians();
            (r.cos(), r.sin())
        }
    }
}

/// Exact intersection lengths of the line `(angle_deg, s)` with every pixel
/// of `grid` (Siddon-style traversal of the grid-line crossings).
pub fn trace_ray(grid: &ImageGrid, angle_deg: f64, s: f64) -> SparseRow {
    let (phi, s) = canonical_line(angle_deg, s);
    let (dx, dy) = direction(phi);
    let p = [0.5 - s * dy, 0.5 + s * dx];
    let d = [dx, dy];

    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for axis in 0..2 {
        if d[axis] == 0.0 {
            if p[axis] < 0.0 || p[axis] > 1.0 {
                return SparseRow::default();
            }
        } else {
            let ta = -p[axis] / d[axis];
            let tb = (1.0 - p[axis]) / d[axis];
            t_lo = t_lo.max(ta.min(tb));
            t_hi = t_hi.min(ta.max(tb));
        }
    }
    let h = grid.pixel_width();
    let drop = SEGMENT_DROP * h;
    let span = t_hi - t_lo;
    if span.is_nan() || span <= drop {
        return SparseRow::default();
    }

    let side = grid.side();
    let mut ts = Vec::with_capacity(2 * side + 4);
    ts.push(t_lo);
    ts.push(t_hi);
    for axis in 0..2 {
        if d[axis] == 0.0 {
            continue;
        }
        for k in 0..=side {
            let t = (k as f64 * h - p[axis]) / d[axis];
            if t > t_lo && t < t_hi {
                ts.push(t);
            }
        }
    }
    ts.sort_by(f64::total_cmp);

    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(ts.len());
    for w in ts.windows(2) {
        let len = w[1] - w[0];
        if len <= drop {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let mid = [p[0] + tm * d[0], p[1] + tm * d[1]];
        let col = ((mid[0] * side as f64).floor().max(0.0) as usize).min(side - 1);
        let row = ((mid[1] * side as f64).floor().max(0.0) as usize).min(side - 1);
        entries.push((grid.index(row, col), len));
    }
    entries.sort_by_key(|e| e.0);

    let mut out = SparseRow {
        indices: Vec::with_capacity(entries.len()),
        values: Vec::with_capacity(entries.len()),
    };
    for (j, len) in entries {
        if out.indices.last() == Some(&j) {
            *out.values.last_mut().unwrap() += len;
        } else {
            out.indices.push(j);
            out.values.push(len);
        }
    }
    out
}

/// Sparse `m_active × n` projection matrix of one parallel-beam design.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOperator {
    design: DesignPoint,
    pixel_count: usize,
    rows: Vec<SparseRow>,
    active_rays: Vec<usize>,
    nominal_rays: usize,
}

impl ProjectionOperator {
    /// Build from explicit rows; all rays count as active.
    pub fn from_rows(design: DesignPoint, pixel_count: usize, rows: Vec<SparseRow>) -> Self {
        let m = rows.len();
        Self {
            design,
            pixel_count,
            rows,
            active_rays: (0..m).collect(),
            nominal_rays: m,
        }
    }

    /// Stack several operators into one "total" projection matrix.
    pub fn stack<'a>(ops: impl IntoIterator<Item = &'a ProjectionOperator>) -> Self {
        let mut rows = Vec::new();
        let mut pixel_count = 0;
        let mut design = DesignPoint::new(0.0, 0.0);
        for (k, op) in ops.into_iter().enumerate() {
            if k == 0 {
                design = op.design;
            }
            pixel_count = op.pixel_count;
            rows.extend(op.rows.iter().cloned());
        }
        Self::from_rows(design, pixel_count, rows)
    }

    pub fn design(&self) -> DesignPoint {
        self.design
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn m_active(&self) -> usize {
        self.rows.len()
    }

    pub fn nominal_rays(&self) -> usize {
        self.nominal_rays
    }

    /// Indices of the unblocked rays among the nominal ones.
    pub fn active_rays(&self) -> &[usize] {
        &self.active_rays
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows.len(), self.pixel_count);
        for (i, row) in self.rows.iter().enumerate() {
            for (j, v) in row.iter() {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// `R x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let xs = x.as_slice();
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.dot(xs)))
    }

    /// `Rᵀ y`.
    pub fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.pixel_count);
        for (row, &yi) in self.rows.iter().zip(y.iter()) {
            for (j, v) in row.iter() {
                out[j] += v * yi;
            }
        }
        out
    }

    /// `M Rᵀ` for a symmetric `n × n` matrix `M`, returned as `n × m`.
    ///
    /// Column `i` is a combination of columns of `M`, which keeps every
    /// access contiguous in nalgebra's column-major storage.
    pub fn sym_times_transpose(&self, sym: &DMatrix<f64>) -> DMatrix<f64> {
        let n = sym.nrows();
        let mut out = DMatrix::zeros(n, self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            let mut col = out.column_mut(i);
            let dst = col.as_mut_slice();
            for (j, v) in row.iter() {
                let src = &sym.as_slice()[j * n..(j + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }

    /// `R G` for a dense `n × k` matrix `G`.
    pub fn times_dense(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let k = g.ncols();
        let mut out = DMatrix::zeros(self.rows.len(), k);
        for c in 0..k {
            let col = g.column(c);
            let col = col.as_slice();
            for (i, row) in self.rows.iter().enumerate() {
                out[(i, c)] = row.dot(col);
            }
        }
        out
    }

    /// `R Rᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.rows.len();
        let mut g = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = self.rows[i].dot_sparse(&self.rows[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }
}

/// Trace all rays of `beam` at design `point` and drop the blocked ones.
pub fn assemble_projection(
    grid: &ImageGrid,
    beam: &BeamSpec,
    point: DesignPoint,
    obstruction: &ObstructionMask,
) -> Result<ProjectionOperator> {
    if !beam.is_admissible(&point) {
        return Err(Error::InadmissibleDesign {
            offset: point.offset,
            width: beam.width,
        });
    }
    let mut rows = Vec::with_capacity(beam.detectors);
    let mut active = Vec::with_capacity(beam.detectors);
    for (i, s) in beam.ray_offsets(point.offset).into_iter().enumerate() {
        let row = trace_ray(grid, point.angle_deg, s);
        if obstruction.blocks(&row) {
            continue;
        }
        rows.push(row);
        active.push(i);
    }
    Ok(ProjectionOperator {
        design: point,
        pixel_count: grid.pixel_count(),
        rows,
        active_rays: active,
        nominal_rays: beam.detectors,
    })
}

/// 2-norm condition number of `R` on its row space.
pub fn condition_estimate(op: &ProjectionOperator) -> Result<f64> {
    if op.is_empty() {
        return Err(Error::EmptyOperator);
    }
    let eig = SymmetricEigen::new(op.gram());
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return Err(Error::EmptyOperator);
    }
    let cutoff = max * 1e-12 * op.m_active() as f64;
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&l| l > cutoff)
        .fold(f64::INFINITY, f64::min);
    Ok((max / min).sqrt())
}
