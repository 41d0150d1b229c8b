//! Pillarization of cropped clouds into bird's-eye-view grids, plus occupancy entropy.
//!
//! Cell `(i, j)` covers the `i`-th slice along box-frame x and the `j`-th slice
//! along y. Grids are stored cell-major: row `i * W + j`.

use std::fs;
use std::path::Path;

use crate::error::{DataError, TensorError};
use crate::scene::{ObjectClass, PointCloud};
use crate::tensor::DenseMatrix;

/// Height-histogram bins per cell.
pub const HIST_BINS: usize = 8;
/// Raw per-cell channels: `log(1+count)`, mean z, max z, then the histogram.
pub const RAW_CHANNELS: usize = 3 + HIST_BINS;

/// Index of the slice containing `v`; points on a shared boundary go to the lower index.
fn slice_index(v: f64, lo: f64, size: f64, n: usize) -> Option<usize> {
    if !(v >= lo) {
        return None;
    }
    let s = (v - lo) / size;
    let idx = if s <= 0.0 { 0 } else { (s.ceil() as usize).saturating_sub(1) };
    (idx < n && s <= n as f64).then_some(idx)
}

/// Grid resolution and the metric extent it covers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub h: usize,
    pub w: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
}

impl GridGeometry {
    pub fn for_class(class: ObjectClass, h: usize, w: usize) -> Self {
        let r = class.extended_range();
        Self {
            h,
            w,
            x_range: r[0],
            y_range: r[1],
            z_range: r[2],
        }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Meters per cell along x and y.
    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / self.h as f64,
            (self.y_range.1 - self.y_range.0) / self.w as f64,
        )
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (cx, cy) = self.cell_size();
        Some((
            slice_index(x, self.x_range.0, cx, self.h)?,
            slice_index(y, self.y_range.0, cy, self.w)?,
        ))
    }

    /// Continuous cell coordinates of a metric position; cell centers are integers.
    pub fn to_cell_coords(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.cell_size();
        ((x - self.x_range.0) / cx - 0.5, (y - self.y_range.0) / cy - 0.5)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let (cx, cy) = self.cell_size();
        (self.x_range.0 + (i as f64 + 0.5) * cx, self.y_range.0 + (j as f64 + 0.5) * cy)
    }

    pub fn hist_bin(&self, z: f64) -> usize {
        let size = (self.z_range.1 - self.z_range.0) / HIST_BINS as f64;
        slice_index(z, self.z_range.0, size, HIST_BINS).unwrap_or(if z < self.z_range.0 { 0 } else { HIST_BINS - 1 })
    }
}

/// Unprojected per-cell statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPillars {
    pub geometry: GridGeometry,
    pub counts: Vec<u32>,
    /// `H·W × RAW_CHANNELS`; all-zero rows for empty cells.
    pub raw: DenseMatrix,
}

impl RawPillars {
    pub fn occupancy(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    pub fn occupied_cells(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn total_points(&self) -> usize {
        self.counts.iter().map(|&c| c as usize).sum()
    }
}

/// Per-cell statistics of one list of points (already in canonical order).
fn cell_features(zs: &[f64], geom: &GridGeometry, out: &mut [f64]) {
    let n = zs.len() as f64;
    out[0] = n.ln_1p();
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for &z in zs {
        sum += z;
        max = max.max(z);
        out[3 + geom.hist_bin(z)] += 1.0;
    }
    out[1] = sum / n;
    out[2] = max;
    for b in &mut out[3..] {
        *b /= n;
    }
}

/// Bins points into cells and computes raw features.
///
/// Points in each cell are reduced in sorted coordinate order, so the result is
/// bitwise independent of input order. Points outside the grid are ignored.
pub fn pillarize_raw(cloud: &PointCloud, geom: &GridGeometry) -> RawPillars {
    let mut binned: Vec<(usize, [f64; 3])> = cloud
        .points
        .iter()
        .filter_map(|p| geom.cell_of(p[0], p[1]).map(|(i, j)| (i * geom.w + j, *p)))
        .collect();
    binned.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1[0].total_cmp(&b.1[0]))
            .then(a.1[1].total_cmp(&b.1[1]))
            .then(a.1[2].total_cmp(&b.1[2]))
    });
    let mut counts = vec![0u32; geom.cells()];
    let mut raw = DenseMatrix::zeros(geom.cells(), RAW_CHANNELS);
    let mut start = 0;
    let mut zs = Vec::new();
    while start < binned.len() {
        let cell = binned[start].0;
        let mut end = start;
        zs.clear();
        while end < binned.len() && binned[end].0 == cell {
            zs.push(binned[end].1[2]);
            end += 1;
        }
        counts[cell] = zs.len() as u32;
        cell_features(&zs, geom, raw.row_mut(cell));
        start = end;
    }
    RawPillars {
        geometry: *geom,
        counts,
        raw,
    }
}

/// Projected BEV features with occupancy.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub geometry: GridGeometry,
    pub occupancy: Vec<bool>,
    /// `H·W × C`.
    pub features: DenseMatrix,
}

impl BevGrid {
    /// Applies the `RAW_CHANNELS × C` projection to every cell.
    pub fn project(pillars: &RawPillars, proj: &DenseMatrix) -> Result<Self, TensorError> {
        Ok(Self {
            geometry: pillars.geometry,
            occupancy: pillars.occupancy(),
            features: pillars.raw.matmul(proj)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn occupied_cells(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    /// Header `H W C` on one line, then little-endian f32 features in cell-major order.
    pub fn write_dump(&self, path: &Path) -> Result<(), DataError> {
        let mut buf = format!("{} {} {}\n", self.geometry.h, self.geometry.w, self.channels()).into_bytes();
        for v in self.features.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| DataError::io(path, e))
    }
}

pub fn pillarize(cloud: &PointCloud, geom: &GridGeometry, proj: &DenseMatrix) -> Result<BevGrid, TensorError> {
    BevGrid::project(&pillarize_raw(cloud, geom), proj)
}

/// Binary entropy in bits; `H_b(0) = H_b(1) = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    term(p) + term(1.0 - p)
}

/// `H·W·[H_b(p) + p·H_fg]` bits for `occupied` of `H·W` cells.
pub fn occupancy_entropy(h: usize, w: usize, occupied: usize, fg_entropy_per_cell: f64) -> f64 {
    let cells = (h * w) as f64;
    if cells == 0.0 {
        return 0.0;
    }
    let p = occupied as f64 / cells;
    cells * (binary_entropy(p) + p * fg_entropy_per_cell)
}

pub fn bev_entropy(grid: &BevGrid, fg_entropy_per_cell: f64) -> f64 {
    occupancy_entropy(grid.geometry.h, grid.geometry.w, grid.occupied_cells(), fg_entropy_per_cell)
}

/// Mean Shannon entropy (bits) of the height histograms of occupied cells.
pub fn empirical_cell_entropy(pillars: &RawPillars) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (cell, &count) in pillars.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let hist = &pillars.raw.row(cell)[3..];
        total += hist.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.log2()).sum::<f64>();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Binary PGM (`P5`) of `values` in `[0, 1]`, scaled by 255 and rounded.
pub fn write_pgm(path: &Path, values: &[f64], h: usize, w: usize) -> Result<(), DataError> {
    if values.len() != h * w {
        return Err(DataError::Invalid(format!("{} values for a {h}x{w} image", values.len())));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf).map_err(|e| DataError::io(path, e))
}
