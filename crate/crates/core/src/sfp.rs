//! Foreground predictor: grouped-conv heatmap network, Gaussian targets, modulation, loss.

use rand::Rng;

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::bev::{BevGrid, GridGeometry};
use crate::error::TensorError;
use crate::params::{BoundParams, ParamSet};
use crate::scene::Box3D;
use crate::tensor::DenseMatrix;

/// Groups in both 3×3 convolutions.
pub const SFP_GROUPS: usize = 4;
/// Rendering cutoff in units of σ.
pub const GAUSSIAN_SUPPORT: f64 = 3.0;

/// Per-cell importance in `[0, 1]`, cell-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self {
            h,
            w,
            values: vec![v; h * w],
        }
    }

    /// From an `H·W × 1` column; values must already lie in `[0, 1]`.
    pub fn from_column(h: usize, w: usize, col: &DenseMatrix) -> Result<Self, TensorError> {
        if col.shape() != (h * w, 1) {
            return Err(TensorError::shape("heatmap", (h * w, 1), col.shape()));
        }
        if col.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TensorError::invalid("heatmap", "value outside [0, 1]"));
        }
        Ok(Self {
            h,
            w,
            values: col.data().to_vec(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }

    pub fn to_column(&self) -> DenseMatrix {
        DenseMatrix::from_vec(self.values.len(), 1, self.values.clone()).expect("length matches")
    }
}

pub fn conv1_geometry(h: usize, w: usize, c: usize) -> ConvGeometry {
    ConvGeometry {
        height: h,
        width: w,
        in_channels: 2 * c,
        out_channels: 2 * c,
        kernel: 3,
        groups: SFP_GROUPS,
    }
}

pub fn conv2_geometry(h: usize, w: usize, c: usize) -> ConvGeometry {
    ConvGeometry {
        height: h,
        width: w,
        in_channels: 2 * c,
        out_channels: c,
        kernel: 3,
        groups: SFP_GROUPS,
    }
}

/// Adds `sfp.*` parameters for `c` feature channels; biases start at zero.
/// Initial logit of the output layer: the heatmap starts near 0.1 everywhere.
pub const HEATMAP_PRIOR_LOGIT: f64 = -2.19;

pub fn init_params<R: Rng + ?Sized>(params: &mut ParamSet, c: usize, rng: &mut R) {
    for (name, g) in [("sfp.conv1", conv1_geometry(1, 1, c)), ("sfp.conv2", conv2_geometry(1, 1, c))] {
        let (rows, cols) = g.weight_shape();
        params.insert(format!("{name}.w"), DenseMatrix::uniform_fan_in(rows, cols, cols, rng));
        params.insert(format!("{name}.b"), DenseMatrix::zeros(1, g.out_channels));
    }
    params.insert("sfp.conv3.w", DenseMatrix::uniform_fan_in(c, 1, c, rng));
    params.insert("sfp.conv3.b", DenseMatrix::filled(1, 1, HEATMAP_PRIOR_LOGIT));
}

/// `x_bev` is `H·W × 2C` (template ‖ search); returns the `H·W × 1` heatmap node.
pub fn forward(tape: &mut Tape, p: &BoundParams, x_bev: Var, h: usize, w: usize) -> Result<Var, TensorError> {
    let (cells, c2) = tape.shape(x_bev);
    if cells != h * w || c2 % 2 != 0 {
        return Err(TensorError::shape("sfp", (h * w, c2), (cells, c2)));
    }
    let c = c2 / 2;
    let a = tape.conv2d(x_bev, p.get("sfp.conv1.w"), conv1_geometry(h, w, c))?;
    let a = tape.add_row(a, p.get("sfp.conv1.b"))?;
    let a = tape.relu(a)?;
    let b = tape.conv2d(a, p.get("sfp.conv2.w"), conv2_geometry(h, w, c))?;
    let b = tape.add_row(b, p.get("sfp.conv2.b"))?;
    let b = tape.relu(b)?;
    let logits = tape.matmul(b, p.get("sfp.conv3.w"))?;
    let logits = tape.add_row(logits, p.get("sfp.conv3.b"))?;
    tape.sigmoid(logits)
}

/// Heatmap of a template/search pair without recording gradients.
pub fn predict(params: &ParamSet, template: &BevGrid, search: &BevGrid) -> Result<Heatmap, TensorError> {
    let g = search.geometry;
    if template.geometry.h != g.h || template.geometry.w != g.w || template.channels() != search.channels() {
        return Err(TensorError::shape(
            "sfp",
            template.features.shape(),
            search.features.shape(),
        ));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let t = tape.constant(template.features.clone());
    let s = tape.constant(search.features.clone());
    let x = tape.concat_cols(t, s)?;
    let y = forward(&mut tape, &p, x, g.h, g.w)?;
    Heatmap::from_column(g.h, g.w, tape.value(y))
}

/// Gaussian radius in cells: `max(1, min(w_px, l_px) / 6)`.
pub fn gaussian_sigma(b: &Box3D, geom: &GridGeometry) -> f64 {
    let (cx, cy) = geom.cell_size();
    let cell = (cx * cy).sqrt();
    (b.w.min(b.l) / cell / 6.0).max(1.0)
}

/// Max over boxes of truncated Gaussians centred on each box; boxes are in grid coordinates.
///
/// Returns the heatmap and the number of boxes skipped because their center lies outside the grid.
pub fn render_gt_heatmap(boxes: &[Box3D], geom: &GridGeometry) -> (Heatmap, usize) {
    let mut map = Heatmap::filled(geom.h, geom.w, 0.0);
    let mut skipped = 0;
    for b in boxes {
        let inside = b.x >= geom.x_range.0 && b.x <= geom.x_range.1 && b.y >= geom.y_range.0 && b.y <= geom.y_range.1;
        if !inside {
            skipped += 1;
            continue;
        }
        let sigma = gaussian_sigma(b, geom);
        let (u, v) = geom.to_cell_coords(b.x, b.y);
        let reach = GAUSSIAN_SUPPORT * sigma;
        let i0 = (u - reach).floor().max(0.0) as usize;
        let i1 = ((u + reach).ceil().max(0.0) as usize).min(geom.h - 1);
        let j0 = (v - reach).floor().max(0.0) as usize;
        let j1 = ((v + reach).ceil().max(0.0) as usize).min(geom.w - 1);
        for i in i0..=i1 {
            for j in j0..=j1 {
                let d2 = (i as f64 - u).powi(2) + (j as f64 - v).powi(2);
                if d2 > reach * reach {
                    continue;
                }
                let g = (-d2 / (2.0 * sigma * sigma)).exp().clamp(0.0, 1.0);
                let slot = &mut map.values[i * geom.w + j];
                *slot = slot.max(g);
            }
        }
    }
    (map, skipped)
}

/// `F̂[i,j,c] = F[i,j,c]·Y[i,j]`; occupancy unchanged.
pub fn modulate(grid: &BevGrid, y: &Heatmap) -> Result<BevGrid, TensorError> {
    if grid.features.rows() != y.values.len() {
        return Err(TensorError::shape("modulate", grid.features.shape(), (y.values.len(), 1)));
    }
    let mut features = grid.features.clone();
    let c = features.cols();
    for (row, &s) in features.data_mut().chunks_mut(c.max(1)).zip(&y.values) {
        for v in row {
            *v *= s;
        }
    }
    Ok(BevGrid {
        geometry: grid.geometry,
        occupancy: grid.occupancy.clone(),
        features,
    })
}

/// Mean squared difference over cells.
pub fn sfp_loss(pred: &Heatmap, target: &Heatmap) -> Result<f64, TensorError> {
    if pred.values.len() != target.values.len() || pred.values.is_empty() {
        return Err(TensorError::shape("sfp_loss", (pred.values.len(), 1), (target.values.len(), 1)));
    }
    let n = pred.values.len() as f64;
    Ok(pred.values.iter().zip(&target.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}
