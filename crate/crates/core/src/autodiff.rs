//! Tape-based reverse-mode differentiation over [`DenseMatrix`] values.
//!
//! A [`Tape`] records one forward pass. Every primitive validates shapes
//! before running and appends a node whose value is immutable from then on.
//! Nodes are appended in dependency order, so walking the tape backwards is a
//! reverse topological traversal that visits each node once.
//!
//! The primitive set is closed:
//!
//! | primitive | shape rule |
//! |---|---|
//! | `matmul` | `(m×k)·(k×n)` |
//! | `add`, `sub`, `mul` | equal shapes |
//! | `add_row` | `(n×c) + (1×c)` broadcast over rows |
//! | `mul_col` | `(n×c) ⊙ (n×1)` broadcast over columns |
//! | `scale`, `transpose`, `sigmoid`, `relu` | unary |
//! | `softmax_rows` | row-wise, optional key mask over columns |
//! | `conv2d` | grouped, stride 1, zero "same" padding |
//! | `gather_rows`, `concat_cols`, `concat_rows` | structural |
//! | `mse`, `smooth_l1`, `sum` | reductions to `1×1` |
//!
//! Anything computed outside the tape (the online SVD, for instance) enters
//! as a constant and therefore blocks gradient flow.

use crate::error::TensorError;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, DenseMatrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a recorded primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    MulCol,
    Transpose,
    Softmax,
    Sigmoid,
    Relu,
    Conv2d,
    GatherRows,
    ConcatCols,
    ConcatRows,
    Mse,
    SmoothL1,
    Sum,
}

/// Geometry of a grouped 2D convolution over an `H·W × C` feature map.
///
/// Feature maps are stored cell-major: row `y*width + x`, one column per
/// channel. Weights are `out_channels × (in_channels/groups · k · k)` with
/// column index `ic·k·k + ky·k + kx`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> (usize, usize) {
        (self.out_channels, self.in_per_group() * self.kernel * self.kernel)
    }

    fn validate(&self) -> Result<(), TensorError> {
        let ok = self.groups > 0
            && self.kernel % 2 == 1
            && self.in_channels % self.groups == 0
            && self.out_channels % self.groups == 0
            && self.height > 0
            && self.width > 0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::invalid("conv2d", format!("invalid geometry {self:?}")))
        }
    }

    /// Multiply-accumulates of one forward pass, ignoring border clipping.
    pub fn macs(&self) -> u64 {
        (self.height * self.width * self.out_channels * self.in_per_group() * self.kernel * self.kernel) as u64
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Transpose(Var),
    Softmax { x: Var },
    Sigmoid(Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Mse(Var, Var),
    SmoothL1 { a: Var, b: Var, beta: f64 },
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulCol(..) => OpKind::MulCol,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Mse(..) => OpKind::Mse,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::Sum(..) => OpKind::Sum,
        }
    }
}

struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

/// Records primitives of one forward pass and replays them backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    macs: u64,
    fault: Option<OpKind>,
}

/// Gradients returned by [`Tape::backward`]; unused nodes read as zeros.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> DenseMatrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> DenseMatrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negates the backward rule of one primitive kind. Test-only negative control.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by `matmul` and `conv2d` so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Primitive kinds recorded so far, in order.
    pub fn kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: DenseMatrix, requires_grad: bool) -> Var {
        self.backward_done = false;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, parents: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: kind_name(op.kind()) });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.backward_done = false;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(TensorError::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = DenseMatrix::zeros(av.rows(), bv.cols());
        matmul_into(av, bv, &mut out);
        self.macs += (av.rows() * av.cols() * bv.cols()) as u64;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).hadamard(self.value(b))?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Adds a `1×c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(TensorError::shape("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        let r = rv.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(TensorError::shape("mul_col", av.shape(), cv.shape()));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let s = cv.get(i, 0);
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a, col), &[a, col])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` get weight exactly 0.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if let Some(m) = key_mask {
            if m.len() != xv.cols() {
                return Err(TensorError::shape("softmax_rows", xv.shape(), (1, m.len())));
            }
        }
        let mut out = DenseMatrix::zeros(xv.rows(), xv.cols());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let orow = out.row_mut(i);
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        self.push(out, Op::Softmax { x }, &[x])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Grouped 2D convolution without bias (add one with [`Tape::add_row`]).
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var, TensorError> {
        geom.validate()?;
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape() != (geom.height * geom.width, geom.in_channels) {
            return Err(TensorError::shape(
                "conv2d",
                xv.shape(),
                (geom.height * geom.width, geom.in_channels),
            ));
        }
        if wv.shape() != geom.weight_shape() {
            return Err(TensorError::shape("conv2d", wv.shape(), geom.weight_shape()));
        }
        let out = conv2d_forward(xv, wv, &geom);
        self.macs += geom.macs();
        self.push(out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Copies the listed rows (repeats allowed). Contiguous ranges give a row slice.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {:?}", xv.shape()),
            ));
        }
        let out = xv.select_rows(rows);
        self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        if start > end {
            return Err(TensorError::invalid("slice_rows", format!("{start}..{end}")));
        }
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &rows)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(TensorError::shape("concat_cols", av.shape(), bv.shape()));
        }
        let mut out = DenseMatrix::zeros(av.rows(), av.cols() + bv.cols());
        for i in 0..av.rows() {
            let orow = out.row_mut(i);
            orow[..av.cols()].copy_from_slice(av.row(i));
            orow[av.cols()..].copy_from_slice(bv.row(i));
        }
        self.push(out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(TensorError::shape("concat_rows", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = DenseMatrix::from_vec(av.rows() + bv.rows(), av.cols(), data)?;
        self.push(out, Op::ConcatRows(a, b), &[a, b])
    }

    /// Mean of squared differences, as a `1×1` value.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.is_empty() {
            return Err(TensorError::shape("mse", av.shape(), bv.shape()));
        }
        let n = av.len() as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(DenseMatrix::filled(1, 1, s / n), Op::Mse(a, b), &[a, b])
    }

    /// Mean smooth-L1 (Huber with transition `beta`), as a `1×1` value.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.is_empty() {
            return Err(TensorError::shape("smooth_l1", av.shape(), bv.shape()));
        }
        if beta <= 0.0 {
            return Err(TensorError::invalid("smooth_l1", "beta must be positive"));
        }
        let n = av.len() as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| {
                let d = (x - y).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        self.push(DenseMatrix::filled(1, 1, s / n), Op::SmoothL1 { a, b, beta }, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).sum();
        self.push(DenseMatrix::filled(1, 1, s), Op::Sum(a), &[a])
    }

    /// Propagates `seed` (same shape as `output`) back to every node.
    ///
    /// Fails if backward already ran and nothing new was recorded since.
    pub fn backward(&mut self, output: Var, seed: &DenseMatrix) -> Result<Gradients, TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if seed.shape() != self.shape(output) {
            return Err(TensorError::shape("backward", self.shape(output), seed.shape()));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let flip = self.fault == Some(self.nodes[idx].op.kind());
            let contributions = self.local_grads(idx, &g);
            for (var, mut contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if flip {
                    contrib = contrib.scale(-1.0);
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        self.backward_done = true;
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    /// Gradient contributions of node `idx` to its parents given upstream `g`.
    fn local_grads(&self, idx: usize, g: &DenseMatrix) -> Vec<(Var, DenseMatrix)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if needs(*a) {
                    let mut ga = DenseMatrix::zeros(val(*a).rows(), val(*a).cols());
                    matmul_nt_into(g, val(*b), &mut ga);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = DenseMatrix::zeros(val(*b).rows(), val(*b).cols());
                    matmul_tn_into(val(*a), g, &mut gb);
                    out.push((*b, gb));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.hadamard(val(*b)).expect("shape checked")),
                (*b, g.hadamard(val(*a)).expect("shape checked")),
            ],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddRow(a, row) => {
                let mut gr = DenseMatrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, v) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                vec![(*a, g.clone()), (*row, gr)]
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(*a), val(*col));
                let mut ga = g.clone();
                let mut gc = DenseMatrix::zeros(cv.rows(), 1);
                for i in 0..g.rows() {
                    let s = cv.get(i, 0);
                    let mut acc = 0.0;
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        acc += *o * av.get(i, j);
                        *o *= s;
                    }
                    gc.set(i, 0, acc);
                }
                vec![(*a, ga), (*col, gc)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Softmax { x, .. } => {
                let y = &node.value;
                let mut gx = DenseMatrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let gx = DenseMatrix::from_vec(
                    y.rows(),
                    y.cols(),
                    y.data().iter().zip(g.data()).map(|(y, g)| g * y * (1.0 - y)).collect(),
                )
                .expect("same length");
                vec![(*a, gx)]
            }
            Op::Relu(a) => {
                let x = val(*a);
                let gx = DenseMatrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )
                .expect("same length");
                vec![(*a, gx)]
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = conv2d_backward(val(*x), val(*w), g, geom, needs(*x), needs(*w));
                let mut out = Vec::with_capacity(2);
                if let Some(gx) = gx {
                    out.push((*x, gx));
                }
                if let Some(gw) = gw {
                    out.push((*w, gw));
                }
                out
            }
            Op::GatherRows { x, rows } => {
                let xv = val(*x);
                let mut gx = DenseMatrix::zeros(xv.rows(), xv.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                vec![(*x, gx)]
            }
            Op::ConcatCols(a, b) => {
                let ac = val(*a).cols();
                let mut ga = DenseMatrix::zeros(g.rows(), ac);
                let mut gb = DenseMatrix::zeros(g.rows(), g.cols() - ac);
                for i in 0..g.rows() {
                    ga.row_mut(i).copy_from_slice(&g.row(i)[..ac]);
                    gb.row_mut(i).copy_from_slice(&g.row(i)[ac..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::ConcatRows(a, b) => {
                let ar = val(*a).rows();
                vec![(*a, g.slice_rows(0, ar)), (*b, g.slice_rows(ar, g.rows()))]
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = 2.0 * g.get(0, 0) / av.len() as f64;
                let ga = av.sub(bv).expect("shape checked").scale(k);
                let gb = ga.scale(-1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::SmoothL1 { a, b, beta } => {
                let (av, bv) = (val(*a), val(*b));
                let k = g.get(0, 0) / av.len() as f64;
                let ga = av.sub(bv).expect("shape checked").map(|d| {
                    if d.abs() < *beta {
                        k * d / beta
                    } else {
                        k * d.signum()
                    }
                });
                let gb = ga.scale(-1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, DenseMatrix::filled(r, c, g.get(0, 0)))]
            }
        }
    }
}

fn kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::MatMul => "matmul",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Scale => "scale",
        OpKind::AddRow => "add_row",
        OpKind::MulCol => "mul_col",
        OpKind::Transpose => "transpose",
        OpKind::Softmax => "softmax_rows",
        OpKind::Sigmoid => "sigmoid",
        OpKind::Relu => "relu",
        OpKind::Conv2d => "conv2d",
        OpKind::GatherRows => "gather_rows",
        OpKind::ConcatCols => "concat_cols",
        OpKind::ConcatRows => "concat_rows",
        OpKind::Mse => "mse",
        OpKind::SmoothL1 => "smooth_l1",
        OpKind::Sum => "sum",
    }
}

/// Repacks weights to `[group][kpos][ic][oc]` so inner loops run over output channels.
fn pack_conv_weights(w: &DenseMatrix, geom: &ConvGeometry) -> Vec<f64> {
    let (cig, cog, kk) = (geom.in_per_group(), geom.out_per_group(), geom.kernel * geom.kernel);
    let mut packed = vec![0.0; geom.groups * kk * cig * cog];
    for g in 0..geom.groups {
        for oc in 0..cog {
            let wrow = w.row(g * cog + oc);
            for ic in 0..cig {
                for kp in 0..kk {
                    packed[((g * kk + kp) * cig + ic) * cog + oc] = wrow[ic * kk + kp];
                }
            }
        }
    }
    packed
}

fn conv_neighbors(geom: &ConvGeometry, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let k = geom.kernel;
    let pad = (k / 2) as isize;
    (0..k * k).filter_map(move |kp| {
        let iy = oy as isize + (kp / k) as isize - pad;
        let ix = ox as isize + (kp % k) as isize - pad;
        if iy < 0 || ix < 0 || iy >= geom.height as isize || ix >= geom.width as isize {
            None
        } else {
            Some((kp, iy as usize * geom.width + ix as usize))
        }
    })
}

fn conv2d_forward(x: &DenseMatrix, w: &DenseMatrix, geom: &ConvGeometry) -> DenseMatrix {
    let (cig, cog, kk) = (geom.in_per_group(), geom.out_per_group(), geom.kernel * geom.kernel);
    let packed = pack_conv_weights(w, geom);
    let mut out = DenseMatrix::zeros(geom.height * geom.width, geom.out_channels);
    let xin = x.data();
    let cin = geom.in_channels;
    for oy in 0..geom.height {
        for ox in 0..geom.width {
            let opix = oy * geom.width + ox;
            let orow = out.row_mut(opix);
            for (kp, ipix) in conv_neighbors(geom, oy, ox) {
                let xrow = &xin[ipix * cin..(ipix + 1) * cin];
                for g in 0..geom.groups {
                    let xs = &xrow[g * cig..(g + 1) * cig];
                    let og = &mut orow[g * cog..(g + 1) * cog];
                    let base = (g * kk + kp) * cig;
                    for (ic, &xv) in xs.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wv = &packed[(base + ic) * cog..(base + ic + 1) * cog];
                        for (o, &wk) in og.iter_mut().zip(wv) {
                            *o += xv * wk;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &DenseMatrix,
    w: &DenseMatrix,
    gout: &DenseMatrix,
    geom: &ConvGeometry,
    want_x: bool,
    want_w: bool,
) -> (Option<DenseMatrix>, Option<DenseMatrix>) {
    let (cig, cog, kk) = (geom.in_per_group(), geom.out_per_group(), geom.kernel * geom.kernel);
    let cin = geom.in_channels;
    let packed = pack_conv_weights(w, geom);
    let mut gx = want_x.then(|| DenseMatrix::zeros(x.rows(), x.cols()));
    let mut gpacked = want_w.then(|| vec![0.0; packed.len()]);
    let xin = x.data();
    for oy in 0..geom.height {
        for ox in 0..geom.width {
            let opix = oy * geom.width + ox;
            let grow = gout.row(opix);
            for (kp, ipix) in conv_neighbors(geom, oy, ox) {
                for g in 0..geom.groups {
                    let gs = &grow[g * cog..(g + 1) * cog];
                    let base = (g * kk + kp) * cig;
                    if let Some(gx) = gx.as_mut() {
                        let gxrow = &mut gx.row_mut(ipix)[g * cig..(g + 1) * cig];
                        for (ic, o) in gxrow.iter_mut().enumerate() {
                            let wv = &packed[(base + ic) * cog..(base + ic + 1) * cog];
                            *o += wv.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    if let Some(gp) = gpacked.as_mut() {
                        let xs = &xin[ipix * cin + g * cig..ipix * cin + (g + 1) * cig];
                        for (ic, &xv) in xs.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let dst = &mut gp[(base + ic) * cog..(base + ic + 1) * cog];
                            for (d, &gv) in dst.iter_mut().zip(gs) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    let gw = gpacked.map(|gp| {
        let mut gw = DenseMatrix::zeros(w.rows(), w.cols());
        for g in 0..geom.groups {
            for oc in 0..cog {
                let row = gw.row_mut(g * cog + oc);
                for ic in 0..cig {
                    for kp in 0..kk {
                        row[ic * kk + kp] = gp[((g * kk + kp) * cig + ic) * cog + oc];
                    }
                }
            }
        }
        gw
    });
    (gx, gw)
}

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass iff every parameter's max relative error is below this.
    pub tolerance: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    /// Negates one primitive's backward rule (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            fault: None,
        }
    }
}

/// Outcome for one named input.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// `(row, col)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Set when a finite-difference probe produced a non-finite value.
    pub failure: Option<String>,
}

impl ParamCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.failure.is_none() && self.max_rel_error < tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed(self.tolerance))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            let status = if p.passed(self.tolerance) { "ok" } else { "FAIL" };
            write!(
                f,
                "{status:4} {:<24} max_rel={:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
                p.name, p.max_rel_error, p.worst, p.analytic, p.numeric
            )?;
            if let Some(msg) = &p.failure {
                write!(f, " {msg}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Compares tape gradients against central differences for every input entry.
///
/// `graph` receives one differentiable leaf per input, in order, and returns
/// the output whose entry sum is differentiated.
pub fn grad_check<F>(
    graph: F,
    inputs: &[(String, DenseMatrix)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[DenseMatrix]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = graph(&mut tape, &vars)?;
        Ok(tape.value(out).sum())
    };

    let values: Vec<DenseMatrix> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut tape = Tape::new();
    tape.inject_fault(opts.fault);
    let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let (r, c) = tape.shape(out);
    let grads = tape.backward(out, &DenseMatrix::filled(r, c, 1.0))?;

    let mut params = Vec::with_capacity(inputs.len());
    let mut probe = values.clone();
    for (pi, (name, value)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[pi]);
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            failure: None,
        };
        for idx in 0..value.len() {
            let orig = value.data()[idx];
            probe[pi].data_mut()[idx] = orig + opts.step;
            let plus = eval(&probe);
            probe[pi].data_mut()[idx] = orig - opts.step;
            let minus = eval(&probe);
            probe[pi].data_mut()[idx] = orig;
            let at = (idx / value.cols(), idx % value.cols());
            let numeric = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p - m) / (2.0 * opts.step),
                _ => {
                    check.failure = Some(format!("non-finite finite-difference estimate at {at:?}"));
                    check.worst = at;
                    check.max_rel_error = f64::INFINITY;
                    break;
                }
            };
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            if rel > check.max_rel_error || idx == 0 {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst = at;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        params,
    })
}
