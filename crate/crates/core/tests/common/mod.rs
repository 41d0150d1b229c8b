//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use comptrack_core::autodiff::{grad_check, ConvGeometry, GradCheckOptions, GradCheckReport, Tape, Var};
use comptrack_core::bev::{pillarize_raw, RawPillars};
use comptrack_core::error::TensorError;
use comptrack_core::params::BoundParams;
use comptrack_core::scene::{crop_search_region, generate_sequence, Box3D, ObjectClass, SceneParams};
use comptrack_core::tracker::{
    loss_on_tape, target_heatmap, target_offsets, LossWeights, Model, ModelConfig, PairInput, PairTarget,
};
use comptrack_core::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// `n×c` matrix of rank `r` plus i.i.d. noise of standard deviation `noise`.
pub fn planted_rank(seed: u64, n: usize, c: usize, r: usize, noise: f64) -> DenseMatrix {
    let mut g = rng(seed);
    let a = gaussian(n, r, &mut g);
    let b = gaussian(r, c, &mut g);
    let e = gaussian(n, c, &mut g).scale(noise);
    a.matmul(&b).unwrap().add(&e).unwrap()
}

/// Volume IoU by sampling the footprint on a `res × res` lattice over the joint
/// bounding rectangle; the vertical overlap is exact.
pub fn raster_iou(a: &Box3D, b: &Box3D, res: usize) -> f64 {
    let corners: Vec<[f64; 2]> = a.bev_corners().into_iter().chain(b.bev_corners()).collect();
    let (x0, x1) = corners.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
    let (y0, y1) = corners.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
    let (dx, dy) = ((x1 - x0) / res as f64, (y1 - y0) / res as f64);
    let inside = |bx: &Box3D, x: f64, y: f64| {
        let q = bx.to_local([x, y, bx.z]);
        q[0].abs() <= bx.l / 2.0 && q[1].abs() <= bx.w / 2.0
    };
    let mut both = 0usize;
    for i in 0..res {
        for j in 0..res {
            let (x, y) = (x0 + (i as f64 + 0.5) * dx, y0 + (j as f64 + 0.5) * dy);
            if inside(a, x, y) && inside(b, x, y) {
                both += 1;
            }
        }
    }
    let area = both as f64 * dx * dy;
    let dz = ((a.z + a.h / 2.0).min(b.z + b.h / 2.0) - (a.z - a.h / 2.0).max(b.z - b.h / 2.0)).max(0.0);
    let inter = area * dz;
    inter / (a.volume() + b.volume() - inter)
}

type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;

/// One small graph per tape primitive, with inputs away from nondifferentiable points.
pub fn primitive_graphs() -> Vec<(&'static str, Graph, Vec<DenseMatrix>)> {
    let mut g = rng(11);
    let mut u = |r, c| uniform(r, c, &mut g);
    let conv = ConvGeometry {
        height: 5,
        width: 4,
        in_channels: 4,
        out_channels: 4,
        kernel: 3,
        groups: 2,
    };
    let mask = [true, false, true, true];
    let mut out: Vec<(&'static str, Graph, Vec<DenseMatrix>)> = vec![
        ("matmul", Box::new(|t, v| t.matmul(v[0], v[1])), vec![u(3, 4), u(4, 2)]),
        ("add", Box::new(|t, v| t.add(v[0], v[1])), vec![u(3, 2), u(3, 2)]),
        ("sub", Box::new(|t, v| t.sub(v[0], v[1])), vec![u(3, 2), u(3, 2)]),
        ("mul", Box::new(|t, v| t.mul(v[0], v[1])), vec![u(3, 2), u(3, 2)]),
        ("scale", Box::new(|t, v| t.scale(v[0], -1.7)), vec![u(2, 3)]),
        ("add_row", Box::new(|t, v| t.add_row(v[0], v[1])), vec![u(3, 4), u(1, 4)]),
        ("mul_col", Box::new(|t, v| t.mul_col(v[0], v[1])), vec![u(3, 4), u(3, 1)]),
        (
            "transpose",
            Box::new(|t, v| {
                let x = t.transpose(v[0])?;
                t.matmul(x, v[1])
            }),
            vec![u(3, 2), u(3, 3)],
        ),
        (
            "softmax_rows",
            Box::new(|t, v| {
                let s = t.softmax_rows(v[0], None)?;
                t.mul(s, v[1])
            }),
            vec![u(3, 4), u(3, 4)],
        ),
        (
            "softmax_rows_masked",
            Box::new(move |t, v| {
                let s = t.softmax_rows(v[0], Some(&mask))?;
                t.mul(s, v[1])
            }),
            vec![u(3, 4), u(3, 4)],
        ),
        (
            "sigmoid",
            Box::new(|t, v| {
                let s = t.sigmoid(v[0])?;
                t.mul(s, v[1])
            }),
            vec![u(3, 3).scale(3.0), u(3, 3)],
        ),
        (
            "relu",
            Box::new(|t, v| {
                let s = t.relu(v[0])?;
                t.mul(s, v[1])
            }),
            vec![u(3, 3), u(3, 3)],
        ),
        (
            "conv2d",
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], conv)?;
                t.mul(y, v[2])
            }),
            vec![u(20, 4), u(4, 18), u(20, 4)],
        ),
        (
            "gather_rows",
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], &[3, 0, 3, 1])?;
                t.mul(y, v[1])
            }),
            vec![u(5, 2), u(4, 2)],
        ),
        (
            "slice_rows",
            Box::new(|t, v| {
                let y = t.slice_rows(v[0], 1, 4)?;
                t.mul(y, v[1])
            }),
            vec![u(5, 2), u(3, 2)],
        ),
        (
            "concat_cols",
            Box::new(|t, v| {
                let y = t.concat_cols(v[0], v[1])?;
                t.mul(y, v[2])
            }),
            vec![u(3, 2), u(3, 1), u(3, 3)],
        ),
        (
            "concat_rows",
            Box::new(|t, v| {
                let y = t.concat_rows(v[0], v[1])?;
                t.mul(y, v[2])
            }),
            vec![u(2, 3), u(1, 3), u(3, 3)],
        ),
        ("mse", Box::new(|t, v| t.mse(v[0], v[1])), vec![u(3, 3), u(3, 3)]),
        ("smooth_l1", Box::new(|t, v| t.smooth_l1(v[0], v[1], 0.5)), vec![u(3, 3), u(3, 3)]),
        (
            "sum",
            Box::new(|t, v| {
                let s = t.sum(v[0])?;
                t.mul(s, s)
            }),
            vec![u(2, 3)],
        ),
    ];
    // Push |x| away from the kinks of relu and smooth-L1.
    for (name, _, inputs) in out.iter_mut() {
        if *name == "relu" {
            inputs[0] = inputs[0].map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
        }
        if *name == "smooth_l1" {
            let d = inputs[0].sub(&inputs[1]).unwrap();
            inputs[0] = DenseMatrix::from_fn(3, 3, |i, j| {
                let di = d.get(i, j);
                let shift = if (di.abs() - 0.5).abs() < 0.05 { 0.1 * di.signum() } else { 0.0 };
                inputs[0].get(i, j) + shift
            });
        }
    }
    out
}

pub fn check_primitives(opts: &GradCheckOptions) -> Vec<(&'static str, GradCheckReport)> {
    primitive_graphs()
        .into_iter()
        .map(|(name, graph, inputs)| {
            let named: Vec<(String, DenseMatrix)> =
                inputs.into_iter().enumerate().map(|(i, m)| (format!("{name}.{i}"), m)).collect();
            (name, grad_check(graph, &named, opts).expect("graph builds"))
        })
        .collect()
}

/// Small model and one training pair for checking the whole loss end to end
/// (16×16 grid, at most 32 tokens, query pool of 8).
pub struct ComposedFixture {
    pub model: Model,
    pub template: RawPillars,
    pub search: RawPillars,
    pub target: PairTarget,
}

pub fn composed_fixture(seed: u64) -> ComposedFixture {
    let config = ModelConfig {
        grid_h: 16,
        grid_w: 16,
        channels: 8,
        pool_size: 8,
        n_max: 32,
        gamma: 0.0,
        seed,
        ..ModelConfig::new(ObjectClass::Car)
    };
    let mut model = Model::new(config).unwrap();
    // Zero biases put every empty cell exactly on a ReLU kink; move them off it.
    let mut g = rng(seed ^ 0xb1a5);
    let biases: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with(".b")).collect();
    for name in biases {
        let m = model.params.get_mut(&name).unwrap();
        *m = uniform(m.rows(), m.cols(), &mut g).scale(0.1);
    }
    let seq = generate_sequence(&SceneParams::new(seed, 3, ObjectClass::Car)).unwrap();
    let geom = model.config.geometry();
    let template = model.template_pillars(&seq.frames[0], &seq.gt_boxes[0]);
    let (prev, cur) = (seq.gt_boxes[0], seq.gt_boxes[1]);
    let search = pillarize_raw(&crop_search_region(&seq.frames[1], &prev, ObjectClass::Car), &geom);
    let target = PairTarget {
        offsets: target_offsets(&prev, &cur),
        heatmap: target_heatmap(&prev, &cur, &geom),
    };
    ComposedFixture { model, template, search, target }
}

/// Gradient check of the full training loss with respect to every model parameter.
/// Token routing is frozen at its unperturbed value, as during training.
pub fn check_composed_loss(fx: &ComposedFixture, opts: &GradCheckOptions) -> (usize, GradCheckReport) {
    let input = PairInput { template: &fx.template, search: &fx.search, sample_seed: 0 };
    let routing = {
        let mut tape = Tape::new();
        let p = fx.model.params.bind(&mut tape);
        fx.model.forward(&mut tape, &p, &input, None, true).unwrap().routing
    };
    let names: Vec<String> = fx.model.params.iter().map(|(n, _)| n.to_string()).collect();
    let inputs: Vec<(String, DenseMatrix)> =
        fx.model.params.iter().map(|(n, m)| (n.to_string(), m.clone())).collect();
    let weights = LossWeights::default();
    let graph = |tape: &mut Tape, vars: &[Var]| -> Result<Var, TensorError> {
        let p = BoundParams::from_parts(names.clone(), vars.to_vec());
        let f = fx
            .model
            .forward(tape, &p, &input, Some(&routing), true)
            .map_err(|e| TensorError::Invalid { op: "forward", msg: e.to_string() })?;
        let (loss, _) = loss_on_tape(tape, &f, &fx.target, &weights)
            .map_err(|e| TensorError::Invalid { op: "loss", msg: e.to_string() })?;
        Ok(loss)
    };
    (routing.cells.len(), grad_check(graph, &inputs, opts).unwrap())
}

/// Two overlapping boxes with arbitrary yaw.
pub fn rotated_pair(g: &mut impl Rng) -> (Box3D, Box3D) {
    let mut draw = |dx: f64| {
        Box3D::new(
            g.random_range(-dx..dx),
            g.random_range(-dx..dx),
            g.random_range(-0.3..0.3),
            g.random_range(0.5..2.0),
            g.random_range(0.5..2.0),
            g.random_range(0.5..4.0),
            g.random_range(-3.1..3.1),
        )
        .unwrap()
    };
    (draw(0.1), draw(1.0))
}

/// Closed-form IoU of two yaw-free boxes.
pub fn axis_aligned_iou(a: &Box3D, b: &Box3D) -> f64 {
    let overlap = |ca: f64, ea: f64, cb: f64, eb: f64| ((ca + ea / 2.0).min(cb + eb / 2.0) - (ca - ea / 2.0).max(cb - eb / 2.0)).max(0.0);
    let inter = overlap(a.x, a.l, b.x, b.l) * overlap(a.y, a.w, b.y, b.w) * overlap(a.z, a.h, b.z, b.h);
    inter / (a.volume() + b.volume() - inter)
}

/// Largest difference in outputs and parameter gradients between the `L`-row
/// masked forward and the `K`-row sliced forward, at a forced rank `k`.
pub fn masking_gap(k: usize, l: usize, seed: u64) -> f64 {
    use comptrack_core::tracker::Routing;
    let mut fx = composed_fixture(seed);
    fx.model.config.pool_size = l;
    let c = fx.model.config.channels;
    let mut g = rng(seed);
    fx.model.params.insert("ibdtc.pool", uniform(l, c, &mut g));
    let input = PairInput { template: &fx.template, search: &fx.search, sample_seed: 0 };
    let base = {
        let mut tape = Tape::new();
        let p = fx.model.params.bind(&mut tape);
        fx.model.forward(&mut tape, &p, &input, None, true).unwrap().routing
    };
    let routing = Routing { k, rank: None, q_svd: uniform(k, c, &mut g), ..base };
    let run = |padded: bool| {
        let mut tape = Tape::new();
        let p = fx.model.params.bind(&mut tape);
        let f = fx.model.forward(&mut tape, &p, &input, Some(&routing), padded).unwrap();
        let (loss, _) = loss_on_tape(&mut tape, &f, &fx.target, &LossWeights::default()).unwrap();
        let value = tape.value(loss).get(0, 0);
        let offsets = f.offsets(&tape);
        let mut grads = tape.backward(loss, &DenseMatrix::filled(1, 1, 1.0)).unwrap();
        let grads: Vec<DenseMatrix> = p.vars().iter().map(|&v| grads.take(v)).collect();
        (value, offsets, grads)
    };
    let (a, b) = (run(true), run(false));
    let mut gap = (a.0 - b.0).abs();
    for (x, y) in a.1.iter().zip(&b.1) {
        gap = gap.max((x - y).abs());
    }
    for (x, y) in a.2.iter().zip(&b.2) {
        gap = gap.max(x.max_abs_diff(y));
    }
    gap
}

/// The `(K, L)` pairs of the masking check: both ends of the range plus random interior points.
pub fn masking_pairs() -> Vec<(usize, usize)> {
    let mut g = rng(404);
    let mut pairs = vec![(1, 1), (1, 8), (8, 8), (1, 24), (24, 24)];
    while pairs.len() < 20 {
        let l = g.random_range(2..=24);
        pairs.push((g.random_range(1..=l), l));
    }
    pairs
}

/// Projected grid of `h × w` cells with exactly the first `occupied` cells (raster order) holding a point.
pub fn grid_with_occupancy(h: usize, w: usize, occupied: usize) -> comptrack_core::BevGrid {
    use comptrack_core::bev::GridGeometry;
    let geom = GridGeometry::for_class(ObjectClass::Car, h, w);
    let points = (0..occupied)
        .map(|cell| {
            let (x, y) = geom.cell_center(cell / w, cell % w);
            [x, y, 0.0]
        })
        .collect();
    let raw = pillarize_raw(&comptrack_core::PointCloud::new(points), &geom);
    let proj = DenseMatrix::filled(raw.raw.cols(), 4, 1.0);
    comptrack_core::BevGrid::project(&raw, &proj).unwrap()
}

/// `(H, W, occupied, H_fg, bits)` with bits written out from the definition.
pub fn entropy_cases() -> Vec<(usize, usize, usize, f64, f64)> {
    let hb = |p: f64| -p * p.log2() - (1.0 - p) * (1.0 - p).log2();
    vec![
        (1, 1, 0, 0.0, 0.0),
        (1, 2, 1, 0.0, 2.0),
        (2, 2, 2, 0.0, 4.0),
        (2, 2, 1, 0.0, 4.0 * hb(0.25)),
        (2, 2, 4, 3.0, 4.0 * 3.0),
        (4, 4, 4, 2.0, 16.0 * (hb(0.25) + 0.5)),
        (8, 8, 16, 1.5, 64.0 * (hb(0.25) + 0.375)),
        (10, 10, 1, 4.0, 100.0 * (hb(0.01) + 0.04)),
        (16, 16, 64, 0.5, 256.0 * (hb(0.25) + 0.125)),
        (128, 128, 164, 4.0, 16384.0 * (hb(164.0 / 16384.0) + 4.0 * 164.0 / 16384.0)),
    ]
}

/// Orthonormal `k × c` rows by Gram–Schmidt on Gaussian draws.
pub fn random_subspace(k: usize, c: usize, seed: u64) -> DenseMatrix {
    let g = gaussian(k, c, &mut rng(seed));
    let mut q = DenseMatrix::zeros(k, c);
    for i in 0..k {
        let mut v = g.row(i).to_vec();
        for j in 0..i {
            let d: f64 = v.iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(q.row(j)) {
                *a -= d * b;
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.row_mut(i).iter_mut().zip(&v).for_each(|(o, a)| *o = a / n);
    }
    q
}

pub fn projection_residual(x: &DenseMatrix, q: &DenseMatrix) -> f64 {
    let p = x.matmul(&q.transpose()).unwrap().matmul(q).unwrap();
    x.sub(&p).unwrap().frobenius_sq()
}
