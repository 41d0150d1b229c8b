//! The tracking model: forward pass, losses, frame-by-frame inference and training.
//!
//! Forward pipeline for one (template, search) pair:
//!
//! 1. raw pillars of both crops → shared learnable projection → `F_t`, `F_s`
//! 2. heatmap `Y = SFP(F_t ‖ F_s)`, modulated search features `F̂_s = F_s ⊙ Y`
//! 3. foreground tokens from `F̂_s` plus position code
//! 4. token reduction (rank-guided compression, a baseline, or none)
//! 5. one transformer block over the reduced tokens, masked mean pool
//! 6. two regression branches: `(dx, dy)` and `(dz, dθ)` in the previous box's frame
//!
//! Step 3–4 routing decisions (which cells, `K`, the SVD prior) are computed
//! from forward values and enter the tape as constants. Passing a fixed
//! [`Routing`] replays them exactly, which is what gradient checks need.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::bev::{empirical_cell_entropy, occupancy_entropy, pillarize_raw, GridGeometry, RawPillars, RAW_CHANNELS};
use crate::error::{ConfigError, Error, TensorError};
use crate::ibdtc::{
    active_queries, cross_attention, leading_mask, masked_mean_pool, masked_self_attention, positional_encoding,
    random_drop_keep, select_foreground_cells, svd_queries, uniform_grid_keep, Compression, FusionMode,
    SvdRowScaling, DEFAULT_GAMMA, DEFAULT_N_MAX, DEFAULT_POOL_SIZE, FIXED_K,
};
use crate::linalg::RankEstimate;
use crate::params::{AdamW, BoundParams, ParamSet};
use crate::scene::{augment_frame, crop_search_region, wrap_angle, AugmentDraw, Box3D, ObjectClass, PointCloud, Sequence};
use crate::sfp::{self, render_gt_heatmap, Heatmap};
use crate::tensor::DenseMatrix;

pub use crate::metrics::OpeReport;

/// Transition point of the smooth-L1 regression losses.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            theta1: 1.0,
            theta2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (k, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("theta1", self.theta1),
            ("theta2", self.theta2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(k, v, "must be a finite nonnegative number"));
            }
        }
        if self.theta1 == 0.0 && self.theta2 == 0.0 {
            return Err(ConfigError::Inconsistent("theta1 and theta2 cannot both be zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub class: ObjectClass,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub pool_size: usize,
    pub tau: f64,
    pub gamma: f64,
    pub n_max: usize,
    pub compression: Compression,
    pub svd_row_scaling: SvdRowScaling,
    pub use_sfp: bool,
    /// Seeds parameter initialization and the random-drop baseline.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(class: ObjectClass) -> Self {
        Self {
            class,
            grid_h: 128,
            grid_w: 128,
            channels: 32,
            pool_size: DEFAULT_POOL_SIZE,
            tau: 0.99,
            gamma: DEFAULT_GAMMA,
            n_max: DEFAULT_N_MAX,
            compression: Compression::Dynamic(FusionMode::Addition),
            svd_row_scaling: SvdRowScaling::Unit,
            use_sfp: true,
            seed: 0,
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry::for_class(self.class, self.grid_h, self.grid_w)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(ConfigError::invalid("grid", format!("{}x{}", self.grid_h, self.grid_w), "must be nonzero"));
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            // even for the position code, divisible by 4 for the grouped convolutions
            return Err(ConfigError::invalid("channels", self.channels, "must be a positive multiple of 4"));
        }
        if self.pool_size == 0 {
            return Err(ConfigError::invalid("pool_size", self.pool_size, "must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ConfigError::invalid("tau", self.tau, "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(ConfigError::invalid("gamma", self.gamma, "must lie in [0, 1)"));
        }
        if self.n_max == 0 {
            return Err(ConfigError::invalid("n_max", self.n_max, "must be at least 1"));
        }
        Ok(())
    }
}

/// Non-differentiable decisions of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Selected cells, in token order.
    pub cells: Vec<usize>,
    /// Proxy count: effective rank, fixed K, kept tokens, or `N`.
    pub k: usize,
    pub rank: Option<RankEstimate>,
    /// `k × C` SVD prior (zeros where unused).
    pub q_svd: DenseMatrix,
    /// Token rows kept by the subsampling baselines.
    pub kept: Vec<usize>,
}

/// Multiply-accumulates and wall time per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageStats {
    pub backbone_macs: u64,
    pub compression_macs: u64,
    pub downstream_macs: u64,
    pub backbone_time: Duration,
    pub routing_time: Duration,
    pub compression_time: Duration,
    pub downstream_time: Duration,
}

impl StageStats {
    /// Token reduction plus everything after it.
    pub fn attention_head_macs(&self) -> u64 {
        self.compression_macs + self.downstream_macs
    }

    pub fn attention_head_time(&self) -> Duration {
        self.compression_time + self.downstream_time
    }

    pub fn accumulate(&mut self, o: &StageStats) {
        self.backbone_macs += o.backbone_macs;
        self.compression_macs += o.compression_macs;
        self.downstream_macs += o.downstream_macs;
        self.backbone_time += o.backbone_time;
        self.routing_time += o.routing_time;
        self.compression_time += o.compression_time;
        self.downstream_time += o.downstream_time;
    }
}

pub struct ForwardPass {
    /// `H·W × 1`, absent without the foreground predictor.
    pub heatmap: Option<Var>,
    /// `1 × 2` `(dx, dy)`; absent on the empty-token path.
    pub xy: Option<Var>,
    /// `1 × 2` `(dz, dθ)`.
    pub zr: Option<Var>,
    pub routing: Routing,
    pub n_tokens: usize,
    pub stats: StageStats,
}

impl ForwardPass {
    /// `[dx, dy, dz, dθ]`, zeros on the empty-token path.
    pub fn offsets(&self, tape: &Tape) -> [f64; 4] {
        match (self.xy, self.zr) {
            (Some(a), Some(b)) => {
                let (a, b) = (tape.value(a), tape.value(b));
                [a.get(0, 0), a.get(0, 1), b.get(0, 0), b.get(0, 1)]
            }
            _ => [0.0; 4],
        }
    }
}

/// One template/search pair in grid form.
pub struct PairInput<'a> {
    pub template: &'a RawPillars,
    pub search: &'a RawPillars,
    /// Seeds the random-drop baseline for this pair.
    pub sample_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn linear<R: rand::Rng + ?Sized>(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    p.insert(format!("{name}.w"), DenseMatrix::uniform_fan_in(fan_in, fan_out, fan_in, rng));
    p.insert(format!("{name}.b"), DenseMatrix::zeros(1, fan_out));
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamSet::new();
        p.insert("bev.proj", DenseMatrix::uniform_fan_in(RAW_CHANNELS, c, RAW_CHANNELS, &mut rng));
        sfp::init_params(&mut p, c, &mut rng);
        p.insert("ibdtc.pool", DenseMatrix::uniform_fan_in(config.pool_size, c, c, &mut rng));
        linear(&mut p, "ibdtc.fuse", 2 * c, c, &mut rng);
        for name in ["ibdtc.wq", "ibdtc.wk", "ibdtc.wv", "refine.wq", "refine.wk", "refine.wv"] {
            p.insert(name, DenseMatrix::uniform_fan_in(c, c, c, &mut rng));
        }
        linear(&mut p, "refine.ff1", c, 2 * c, &mut rng);
        linear(&mut p, "refine.ff2", 2 * c, c, &mut rng);
        for branch in ["head.xy", "head.zr"] {
            linear(&mut p, &format!("{branch}.fc1"), c, c, &mut rng);
            linear(&mut p, &format!("{branch}.fc2"), c, 2, &mut rng);
        }
        Ok(Self { config, params: p })
    }

    /// Wraps loaded parameters, checking names and shapes against a fresh model.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, Error> {
        let reference = Model::new(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(crate::error::DataError::Invalid(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                reference.params.len()
            ))
            .into());
        }
        for (name, v) in reference.params.iter() {
            match params.get(name) {
                Some(got) if got.shape() == v.shape() => {}
                Some(got) => {
                    return Err(crate::error::DataError::Invalid(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        got.shape(),
                        v.shape()
                    ))
                    .into())
                }
                None => return Err(crate::error::DataError::Invalid(format!("checkpoint lacks `{name}`")).into()),
            }
        }
        Ok(Self { config, params })
    }

    /// Template-side pillars: frame 0 cropped around its box.
    pub fn template_pillars(&self, frame: &PointCloud, bx: &Box3D) -> RawPillars {
        pillarize_raw(&crop_search_region(frame, bx, self.config.class), &self.config.geometry())
    }

    fn route(&self, x: &DenseMatrix, coords: &[(usize, usize)], cells: Vec<usize>, sample_seed: u64) -> Result<Routing, Error> {
        let c = self.config.channels;
        let n = cells.len();
        let empty = |k: usize| DenseMatrix::zeros(k, c);
        Ok(match self.config.compression {
            Compression::Dynamic(mode) => {
                let sq = svd_queries(x, self.config.tau, self.config.pool_size, self.config.svd_row_scaling)?;
                let q_svd = if mode == FusionMode::LearnableOnly { empty(sq.k) } else { sq.q_svd };
                Routing {
                    cells,
                    k: sq.k,
                    rank: sq.rank,
                    q_svd,
                    kept: Vec::new(),
                }
            }
            Compression::FixedK => {
                let k = FIXED_K.min(self.config.pool_size);
                Routing {
                    cells,
                    k,
                    rank: None,
                    q_svd: empty(k),
                    kept: Vec::new(),
                }
            }
            Compression::UniformGrid | Compression::RandomDrop => {
                let kept = if self.config.compression == Compression::UniformGrid {
                    uniform_grid_keep(coords)
                } else {
                    random_drop_keep(n, sample_seed)
                };
                Routing {
                    cells,
                    k: kept.len(),
                    rank: None,
                    q_svd: empty(kept.len()),
                    kept,
                }
            }
            Compression::Uncompressed => Routing {
                cells,
                k: n,
                rank: None,
                q_svd: empty(n),
                kept: Vec::new(),
            },
        })
    }

    /// Records one forward pass. `padded` selects the `L`-row masked form of the
    /// rank-guided compressor (training); otherwise tensors are sliced to `K` rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        input: &PairInput<'_>,
        routing: Option<&Routing>,
        padded: bool,
    ) -> Result<ForwardPass, Error> {
        let cfg = &self.config;
        let g = cfg.geometry();
        let c = cfg.channels;
        let mut stats = StageStats::default();
        if input.search.geometry != g || input.template.geometry != g {
            return Err(TensorError::invalid("forward", "pillar grids do not match the model geometry").into());
        }

        let clock = Instant::now();
        let macs0 = tape.macs();
        let proj = p.get("bev.proj");
        let raw_s = tape.constant(input.search.raw.clone());
        let fs = tape.matmul(raw_s, proj)?;
        let (heatmap, fhat, scores) = if cfg.use_sfp {
            let raw_t = tape.constant(input.template.raw.clone());
            let ft = tape.matmul(raw_t, proj)?;
            let x = tape.concat_cols(ft, fs)?;
            let y = sfp::forward(tape, p, x, g.h, g.w)?;
            let fhat = tape.mul_col(fs, y)?;
            let scores = tape.value(y).data().to_vec();
            (Some(y), fhat, scores)
        } else {
            (None, fs, vec![1.0; g.cells()])
        };
        stats.backbone_macs = tape.macs() - macs0;
        stats.backbone_time = clock.elapsed();

        let clock = Instant::now();
        let cells = match routing {
            Some(r) => r.cells.clone(),
            None => select_foreground_cells(&input.search.occupancy(), &scores, cfg.gamma, cfg.n_max),
        };
        if cells.is_empty() {
            stats.routing_time = clock.elapsed();
            return Ok(ForwardPass {
                heatmap,
                xy: None,
                zr: None,
                routing: Routing {
                    cells,
                    k: 1,
                    rank: None,
                    q_svd: DenseMatrix::zeros(1, c),
                    kept: Vec::new(),
                },
                n_tokens: 0,
                stats,
            });
        }
        let coords: Vec<(usize, usize)> = cells.iter().map(|&i| (i / g.w, i % g.w)).collect();
        let xfg = tape.gather_rows(fhat, &cells)?;
        let pe = tape.constant(positional_encoding(&coords, c, g.h, g.w)?);
        let xp = tape.add(xfg, pe)?;
        let n = cells.len();
        let routing = match routing {
            Some(r) => r.clone(),
            None => self.route(tape.value(xp), &coords, cells, input.sample_seed)?,
        };
        stats.routing_time = clock.elapsed();

        let clock = Instant::now();
        let macs0 = tape.macs();
        let (wq, wk, wv) = (p.get("ibdtc.wq"), p.get("ibdtc.wk"), p.get("ibdtc.wv"));
        let (proxy, mask) = match cfg.compression {
            Compression::Dynamic(mode) => {
                let fuse = (mode == FusionMode::ConcatLinear).then(|| (p.get("ibdtc.fuse.w"), p.get("ibdtc.fuse.b")));
                let pad = padded.then_some(cfg.pool_size);
                let q = active_queries(tape, p.get("ibdtc.pool"), fuse, &routing.q_svd, routing.k, mode, pad)?;
                let proxy = cross_attention(tape, q, xp, wq, wk, wv)?;
                let mask = if padded { Some(leading_mask(routing.k, cfg.pool_size)?) } else { None };
                (proxy, mask)
            }
            Compression::FixedK => {
                let q = active_queries(
                    tape,
                    p.get("ibdtc.pool"),
                    None,
                    &routing.q_svd,
                    routing.k,
                    FusionMode::LearnableOnly,
                    None,
                )?;
                (cross_attention(tape, q, xp, wq, wk, wv)?, None)
            }
            Compression::UniformGrid | Compression::RandomDrop => (tape.gather_rows(xp, &routing.kept)?, None),
            Compression::Uncompressed => (xp, None),
        };
        stats.compression_macs = tape.macs() - macs0;
        stats.compression_time = clock.elapsed();

        let clock = Instant::now();
        let macs0 = tape.macs();
        let z = self.refine(tape, p, proxy, mask.as_deref())?;
        let pooled = masked_mean_pool(tape, z, mask.as_deref())?;
        let xy = head_branch(tape, p, pooled, "head.xy")?;
        let zr = head_branch(tape, p, pooled, "head.zr")?;
        stats.downstream_macs = tape.macs() - macs0;
        stats.downstream_time = clock.elapsed();

        Ok(ForwardPass {
            heatmap,
            xy: Some(xy),
            zr: Some(zr),
            routing,
            n_tokens: n,
            stats,
        })
    }

    /// Residual attention plus feed-forward over the reduced tokens.
    fn refine(&self, tape: &mut Tape, p: &BoundParams, z: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let z1 = masked_self_attention(tape, z, mask, p.get("refine.wq"), p.get("refine.wk"), p.get("refine.wv"))?;
        let f = tape.matmul(z1, p.get("refine.ff1.w"))?;
        let f = tape.add_row(f, p.get("refine.ff1.b"))?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, p.get("refine.ff2.w"))?;
        let f = tape.add_row(f, p.get("refine.ff2.b"))?;
        let out = tape.add(z1, f)?;
        match mask {
            Some(m) => {
                let col = tape.constant(DenseMatrix::from_fn(m.len(), 1, |i, _| if m[i] { 1.0 } else { 0.0 }));
                tape.mul_col(out, col)
            }
            None => Ok(out),
        }
    }

    /// Forward without gradients; returns offsets, routing and the heatmap values.
    pub fn predict_pair(&self, input: &PairInput<'_>) -> Result<Prediction, Error> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let f = self.forward(&mut tape, &p, input, None, false)?;
        let g = self.config.geometry();
        let heatmap = match f.heatmap {
            Some(y) => Some(Heatmap::from_column(g.h, g.w, tape.value(y))?),
            None => None,
        };
        Ok(Prediction {
            offsets: f.offsets(&tape),
            has_tokens: f.xy.is_some(),
            n_tokens: f.n_tokens,
            k: f.routing.k,
            heatmap,
            stats: f.stats,
        })
    }
}

fn head_branch(tape: &mut Tape, p: &BoundParams, pooled: Var, name: &str) -> Result<Var, TensorError> {
    let h = tape.matmul(pooled, p.get(&format!("{name}.fc1.w")))?;
    let h = tape.add_row(h, p.get(&format!("{name}.fc1.b")))?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, p.get(&format!("{name}.fc2.w")))?;
    tape.add_row(o, p.get(&format!("{name}.fc2.b")))
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub offsets: [f64; 4],
    pub has_tokens: bool,
    pub n_tokens: usize,
    pub k: usize,
    pub heatmap: Option<Heatmap>,
    pub stats: StageStats,
}

/// Moves `prev` by offsets expressed in its own frame.
pub fn apply_offsets(prev: &Box3D, offsets: [f64; 4]) -> Box3D {
    let local = Box3D {
        x: offsets[0],
        y: offsets[1],
        z: offsets[2],
        theta: wrap_angle(offsets[3]),
        ..*prev
    };
    Box3D::from_relative(&local, prev)
}

/// `[dx, dy, dz, dθ]` taking `prev` to `cur`, in `prev`'s frame.
pub fn target_offsets(prev: &Box3D, cur: &Box3D) -> [f64; 4] {
    let r = cur.relative_to(prev);
    [r.x, r.y, r.z, r.theta]
}

/// Ground-truth heatmap for a search crop centered on `prev`.
pub fn target_heatmap(prev: &Box3D, cur: &Box3D, geom: &GridGeometry) -> Heatmap {
    render_gt_heatmap(&[cur.relative_to(prev)], geom).0
}

fn smooth_l1_value(d: f64, beta: f64) -> f64 {
    let d = d.abs();
    if d < beta {
        0.5 * d * d / beta
    } else {
        d - 0.5 * beta
    }
}

/// Loss terms of one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub pred: f64,
    pub xy: f64,
    pub z: f64,
    pub rot: f64,
    pub track: f64,
}

/// Loss arithmetic on plain values.
pub fn compute_losses(
    pred: [f64; 4],
    gt: [f64; 4],
    y_pred: Option<&Heatmap>,
    m_gt: &Heatmap,
    w: &LossWeights,
) -> Result<LossComponents, TensorError> {
    let lp = match y_pred {
        Some(y) => sfp::sfp_loss(y, m_gt)?,
        None => 0.0,
    };
    let xy = (smooth_l1_value(pred[0] - gt[0], SMOOTH_L1_BETA) + smooth_l1_value(pred[1] - gt[1], SMOOTH_L1_BETA)) / 2.0;
    let z = smooth_l1_value(pred[2] - gt[2], SMOOTH_L1_BETA);
    let rot = smooth_l1_value(wrap_angle(pred[3] - gt[3]), SMOOTH_L1_BETA);
    let track = w.lambda1 * xy + w.lambda2 * z + w.lambda3 * rot;
    Ok(LossComponents {
        total: w.theta1 * lp + w.theta2 * track,
        pred: lp,
        xy,
        z,
        rot,
        track,
    })
}

/// Training target of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTarget {
    pub offsets: [f64; 4],
    pub heatmap: Heatmap,
}

/// Records the composite loss; returns the `1×1` total node.
pub fn loss_on_tape(
    tape: &mut Tape,
    f: &ForwardPass,
    target: &PairTarget,
    w: &LossWeights,
) -> Result<(Var, LossComponents), TensorError> {
    let mut parts = LossComponents::default();
    let mut total: Option<Var> = None;
    let add_term = |tape: &mut Tape, term: Var, weight: f64, total: &mut Option<Var>| -> Result<(), TensorError> {
        let scaled = tape.scale(term, weight)?;
        *total = Some(match *total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
        Ok(())
    };
    if let Some(y) = f.heatmap {
        let m = tape.constant(target.heatmap.to_column());
        let lp = tape.mse(y, m)?;
        parts.pred = tape.value(lp).get(0, 0);
        add_term(tape, lp, w.theta1, &mut total)?;
    }
    if let (Some(xy), Some(zr)) = (f.xy, f.zr) {
        let t = &target.offsets;
        let gxy = tape.constant(DenseMatrix::from_rows(&[&[t[0], t[1]]]));
        let lxy = tape.smooth_l1(xy, gxy, SMOOTH_L1_BETA)?;
        let pick_z = tape.constant(DenseMatrix::from_rows(&[&[1.0], &[0.0]]));
        let pick_r = tape.constant(DenseMatrix::from_rows(&[&[0.0], &[1.0]]));
        let pz = tape.matmul(zr, pick_z)?;
        let pr = tape.matmul(zr, pick_r)?;
        let gz = tape.constant(DenseMatrix::filled(1, 1, t[2]));
        let lz = tape.smooth_l1(pz, gz, SMOOTH_L1_BETA)?;
        // shift the target by whole turns so the residual is the wrapped one
        let pv = tape.value(pr).get(0, 0);
        let gr = tape.constant(DenseMatrix::filled(1, 1, pv - wrap_angle(pv - t[3])));
        let lr = tape.smooth_l1(pr, gr, SMOOTH_L1_BETA)?;
        let a = tape.scale(lxy, w.lambda1)?;
        let b = tape.scale(lz, w.lambda2)?;
        let c = tape.scale(lr, w.lambda3)?;
        let ab = tape.add(a, b)?;
        let track = tape.add(ab, c)?;
        parts.xy = tape.value(lxy).get(0, 0);
        parts.z = tape.value(lz).get(0, 0);
        parts.rot = tape.value(lr).get(0, 0);
        parts.track = tape.value(track).get(0, 0);
        add_term(tape, track, w.theta2, &mut total)?;
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(DenseMatrix::zeros(1, 1)),
    };
    parts.total = tape.value(total).get(0, 0);
    Ok((total, parts))
}

/// Per-frame diagnostics of a tracking run.
#[derive(Clone, Debug)]
pub struct FrameDiag {
    pub n_tokens: usize,
    pub k: usize,
    pub occupied: usize,
    /// Box held from the previous frame (empty crop or no tokens).
    pub held: bool,
    /// Occupancy entropy (bits) of the search grid, and of the selected cells only.
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub heatmap: Option<Heatmap>,
    pub stats: StageStats,
}

#[derive(Clone, Debug)]
pub struct TrackResult {
    /// One box per frame after the first.
    pub boxes: Vec<Box3D>,
    pub frames: Vec<FrameDiag>,
}

/// Tracks through `seq` from its first ground-truth box; the template stays fixed to frame 0.
pub fn infer_sequence(model: &Model, seq: &Sequence, keep_heatmaps: bool) -> Result<TrackResult, Error> {
    if seq.frames.len() < 2 || seq.gt_boxes.len() != seq.frames.len() {
        return Err(crate::error::DataError::Invalid("sequence needs ≥ 2 frames with one box each".into()).into());
    }
    let geom = model.config.geometry();
    let template = model.template_pillars(&seq.frames[0], &seq.gt_boxes[0]);
    let mut prev = seq.gt_boxes[0];
    let mut boxes = Vec::with_capacity(seq.frames.len() - 1);
    let mut frames = Vec::with_capacity(seq.frames.len() - 1);
    for (t, frame) in seq.frames.iter().enumerate().skip(1) {
        let crop = crop_search_region(frame, &prev, model.config.class);
        if crop.is_empty() {
            boxes.push(prev);
            frames.push(FrameDiag {
                n_tokens: 0,
                k: 0,
                occupied: 0,
                held: true,
                entropy_before: 0.0,
                entropy_after: 0.0,
                heatmap: None,
                stats: StageStats::default(),
            });
            continue;
        }
        let search = pillarize_raw(&crop, &geom);
        let pred = model.predict_pair(&PairInput {
            template: &template,
            search: &search,
            sample_seed: model.config.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        })?;
        let next = if pred.has_tokens { apply_offsets(&prev, pred.offsets) } else { prev };
        let h_fg = empirical_cell_entropy(&search);
        frames.push(FrameDiag {
            n_tokens: pred.n_tokens,
            k: if pred.has_tokens { pred.k } else { 0 },
            occupied: search.occupied_cells(),
            held: !pred.has_tokens,
            entropy_before: occupancy_entropy(geom.h, geom.w, search.occupied_cells(), h_fg),
            entropy_after: occupancy_entropy(geom.h, geom.w, pred.n_tokens, h_fg),
            heatmap: if keep_heatmaps { pred.heatmap } else { None },
            stats: pred.stats,
        });
        boxes.push(next);
        prev = next;
    }
    Ok(TrackResult { boxes, frames })
}

/// The zero-offset tracker: the first box repeated.
pub fn hold_first_box(seq: &Sequence) -> Vec<Box3D> {
    vec![seq.gt_boxes[0]; seq.gt_boxes.len().saturating_sub(1)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 16,
            lr: 1e-4,
            lr_decay_factor: 5.0,
            lr_decay_every: 20,
            weight_decay: 1e-4,
            weights: LossWeights::default(),
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = if self.lr_decay_every == 0 { 0 } else { epoch / self.lr_decay_every };
        self.lr / self.lr_decay_factor.powi(steps as i32)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch == 0 {
            return Err(ConfigError::invalid("batch", self.batch, "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::invalid("lr", self.lr, "must be finite and nonnegative"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(ConfigError::invalid("lr_decay_factor", self.lr_decay_factor, "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(ConfigError::invalid("weight_decay", self.weight_decay, "must be nonnegative"));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub pred: f64,
    pub track: f64,
    pub mean_k: f64,
    pub mean_n: f64,
    pub seconds: f64,
}

/// One (sequence, frame) training pair after augmentation and cropping.
struct PreparedPair {
    seq: usize,
    search: RawPillars,
    target: PairTarget,
    seed: u64,
}

fn prepare_pair(
    model: &Model,
    seq: &Sequence,
    seq_idx: usize,
    t: usize,
    draw: AugmentDraw,
    seed: u64,
) -> PreparedPair {
    let geom = model.config.geometry();
    let (prev, cur) = (seq.gt_boxes[t - 1], seq.gt_boxes[t]);
    let (points, cur) = augment_frame(&seq.frames[t], &cur, &draw);
    let prev = augment_frame(&PointCloud::default(), &prev, &AugmentDraw { flip: draw.flip, delta: 0.0 }).1;
    let crop = crop_search_region(&points, &prev, model.config.class);
    PreparedPair {
        seq: seq_idx,
        search: pillarize_raw(&crop, &geom),
        target: PairTarget {
            offsets: target_offsets(&prev, &cur),
            heatmap: target_heatmap(&prev, &cur, &geom),
        },
        seed,
    }
}

struct SampleOutcome {
    parts: LossComponents,
    grads: Vec<DenseMatrix>,
    k: usize,
    n: usize,
}

fn run_sample(model: &Model, template: &RawPillars, pair: &PreparedPair, w: &LossWeights) -> Result<SampleOutcome, Error> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let input = PairInput {
        template,
        search: &pair.search,
        sample_seed: pair.seed,
    };
    let f = model.forward(&mut tape, &p, &input, None, true)?;
    let (loss, parts) = loss_on_tape(&mut tape, &f, &pair.target, w)?;
    let mut g = tape.backward(loss, &DenseMatrix::filled(1, 1, 1.0))?;
    Ok(SampleOutcome {
        parts,
        grads: p.vars().iter().map(|&v| g.take(v)).collect(),
        k: f.routing.k,
        n: f.n_tokens,
    })
}

/// Runs the configured schedule; `on_epoch` sees each epoch's log and the updated model.
pub fn train(
    model: &mut Model,
    data: &[Sequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model),
) -> Result<Vec<EpochLog>, Error> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(crate::error::DataError::Invalid("training needs at least one sequence".into()).into());
    }
    let templates: Vec<RawPillars> = data
        .iter()
        .map(|s| model.template_pillars(&s.frames[0], &s.gt_boxes[0]))
        .collect();
    let index: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (1..seq.frames.len()).map(move |t| (s, t)))
        .collect();
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let clock = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order = index.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut sum, mut count) = (LossComponents::default(), 0usize);
        let (mut ksum, mut nsum) = (0usize, 0usize);

        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let pairs: Vec<PreparedPair> = chunk
                .iter()
                .map(|&(s, t)| {
                    let draw = if cfg.augment { AugmentDraw::sample(&mut rng) } else { AugmentDraw::IDENTITY };
                    let seed = rand::Rng::random::<u64>(&mut rng);
                    prepare_pair(model, &data[s], s, t, draw, seed)
                })
                .collect();
            let frozen: &Model = model;
            let outcomes: Vec<Result<SampleOutcome, Error>> = pairs
                .par_iter()
                .map(|pair| run_sample(frozen, &templates[pair.seq], pair, &cfg.weights))
                .collect();
            let mut grads: Vec<DenseMatrix> = model
                .params
                .values()
                .map(|v| DenseMatrix::zeros(v.rows(), v.cols()))
                .collect();
            for out in outcomes {
                let out = match out {
                    Ok(o) => o,
                    Err(Error::Tensor(TensorError::NonFinite { .. })) => {
                        return Err(Error::NonFiniteLoss { epoch, batch: b })
                    }
                    Err(e) => return Err(e),
                };
                if !out.parts.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                for (acc, g) in grads.iter_mut().zip(&out.grads) {
                    acc.add_assign(g);
                }
                sum.total += out.parts.total;
                sum.pred += out.parts.pred;
                sum.track += out.parts.track;
                ksum += out.k;
                nsum += out.n;
                count += 1;
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut() {
                *g = g.scale(scale);
                if !g.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
            }
            opt.step(&mut model.params, &grads, lr);
        }
        let n = count.max(1) as f64;
        let log = EpochLog {
            epoch,
            lr,
            loss: sum.total / n,
            pred: sum.pred / n,
            track: sum.track / n,
            mean_k: ksum as f64 / n,
            mean_n: nsum as f64 / n,
            seconds: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&log, model);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_sequence, SceneParams};

    fn small_config() -> ModelConfig {
        ModelConfig {
            grid_h: 16,
            grid_w: 16,
            channels: 8,
            pool_size: 8,
            ..ModelConfig::new(ObjectClass::Car)
        }
    }

    #[test]
    fn config_validation() {
        assert!(Model::new(ModelConfig { channels: 6, ..small_config() }).is_err());
        assert!(Model::new(ModelConfig { tau: 0.0, ..small_config() }).is_err());
        assert!(Model::new(ModelConfig { gamma: 1.0, ..small_config() }).is_err());
        let w = LossWeights {
            theta1: 0.0,
            theta2: 0.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn offsets_round_trip_through_boxes() {
        let prev = Box3D::new(3.0, -1.0, 0.8, 1.8, 1.6, 4.2, 2.9).unwrap();
        let cur = Box3D::new(4.1, -0.2, 0.85, 1.8, 1.6, 4.2, -3.1).unwrap();
        let back = apply_offsets(&prev, target_offsets(&prev, &cur));
        assert!((back.x - cur.x).abs() < 1e-12 && (back.y - cur.y).abs() < 1e-12 && (back.z - cur.z).abs() < 1e-12);
        assert!(wrap_angle(back.theta - cur.theta).abs() < 1e-12);
        assert_eq!(apply_offsets(&prev, [0.0; 4]), prev);
    }

    #[test]
    fn loss_examples() {
        let m = Heatmap::filled(2, 2, 0.3);
        let w = LossWeights::default();
        let perfect = compute_losses([0.1, 0.2, 0.0, 0.5], [0.1, 0.2, 0.0, 0.5], Some(&m), &m, &w).unwrap();
        assert_eq!(perfect.total, 0.0);

        let y = Heatmap::filled(2, 2, 0.8);
        let only_pred = LossWeights { theta2: 0.0, theta1: 0.7, ..w };
        let l = compute_losses([1.0, 2.0, 3.0, 4.0], [0.0; 4], Some(&y), &m, &only_pred).unwrap();
        assert_eq!(l.total, 0.7 * l.pred);

        let pi = std::f64::consts::PI;
        let l = compute_losses([0.0, 0.0, 0.0, pi - 0.1], [0.0, 0.0, 0.0, -pi + 0.1], None, &m, &w).unwrap();
        assert!((l.rot - 0.5 * 0.2 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        let model = Model::new(small_config()).unwrap();
        let seq = generate_sequence(&SceneParams::new(3, 3, ObjectClass::Car)).unwrap();
        let template = model.template_pillars(&seq.frames[0], &seq.gt_boxes[0]);
        let pair = prepare_pair(&model, &seq, 0, 2, AugmentDraw::IDENTITY, 1);
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let input = PairInput {
            template: &template,
            search: &pair.search,
            sample_seed: 1,
        };
        let f = model.forward(&mut tape, &p, &input, None, true).unwrap();
        let pi = std::f64::consts::PI;
        let mut target = pair.target.clone();
        target.offsets[3] = pi - 0.05;
        let w = LossWeights {
            lambda1: 0.5,
            lambda2: 2.0,
            lambda3: 1.5,
            theta1: 3.0,
            theta2: 0.25,
        };
        let (_, parts) = loss_on_tape(&mut tape, &f, &target, &w).unwrap();
        let y = Heatmap::from_column(16, 16, tape.value(f.heatmap.unwrap())).unwrap();
        let want = compute_losses(f.offsets(&tape), target.offsets, Some(&y), &target.heatmap, &w).unwrap();
        assert!((parts.total - want.total).abs() < 1e-12);
        assert!((parts.rot - want.rot).abs() < 1e-12);
    }

    #[test]
    fn zero_offset_model_repeats_first_box() {
        let mut model = Model::new(small_config()).unwrap();
        for name in ["head.xy.fc2.w", "head.xy.fc2.b", "head.zr.fc2.w", "head.zr.fc2.b"] {
            let v = model.params.get_mut(name).unwrap();
            *v = DenseMatrix::zeros(v.rows(), v.cols());
        }
        let seq = generate_sequence(&SceneParams::new(4, 6, ObjectClass::Car)).unwrap();
        let out = infer_sequence(&model, &seq, false).unwrap();
        assert_eq!(out.boxes, hold_first_box(&seq));
    }

    #[test]
    fn empty_frames_hold_last_box() {
        let model = Model::new(small_config()).unwrap();
        let mut seq = generate_sequence(&SceneParams::new(5, 6, ObjectClass::Car)).unwrap();
        seq.frames[2] = PointCloud::default();
        seq.frames[3] = PointCloud::default();
        let out = infer_sequence(&model, &seq, false).unwrap();
        assert_eq!(out.boxes.len(), 5);
        assert_eq!(out.boxes[1], out.boxes[0]);
        assert_eq!(out.boxes[2], out.boxes[0]);
        assert!(out.frames[1].held && out.frames[2].held);
    }

    #[test]
    fn zero_learning_rate_epoch_keeps_parameters() {
        let mut model = Model::new(small_config()).unwrap();
        let before = model.params.to_ctk1_bytes();
        let data: Vec<Sequence> = (0..2)
            .map(|s| generate_sequence(&SceneParams::new(s, 3, ObjectClass::Car)).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch: 2,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let logs = train(&mut model, &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(logs.len(), 1);
        assert_eq!(model.params.to_ctk1_bytes(), before);
    }

    #[test]
    fn lr_schedule_steps_down() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(19), 1e-4);
        assert!((cfg.lr_at(20) - 2e-5).abs() < 1e-20);
        assert!((cfg.lr_at(45) - 4e-6).abs() < 1e-20);
    }
}
