//! Rank-guided token compression.
//!
//! Foreground cells become tokens, receive a fixed sinusoidal position code,
//! and are summarized by `K` proxy tokens, where `K` is the effective rank of
//! the token matrix. The `K` active queries come from a learnable pool,
//! optionally fused with the leading right singular vectors. Training runs on
//! `L`-row padded tensors with a leading-`K` mask; inference slices to `K` rows.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::bev::BevGrid;
use crate::error::{ConfigError, Error, TensorError};
use crate::linalg::{effective_rank_clamped, svd_thin, RankEstimate, SingularSpectrum};
use crate::sfp::Heatmap;
use crate::tensor::DenseMatrix;

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_N_MAX: usize = 512;
pub const DEFAULT_POOL_SIZE: usize = 128;
/// Minimum token count taken when too few cells clear the threshold.
pub const FALLBACK_TOKENS: usize = 8;
/// Raster stride of the uniform-grid baseline.
pub const UNIFORM_STRIDE: usize = 8;
/// Query count of the fixed-K baseline (capped by the pool size).
pub const FIXED_K: usize = 128;

/// How active queries combine the learnable pool with the SVD prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Addition,
    LearnableOnly,
    SvdOnly,
    ConcatLinear,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Addition,
        FusionMode::LearnableOnly,
        FusionMode::SvdOnly,
        FusionMode::ConcatLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Addition => "addition",
            FusionMode::LearnableOnly => "learnable_only",
            FusionMode::SvdOnly => "svd_only",
            FusionMode::ConcatLinear => "concat_linear",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ConfigError::invalid("fusion_mode", s, "expected addition, learnable_only, svd_only or concat_linear"))
    }
}

/// Token reduction strategy: the rank-guided compressor, a naïve baseline, or none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Compression {
    Dynamic(FusionMode),
    UniformGrid,
    RandomDrop,
    FixedK,
    /// All `N` tokens go straight to the downstream attention.
    Uncompressed,
}

impl Compression {
    pub const BASELINES: [Compression; 3] = [Compression::UniformGrid, Compression::RandomDrop, Compression::FixedK];

    pub fn name(self) -> &'static str {
        match self {
            Compression::Dynamic(m) => m.name(),
            Compression::UniformGrid => "uniform_grid_1_8",
            Compression::RandomDrop => "random_drop_75",
            Compression::FixedK => "fixed_k_128",
            Compression::Uncompressed => "uncompressed",
        }
    }

    /// Whether the strategy reads the SVD at all.
    pub fn uses_rank(self) -> bool {
        matches!(self, Compression::Dynamic(_))
    }
}

impl fmt::Display for Compression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Compression {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform_grid_1_8" => Ok(Compression::UniformGrid),
            "random_drop_75" => Ok(Compression::RandomDrop),
            "fixed_k_128" => Ok(Compression::FixedK),
            "uncompressed" => Ok(Compression::Uncompressed),
            other => other.parse::<FusionMode>().map(Compression::Dynamic).map_err(|_| {
                ConfigError::invalid(
                    "compression",
                    other,
                    "expected a fusion mode, uniform_grid_1_8, random_drop_75, fixed_k_128 or uncompressed",
                )
            }),
        }
    }
}

/// Whether SVD query rows are unit vectors or scaled by their singular value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SvdRowScaling {
    Unit,
    Sigma,
}

impl FromStr for SvdRowScaling {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unit" => Ok(SvdRowScaling::Unit),
            "sigma" => Ok(SvdRowScaling::Sigma),
            other => Err(ConfigError::invalid("svd_row_scaling", other, "expected unit or sigma")),
        }
    }
}

/// Foreground tokens with their cell coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `N × C`.
    pub tokens: DenseMatrix,
    /// `(row, col)` cell index per token.
    pub coords: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// `tokens + PE(coords)`.
    pub fn with_positional_encoding(&self, h: usize, w: usize) -> Result<TokenSequence, TensorError> {
        let pe = positional_encoding(&self.coords, self.tokens.cols(), h, w)?;
        Ok(TokenSequence {
            tokens: self.tokens.add(&pe)?,
            coords: self.coords.clone(),
        })
    }
}

/// Occupied cells ranked by descending score (ties by cell index), thresholded at `gamma`
/// and truncated to `n_max`; falls back to the top [`FALLBACK_TOKENS`] when too few qualify.
pub fn select_foreground_cells(occupancy: &[bool], scores: &[f64], gamma: f64, n_max: usize) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..occupancy.len()).filter(|&i| occupancy[i]).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let passing = ranked.iter().take_while(|&&i| scores[i] >= gamma).count();
    let keep = if passing < FALLBACK_TOKENS {
        FALLBACK_TOKENS.min(ranked.len())
    } else {
        passing
    };
    ranked.truncate(keep.min(n_max));
    ranked
}

pub fn extract_foreground_tokens(f_hat: &BevGrid, y: &Heatmap, gamma: f64, n_max: usize) -> TokenSequence {
    let cells = select_foreground_cells(&f_hat.occupancy, &y.values, gamma, n_max);
    let w = f_hat.geometry.w;
    TokenSequence {
        tokens: f_hat.features.select_rows(&cells),
        coords: cells.iter().map(|&c| (c / w, c % w)).collect(),
    }
}

/// Wavelengths (in cells) of the per-axis sinusoids, geometric from 2 to `2·max(H, W)`.
pub fn pe_wavelengths(c: usize, h: usize, w: usize) -> Vec<f64> {
    let per_axis = c / 2;
    let n = per_axis.div_ceil(2).max(1);
    let top = 2.0 * h.max(w) as f64;
    (0..n)
        .map(|f| {
            if n == 1 {
                2.0
            } else {
                2.0 * (top / 2.0).powf(f as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// Sinusoidal code: channels `[0, C/2)` encode the row, `[C/2, C)` the column.
/// Even channels are sines, odd channels cosines; the frequency index is the
/// offset within the axis block divided by two.
pub fn positional_encoding(coords: &[(usize, usize)], c: usize, h: usize, w: usize) -> Result<DenseMatrix, TensorError> {
    if c % 2 != 0 || c == 0 {
        return Err(TensorError::invalid("positional_encoding", format!("channel count {c} must be even")));
    }
    let lambdas = pe_wavelengths(c, h, w);
    let half = c / 2;
    let mut pe = DenseMatrix::zeros(coords.len(), c);
    for (n, &(r, col)) in coords.iter().enumerate() {
        let row = pe.row_mut(n);
        for (ch, slot) in row.iter_mut().enumerate() {
            let (pos, off) = if ch < half { (r, ch) } else { (col, ch - half) };
            let angle = 2.0 * std::f64::consts::PI * pos as f64 / lambdas[off / 2];
            *slot = if ch % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(pe)
}

/// Effective rank and SVD query rows of one token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdQueries {
    pub k: usize,
    /// `None` for an empty token set (degenerate path, `k = 1`).
    pub rank: Option<RankEstimate>,
    /// `k × C`; zeros on the degenerate path.
    pub q_svd: DenseMatrix,
    pub spectrum: Option<SingularSpectrum>,
}

pub fn svd_queries(x: &DenseMatrix, tau: f64, limit: usize, scaling: SvdRowScaling) -> Result<SvdQueries, Error> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(ConfigError::invalid("tau", tau, "must lie in (0, 1]").into());
    }
    if x.rows() == 0 {
        return Ok(SvdQueries {
            k: 1,
            rank: None,
            q_svd: DenseMatrix::zeros(1, x.cols()),
            spectrum: None,
        });
    }
    let spectrum = svd_thin(x)?;
    let rank = effective_rank_clamped(&spectrum, tau, limit)?;
    let mut q = spectrum.leading_rows(rank.k);
    if q.rows() < rank.k {
        // More rows requested than the basis has; cannot happen for C ≥ K, kept total anyway.
        let mut padded = DenseMatrix::zeros(rank.k, x.cols());
        for r in 0..q.rows() {
            padded.row_mut(r).copy_from_slice(q.row(r));
        }
        q = padded;
    }
    if scaling == SvdRowScaling::Sigma {
        for r in 0..q.rows() {
            let s = spectrum.values.get(r).copied().unwrap_or(0.0);
            for v in q.row_mut(r) {
                *v *= s;
            }
        }
    }
    Ok(SvdQueries {
        k: rank.k,
        rank: Some(rank),
        q_svd: q,
        spectrum: Some(spectrum),
    })
}

/// Leading-`k` mask of length `l`.
pub fn leading_mask(k: usize, l: usize) -> Result<Vec<bool>, TensorError> {
    if k == 0 || k > l {
        return Err(TensorError::invalid("adaptive_mask", format!("K = {k} outside 1..={l}")));
    }
    Ok((0..l).map(|i| i < k).collect())
}

/// Token rows kept by the uniform-grid baseline, in raster order: every
/// [`UNIFORM_STRIDE`]-th token after sorting by cell index.
pub fn uniform_grid_keep(coords: &[(usize, usize)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&i| coords[i]);
    order.into_iter().step_by(UNIFORM_STRIDE).collect()
}

/// Seeded 25% retention (at least one token when any exist), sorted ascending.
pub fn random_drop_keep(n: usize, seed: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let keep = n.div_ceil(4);
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Active queries on the tape.
///
/// With `padded_to = Some(L)` the result has `L` rows: the whole pool plus
/// `q_svd` zero-padded to `L` rows, of which only the first `k` are meaningful.
/// `q_svd` enters as a constant, so no derivative flows into the SVD.
pub fn active_queries(
    tape: &mut Tape,
    pool: Var,
    fuse: Option<(Var, Var)>,
    q_svd: &DenseMatrix,
    k: usize,
    mode: FusionMode,
    padded_to: Option<usize>,
) -> Result<Var, TensorError> {
    let (l, c) = tape.shape(pool);
    if k == 0 || k > l || q_svd.rows() != k || q_svd.cols() != c {
        return Err(TensorError::invalid(
            "active_queries",
            format!("K = {k}, pool {l}x{c}, svd rows {:?}", q_svd.shape()),
        ));
    }
    let rows = padded_to.unwrap_or(k);
    if rows < k || rows > l {
        return Err(TensorError::invalid("active_queries", format!("padding {rows} outside {k}..={l}")));
    }
    let learn = if rows == l { pool } else { tape.slice_rows(pool, 0, rows)? };
    let svd = {
        let mut m = DenseMatrix::zeros(rows, c);
        for r in 0..k {
            m.row_mut(r).copy_from_slice(q_svd.row(r));
        }
        tape.constant(m)
    };
    match mode {
        FusionMode::Addition => tape.add(learn, svd),
        FusionMode::LearnableOnly => Ok(learn),
        FusionMode::SvdOnly => Ok(svd),
        FusionMode::ConcatLinear => {
            let (w, b) = fuse.ok_or_else(|| TensorError::invalid("active_queries", "concat_linear needs fusion weights"))?;
            let cat = tape.concat_cols(learn, svd)?;
            let lin = tape.matmul(cat, w)?;
            tape.add_row(lin, b)
        }
    }
}

/// `softmax(Q·W_q·(X·W_k)ᵀ/√C)·X·W_v`.
pub fn cross_attention(tape: &mut Tape, q: Var, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var, TensorError> {
    let c = tape.shape(wq).1;
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(x, wk)?;
    let kt = tape.transpose(kp)?;
    let s = tape.matmul(qp, kt)?;
    let s = tape.scale(s, 1.0 / (c as f64).sqrt())?;
    let p = tape.softmax_rows(s, None)?;
    let v = tape.matmul(x, wv)?;
    tape.matmul(p, v)
}

/// Multiply-accumulates of [`cross_attention`] with `k` queries over `n` tokens.
pub fn cross_attention_macs(k: usize, n: usize, c: usize) -> u64 {
    (k * c * c + 2 * n * c * c + 2 * k * n * c) as u64
}

/// Residual single-head self-attention; masked keys are excluded and masked rows zeroed.
pub fn masked_self_attention(
    tape: &mut Tape,
    z: Var,
    mask: Option<&[bool]>,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<Var, TensorError> {
    let c = tape.shape(wq).1;
    let qp = tape.matmul(z, wq)?;
    let kp = tape.matmul(z, wk)?;
    let kt = tape.transpose(kp)?;
    let s = tape.matmul(qp, kt)?;
    let s = tape.scale(s, 1.0 / (c as f64).sqrt())?;
    let p = tape.softmax_rows(s, mask)?;
    let v = tape.matmul(z, wv)?;
    let a = tape.matmul(p, v)?;
    let out = tape.add(z, a)?;
    match mask {
        Some(m) => {
            let col = tape.constant(mask_column(m));
            tape.mul_col(out, col)
        }
        None => Ok(out),
    }
}

/// Multiply-accumulates of [`masked_self_attention`] over `n` rows.
pub fn self_attention_macs(n: usize, c: usize) -> u64 {
    (3 * n * c * c + 2 * n * n * c) as u64
}

/// Mean over unmasked rows, `1 × C`.
pub fn masked_mean_pool(tape: &mut Tape, z: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
    let n = tape.shape(z).0;
    let active = mask.map_or(n, |m| m.iter().filter(|&&b| b).count());
    if active == 0 {
        return Err(TensorError::invalid("masked_mean_pool", "no active rows"));
    }
    if mask.is_some_and(|m| m.len() != n) {
        return Err(TensorError::shape("masked_mean_pool", (n, 1), (mask.unwrap().len(), 1)));
    }
    let weight = 1.0 / active as f64;
    let row = DenseMatrix::from_fn(1, n, |_, j| if mask.is_none_or(|m| m[j]) { weight } else { 0.0 });
    let r = tape.constant(row);
    tape.matmul(r, z)
}

fn mask_column(mask: &[bool]) -> DenseMatrix {
    DenseMatrix::from_fn(mask.len(), 1, |i, _| if mask[i] { 1.0 } else { 0.0 })
}

/// Value-level result of rank-guided compression for one token set.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionResult {
    pub k: usize,
    /// `K × C`.
    pub active_queries: DenseMatrix,
    /// `K × C`; zeros when the token set was empty.
    pub proxy: DenseMatrix,
    /// Length `L`, first `K` true.
    pub mask: Vec<bool>,
    pub q_svd: DenseMatrix,
    pub degenerate: bool,
}

/// Learned attention weights for [`compress`].
#[derive(Clone, Debug)]
pub struct AttentionWeights<'a> {
    pub pool: &'a DenseMatrix,
    pub fuse: Option<(&'a DenseMatrix, &'a DenseMatrix)>,
    pub wq: &'a DenseMatrix,
    pub wk: &'a DenseMatrix,
    pub wv: &'a DenseMatrix,
}

/// Rank estimation, query construction and cross-attention on plain values.
pub fn compress(
    tokens: &DenseMatrix,
    weights: &AttentionWeights<'_>,
    tau: f64,
    mode: FusionMode,
    scaling: SvdRowScaling,
) -> Result<CompressionResult, Error> {
    let l = weights.pool.rows();
    let sq = svd_queries(tokens, tau, l, scaling)?;
    let mut q_svd = sq.q_svd;
    if mode == FusionMode::LearnableOnly {
        q_svd = DenseMatrix::zeros(sq.k, tokens.cols());
    }
    let mut tape = Tape::new();
    let pool = tape.constant(weights.pool.clone());
    let fuse = weights.fuse.map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone())));
    let q = active_queries(&mut tape, pool, fuse, &q_svd, sq.k, mode, None)?;
    let active = tape.value(q).clone();
    let degenerate = tokens.rows() == 0;
    let proxy = if degenerate {
        DenseMatrix::zeros(sq.k, tokens.cols())
    } else {
        let x = tape.constant(tokens.clone());
        let wq = tape.constant(weights.wq.clone());
        let wk = tape.constant(weights.wk.clone());
        let wv = tape.constant(weights.wv.clone());
        let p = cross_attention(&mut tape, q, x, wq, wk, wv)?;
        tape.value(p).clone()
    };
    Ok(CompressionResult {
        k: sq.k,
        active_queries: active,
        proxy,
        mask: leading_mask(sq.k, l)?,
        q_svd,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn names_round_trip() {
        for m in FusionMode::ALL {
            assert_eq!(m.name().parse::<FusionMode>().unwrap(), m);
            assert_eq!(m.name().parse::<Compression>().unwrap(), Compression::Dynamic(m));
        }
        for b in Compression::BASELINES {
            assert_eq!(b.name().parse::<Compression>().unwrap(), b);
        }
        assert!("median".parse::<Compression>().is_err());
    }

    #[test]
    fn gamma_zero_selects_all_occupied() {
        let occ = vec![true, false, true, true, false, true];
        let scores = vec![0.1, 0.9, 0.0, 0.5, 0.2, 0.3];
        let got = select_foreground_cells(&occ, &scores, 0.0, usize::MAX);
        assert_eq!(got, vec![3, 5, 0, 2]);
    }

    #[test]
    fn fallback_takes_top_eight() {
        let occ = vec![true; 20];
        let scores = vec![0.0; 20];
        let got = select_foreground_cells(&occ, &scores, 0.1, 512);
        assert_eq!(got, (0..8).collect::<Vec<_>>());
        assert!(select_foreground_cells(&[false; 5], &[0.9; 5], 0.1, 512).is_empty());
    }

    #[test]
    fn selection_matches_filter_sort_truncate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..300);
            let occ: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 20.0).floor() / 20.0).collect();
            let gamma = rng.random_range(0.0..0.9);
            let n_max = rng.random_range(1..60);
            let got = select_foreground_cells(&occ, &scores, gamma, n_max);

            let mut pass: Vec<usize> = (0..n).filter(|&i| occ[i] && scores[i] >= gamma).collect();
            let mut all: Vec<usize> = (0..n).filter(|&i| occ[i]).collect();
            let key = |i: &usize| (std::cmp::Reverse((scores[*i] * 1e6) as i64), *i);
            pass.sort_by_key(key);
            all.sort_by_key(key);
            let mut want = if pass.len() < FALLBACK_TOKENS {
                all.into_iter().take(FALLBACK_TOKENS).collect::<Vec<_>>()
            } else {
                pass
            };
            want.truncate(n_max);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn origin_code_is_sin_cos_pattern() {
        let pe = positional_encoding(&[(0, 0)], 16, 32, 32).unwrap();
        for c in 0..16 {
            assert_eq!(pe.get(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(positional_encoding(&[(0, 0)], 7, 4, 4).is_err());
    }

    #[test]
    fn code_matches_wavelength_formula() {
        let (c, h, w) = (16, 32, 24);
        let coords = [(3, 17), (31, 0), (10, 10), (3, 17)];
        let pe = positional_encoding(&coords, c, h, w).unwrap();
        let freqs = c / 4;
        for (n, &(r, col)) in coords.iter().enumerate() {
            for ch in 0..c {
                let (pos, off) = if ch < c / 2 { (r, ch) } else { (col, ch - c / 2) };
                let f = off / 2;
                let lambda = 2.0 * (64.0f64 / 2.0).powf(f as f64 / (freqs - 1) as f64);
                let a = 2.0 * std::f64::consts::PI * pos as f64 / lambda;
                let want = if ch % 2 == 0 { a.sin() } else { a.cos() };
                assert!((pe.get(n, ch) - want).abs() < 1e-12);
            }
        }
        assert_eq!(pe.row(0), pe.row(3));
        let l = pe_wavelengths(c, h, w);
        assert_eq!(l[0], 2.0);
        assert!((l[l.len() - 1] - 64.0).abs() < 1e-9);
    }

    #[test]
    fn rank_one_tokens_give_k_one() {
        let base = [1.0, -2.0, 0.5, 3.0];
        let x = DenseMatrix::from_fn(30, 4, |i, j| (i as f64 + 1.0) * base[j]);
        let q = svd_queries(&x, 0.99, 128, SvdRowScaling::Unit).unwrap();
        assert_eq!(q.k, 1);
        assert!(svd_queries(&x, 1.5, 128, SvdRowScaling::Unit).is_err());
        assert!(matches!(
            svd_queries(&x, 0.0, 128, SvdRowScaling::Unit),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_tokens_take_degenerate_path() {
        let q = svd_queries(&DenseMatrix::zeros(0, 6), 0.99, 16, SvdRowScaling::Unit).unwrap();
        assert_eq!(q.k, 1);
        assert!(q.rank.is_none());
        assert!(q.q_svd.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigma_scaling_multiplies_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::uniform(20, 5, -1.0, 1.0, &mut rng);
        let u = svd_queries(&x, 1.0, 16, SvdRowScaling::Unit).unwrap();
        let s = svd_queries(&x, 1.0, 16, SvdRowScaling::Sigma).unwrap();
        let sigma = &u.spectrum.as_ref().unwrap().values;
        for r in 0..u.k {
            for c in 0..5 {
                assert!((s.q_svd.get(r, c) - sigma[r] * u.q_svd.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_grid_keeps_every_eighth() {
        let coords: Vec<(usize, usize)> = (0..64).map(|i| (i / 8, i % 8)).collect();
        assert_eq!(uniform_grid_keep(&coords), (0..64).step_by(8).collect::<Vec<_>>());
        // input order does not matter, output follows raster order
        let mut rev = coords.clone();
        rev.reverse();
        let kept: Vec<(usize, usize)> = uniform_grid_keep(&rev).into_iter().map(|i| rev[i]).collect();
        assert_eq!(kept, (0..64).step_by(8).map(|i| coords[i]).collect::<Vec<_>>());
    }

    #[test]
    fn random_drop_is_seeded() {
        assert_eq!(random_drop_keep(100, 7), random_drop_keep(100, 7));
        assert_eq!(random_drop_keep(100, 7).len(), 25);
        assert_ne!(random_drop_keep(100, 7), random_drop_keep(100, 8));
        assert_eq!(random_drop_keep(3, 1).len(), 1);
        assert!(random_drop_keep(0, 1).is_empty());
    }

    #[test]
    fn mask_is_leading() {
        assert_eq!(leading_mask(2, 4).unwrap(), vec![true, true, false, false]);
        assert!(leading_mask(5, 4).is_err());
        assert!(leading_mask(0, 4).is_err());
    }

    fn weights(c: usize, l: usize, rng: &mut ChaCha8Rng) -> [DenseMatrix; 6] {
        [
            DenseMatrix::uniform(l, c, -0.5, 0.5, rng),
            DenseMatrix::uniform(2 * c, c, -0.5, 0.5, rng),
            DenseMatrix::uniform(1, c, -0.5, 0.5, rng),
            DenseMatrix::uniform(c, c, -0.5, 0.5, rng),
            DenseMatrix::uniform(c, c, -0.5, 0.5, rng),
            DenseMatrix::uniform(c, c, -0.5, 0.5, rng),
        ]
    }

    #[test]
    fn learnable_only_uses_pool_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let [pool, fw, fb, wq, wk, wv] = weights(6, 10, &mut rng);
        let aw = AttentionWeights {
            pool: &pool,
            fuse: Some((&fw, &fb)),
            wq: &wq,
            wk: &wk,
            wv: &wv,
        };
        let x = DenseMatrix::uniform(40, 6, -1.0, 1.0, &mut rng);
        let r = compress(&x, &aw, 0.9, FusionMode::LearnableOnly, SvdRowScaling::Unit).unwrap();
        assert_eq!(r.active_queries, pool.slice_rows(0, r.k));
        // prefix property across K
        let r2 = compress(&x, &aw, 0.5, FusionMode::LearnableOnly, SvdRowScaling::Unit).unwrap();
        let kk = r.k.min(r2.k);
        assert_eq!(r.active_queries.slice_rows(0, kk), r2.active_queries.slice_rows(0, kk));
        let add = compress(&x, &aw, 0.9, FusionMode::Addition, SvdRowScaling::Unit).unwrap();
        assert!(add.active_queries.max_abs_diff(&pool.slice_rows(0, add.k).add(&add.q_svd).unwrap()) == 0.0);
        let svd = compress(&x, &aw, 0.9, FusionMode::SvdOnly, SvdRowScaling::Unit).unwrap();
        assert_eq!(svd.active_queries, svd.q_svd);
        assert_eq!(svd.mask.iter().filter(|&&b| b).count(), svd.k);
    }

    #[test]
    fn single_token_proxy_is_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let [pool, _, _, wq, wk, wv] = weights(4, 8, &mut rng);
        let aw = AttentionWeights {
            pool: &pool,
            fuse: None,
            wq: &wq,
            wk: &wk,
            wv: &wv,
        };
        let x = DenseMatrix::uniform(1, 4, -1.0, 1.0, &mut rng);
        let r = compress(&x, &aw, 0.99, FusionMode::Addition, SvdRowScaling::Unit).unwrap();
        let v = x.matmul(&wv).unwrap();
        for k in 0..r.k {
            for c in 0..4 {
                assert!((r.proxy.get(k, c) - v.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_projections_give_mean_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let [pool, _, _, _, _, wv] = weights(4, 8, &mut rng);
        let zero = DenseMatrix::zeros(4, 4);
        let aw = AttentionWeights {
            pool: &pool,
            fuse: None,
            wq: &zero,
            wk: &zero,
            wv: &wv,
        };
        let x = DenseMatrix::uniform(12, 4, -1.0, 1.0, &mut rng);
        let r = compress(&x, &aw, 0.99, FusionMode::Addition, SvdRowScaling::Unit).unwrap();
        let v = x.matmul(&wv).unwrap();
        for c in 0..4 {
            let mean = (0..12).map(|n| v.get(n, c)).sum::<f64>() / 12.0;
            for k in 0..r.k {
                assert!((r.proxy.get(k, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (k, n, c) = (5, 17, 6);
        let q = DenseMatrix::uniform(k, c, -1.0, 1.0, &mut rng);
        let x = DenseMatrix::uniform(n, c, -1.0, 1.0, &mut rng);
        let [_, _, _, wq, wk, wv] = weights(c, 8, &mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&q, &x, &wq, &wk, &wv].iter().map(|m| tape.constant((*m).clone())).collect();
        let before = tape.macs();
        let out = cross_attention(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();
        assert_eq!(tape.macs() - before, cross_attention_macs(k, n, c));

        let qp = q.matmul(&wq).unwrap();
        let kp = x.matmul(&wk).unwrap();
        let vp = x.matmul(&wv).unwrap();
        for i in 0..k {
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                for t in 0..c {
                    *l += qp.get(i, t) * kp.get(j, t);
                }
                *l /= (c as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            assert!((e.iter().map(|v| v / z).sum::<f64>() - 1.0).abs() < 1e-9);
            for t in 0..c {
                let want: f64 = (0..n).map(|j| e[j] / z * vp.get(j, t)).sum();
                assert!((tape.value(out).get(i, t) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svd_prior_is_a_constant_on_the_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = DenseMatrix::uniform(20, 4, -1.0, 1.0, &mut rng);
        let sq = svd_queries(&x, 0.99, 8, SvdRowScaling::Unit).unwrap();
        let mut tape = Tape::new();
        let pool = tape.param(DenseMatrix::uniform(8, 4, -1.0, 1.0, &mut rng));
        let q = active_queries(&mut tape, pool, None, &sq.q_svd, sq.k, FusionMode::SvdOnly, None).unwrap();
        assert!(!tape.requires_grad(q));
        let q = active_queries(&mut tape, pool, None, &sq.q_svd, sq.k, FusionMode::Addition, None).unwrap();
        assert!(tape.requires_grad(q));
    }
}
