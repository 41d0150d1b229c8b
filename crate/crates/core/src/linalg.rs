//! Thin SVD by one-sided Jacobi rotations, plus the energy-based rank rule.
//!
//! Only the singular values and right singular vectors are produced; the left
//! factor is never needed downstream.

use crate::error::LinalgError;
use crate::tensor::DenseMatrix;

/// Sweep limit for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 30;
/// Convergence threshold on the largest normalized column correlation.
pub const CONVERGENCE_TOL: f64 = 1e-12;

/// Singular values (descending) and right singular vectors of an `N×C` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SingularSpectrum {
    /// `min(N, C)` values, sorted descending, all nonnegative.
    pub values: Vec<f64>,
    /// `C×C`; row `i` is the right singular vector paired with `values[i]`
    /// (rows past `min(N, C)` complete an orthonormal basis).
    pub right_basis: DenseMatrix,
    /// Sweeps the Jacobi iteration used.
    pub sweeps: usize,
}

impl SingularSpectrum {
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|s| s * s).sum()
    }

    /// First `k` rows of the right basis.
    pub fn leading_rows(&self, k: usize) -> DenseMatrix {
        self.right_basis.slice_rows(0, k.min(self.right_basis.rows()))
    }
}

/// Thin SVD via one-sided Jacobi.
///
/// Sign convention: in each right singular vector the first entry with
/// magnitude above `1e-12` is nonnegative. Equal singular values are ordered
/// by ascending lexicographic order of their vectors.
pub fn svd_thin(x: &DenseMatrix) -> Result<SingularSpectrum, LinalgError> {
    let (n, c) = x.shape();
    if n == 0 || c == 0 {
        return Err(LinalgError::Empty);
    }
    if !x.is_finite() {
        return Err(LinalgError::NonFinite);
    }

    // Work column-major: columns of X are rotated in place, V accumulates the rotations.
    let mut cols: Vec<Vec<f64>> = (0..c).map(|j| (0..n).map(|i| x.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..c)
        .map(|j| (0..c).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let total = x.frobenius_sq();
    // Columns below this squared norm are numerically zero and skipped.
    let negligible = (total * 1e-30).max(f64::MIN_POSITIVE);

    let mut sweeps = 0;
    let mut off = 0.0;
    let mut converged = c == 1;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        off = 0.0;
        for p in 0..c - 1 {
            for q in p + 1..c {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (u, w) in cp.iter().zip(cq) {
                        a += u * u;
                        b += w * w;
                        g += u * w;
                    }
                    (a, b, g)
                };
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let corr = gamma.abs() / (alpha * beta).sqrt();
                off = f64::max(off, corr);
                if corr < CONVERGENCE_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate(&mut cols, p, q, cs, sn);
                rotate(&mut v, p, q, cs, sn);
            }
        }
        converged = off < CONVERGENCE_TOL;
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            sweeps,
            off_diagonal: off,
        });
    }

    let mut pairs: Vec<(f64, Vec<f64>)> = cols
        .iter()
        .zip(v)
        .map(|(col, mut vec)| {
            let sigma = col.iter().map(|u| u * u).sum::<f64>().sqrt();
            if let Some(first) = vec.iter().find(|e| e.abs() > 1e-12).copied() {
                if first < 0.0 {
                    vec.iter_mut().for_each(|e| *e = -*e);
                }
            }
            (sigma, vec)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| lexicographic(&a.1, &b.1)));
    // Runs of (numerically) equal values are re-sorted by vector alone.
    let tie = 1e-12 * pairs.first().map_or(0.0, |p| p.0);
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && pairs[start].0 - pairs[end].0 <= tie {
            end += 1;
        }
        pairs[start..end].sort_by(|a, b| lexicographic(&a.1, &b.1));
        start = end;
    }

    let rank_slots = n.min(c);
    let values = pairs.iter().take(rank_slots).map(|p| p.0).collect();
    let mut right_basis = DenseMatrix::zeros(c, c);
    for (i, (_, vec)) in pairs.iter().enumerate() {
        right_basis.row_mut(i).copy_from_slice(vec);
    }
    Ok(SingularSpectrum {
        values,
        right_basis,
        sweeps,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, cs: f64, sn: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (u, w) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*u, *w);
        *u = cs * a - sn * b;
        *w = sn * a + cs * b;
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Outcome of the cumulative-energy rank rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankEstimate {
    /// Rank after clamping.
    pub k: usize,
    /// Rank before clamping to the query pool.
    pub unclamped: usize,
    /// The spectrum had zero energy; `k` was set to 1 by convention.
    pub degenerate: bool,
    /// `unclamped` exceeded the limit.
    pub clamped: bool,
}

/// Smallest `K` with `Σ_{i≤K} σᵢ² ≥ τ Σⱼ σⱼ²`.
pub fn effective_rank(spectrum: &SingularSpectrum, tau: f64) -> Result<RankEstimate, LinalgError> {
    effective_rank_values(&spectrum.values, tau, usize::MAX)
}

/// [`effective_rank`] clamped to `limit` (the query pool size).
pub fn effective_rank_clamped(
    spectrum: &SingularSpectrum,
    tau: f64,
    limit: usize,
) -> Result<RankEstimate, LinalgError> {
    effective_rank_values(&spectrum.values, tau, limit)
}

/// Rank rule over a bare descending list of singular values.
pub fn effective_rank_values(values: &[f64], tau: f64, limit: usize) -> Result<RankEstimate, LinalgError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(LinalgError::InvalidTau(tau));
    }
    if values.is_empty() {
        return Err(LinalgError::Empty);
    }
    let total: f64 = values.iter().map(|s| s * s).sum();
    let limit = limit.max(1);
    if total == 0.0 {
        return Ok(RankEstimate {
            k: 1,
            unclamped: 1,
            degenerate: true,
            clamped: false,
        });
    }
    let target = tau * total;
    let mut acc = 0.0;
    let mut k = values.len();
    for (i, s) in values.iter().enumerate() {
        acc += s * s;
        if acc >= target {
            k = i + 1;
            break;
        }
    }
    Ok(RankEstimate {
        k: k.min(limit),
        unclamped: k,
        degenerate: false,
        clamped: k > limit,
    })
}

/// `‖X − X_K‖_F²` computed from the spectrum: the discarded energy `Σ_{i>K} σᵢ²`.
pub fn truncation_residual(x: &DenseMatrix, spectrum: &SingularSpectrum, k: usize) -> Result<f64, LinalgError> {
    let max = x.rows().min(x.cols());
    if k == 0 || k > max {
        return Err(LinalgError::RankOutOfRange { k, max });
    }
    Ok(spectrum.values[k..].iter().map(|s| s * s).sum())
}

/// Rank-`K` reconstruction `X·V_Kᵀ·V_K` (projection onto the leading right singular subspace).
pub fn rank_k_approximation(x: &DenseMatrix, spectrum: &SingularSpectrum, k: usize) -> DenseMatrix {
    let vk = spectrum.leading_rows(k);
    let coords = x.matmul(&vk.transpose()).expect("C columns");
    coords.matmul(&vk).expect("k rows")
}
