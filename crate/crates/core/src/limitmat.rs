//! The limiting matrix `Λ = [[L, Kᵗ], [K, H]]` of the normalised design
//! matrix, its Schur complement `S = H − K L⁻¹ Kᵗ`, the blockwise inverse and
//! `det Λ = det(Γ + Δ)^p det S`.
//!
//! `S` is cross-checked against an independent series decomposition
//! `S = 𝒫𝒜𝒫ᵗ + 𝒬ℬ𝒬ᵗ + R`, where `𝒫`, `𝒬` are block-Hankel arrays of the
//! `P_k`, `Q_k` coefficients, `𝒜`, `ℬ` repeat `Γ`, `Δ` on the diagonal and
//! `R` carries `V𝒞Vᵗ` with `Σ = Δ − Δ(Γ + Δ)⁻¹Δ`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::linalg::{self, block_diag, set_block};
use crate::matpoly::ArxModel;
use crate::series::{SeriesError, SeriesOptions, SeriesTable};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LimitError {
    #[error(
        "Schur complement is numerically singular (eigenvalues {min_eig:e}..{max_eig:e}); \
         B may violate causality or Delta may be degenerate"
    )]
    SingularSchur { min_eig: f64, max_eig: f64 },
    #[error("Gamma + Delta is not positive definite")]
    SingularL,
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// Blocks of `Λ` before the Schur step.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaBlocks {
    pub h: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitSet {
    pub h: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub lambda_inv: DMatrix<f64>,
    pub det_lambda: f64,
    /// `Σ = Δ − Δ(Γ + Δ)⁻¹Δ`.
    pub sigma: DMatrix<f64>,
}

/// `H_i` for `1 ≤ i ≤ q`, sums truncated at the table order.
pub fn h_block(series: &SeriesTable, gamma: &DMatrix<f64>, delta: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
    let d = series.dim();
    let mut acc = DMatrix::zeros(d, d);
    for k in i..=series.kmax {
        acc += &series.pk[k] * gamma * series.pk[k + 1 - i].transpose();
    }
    for k in (i - 1)..=series.kmax {
        acc += &series.qk[k] * delta * series.qk[k + 1 - i].transpose();
    }
    acc
}

/// `dq × dq` matrix with `H₁` on the diagonal, `H_{c−r+1}` above and the
/// transposes below.
pub fn compute_h(series: &SeriesTable, gamma: &DMatrix<f64>, delta: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    let d = series.dim();
    let blocks: Vec<_> = (1..=q).map(|i| h_block(series, gamma, delta, i)).collect();
    let mut h = DMatrix::zeros(d * q, d * q);
    for r in 0..q {
        for c in 0..q {
            if c >= r {
                set_block(&mut h, r, c, &blocks[c - r]);
            } else {
                set_block(&mut h, r, c, &blocks[r - c].transpose());
            }
        }
    }
    // H₁ is symmetric only up to rounding
    linalg::symmetrize(&h)
}

/// `dq × dp` matrix with block `(r, c) = K_{c−r} = P_{c−r}Γ + Q_{c−r}Δ` for
/// `c ≥ r` and zero otherwise. When `p ≤ q` the rows past `p` are zero.
pub fn compute_k(series: &SeriesTable, gamma: &DMatrix<f64>, delta: &DMatrix<f64>, p: usize, q: usize) -> DMatrix<f64> {
    let d = series.dim();
    let ki: Vec<_> = (0..p).map(|i| &series.pk[i] * gamma + &series.qk[i] * delta).collect();
    let mut k = DMatrix::zeros(d * q, d * p);
    for r in 0..q {
        for c in r..p {
            set_block(&mut k, r, c, &ki[c - r]);
        }
    }
    k
}

/// Block diagonal with `p` copies of `Γ + Δ`.
pub fn compute_l(gamma: &DMatrix<f64>, delta: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    block_diag(&(gamma + delta), p)
}

pub fn assemble_lambda(h: DMatrix<f64>, k: DMatrix<f64>, l: DMatrix<f64>) -> LambdaBlocks {
    let dp = l.nrows();
    let dq = h.nrows();
    let mut lambda = DMatrix::zeros(dp + dq, dp + dq);
    lambda.view_mut((0, 0), (dp, dp)).copy_from(&l);
    lambda.view_mut((0, dp), (dp, dq)).copy_from(&k.transpose());
    lambda.view_mut((dp, 0), (dq, dp)).copy_from(&k);
    lambda.view_mut((dp, dp), (dq, dq)).copy_from(&h);
    LambdaBlocks { h, k, l, lambda }
}

fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = linalg::symmetrize(m);
    match sym.clone().cholesky() {
        Some(ch) => Some(ch.inverse()),
        None => sym.try_inverse(),
    }
}

/// Completes the limit set from the assembled blocks. `p` copies of
/// `Γ + Δ` make up `L`, so `L⁻¹` is built from one `d × d` inverse.
pub fn schur_and_invert(
    blocks: LambdaBlocks,
    gamma: &DMatrix<f64>,
    delta: &DMatrix<f64>,
) -> Result<LimitSet, LimitError> {
    let LambdaBlocks { h, k, l, lambda } = blocks;
    let d = gamma.nrows();
    let p = l.nrows() / d;
    let gd = gamma + delta;
    let gd_inv = spd_inverse(&gd).ok_or(LimitError::SingularL)?;
    let l_inv = block_diag(&gd_inv, p);

    let s = linalg::symmetrize(&(&h - &k * &l_inv * k.transpose()));
    let (min_eig, max_eig) = linalg::sym_eig_range(&s);
    // relative to H as well, so a cancelled S of size one is caught
    let scale = max_eig.max(linalg::op_norm(&h));
    if !(max_eig > 0.0 && min_eig >= linalg::PD_REL_THRESHOLD * scale) {
        return Err(LimitError::SingularSchur { min_eig, max_eig });
    }
    let s_inv = spd_inverse(&s).ok_or(LimitError::SingularSchur { min_eig, max_eig })?;

    let dp = l.nrows();
    let dq = h.nrows();
    let lk = &l_inv * k.transpose(); // L⁻¹Kᵗ
    let top_right = -(&lk * &s_inv);
    let top_left = &l_inv + &lk * &s_inv * lk.transpose();
    let mut lambda_inv = DMatrix::zeros(dp + dq, dp + dq);
    lambda_inv.view_mut((0, 0), (dp, dp)).copy_from(&top_left);
    lambda_inv.view_mut((0, dp), (dp, dq)).copy_from(&top_right);
    lambda_inv.view_mut((dp, 0), (dq, dp)).copy_from(&top_right.transpose());
    lambda_inv.view_mut((dp, dp), (dq, dq)).copy_from(&s_inv);

    let det_s = s.clone().cholesky().map_or_else(
        || s.determinant(),
        |ch| ch.l().diagonal().iter().map(|v| v * v).product(),
    );
    let det_lambda = gd.determinant().powi(p as i32) * det_s;
    let sigma = delta - delta * &gd_inv * delta;

    Ok(LimitSet {
        h,
        k,
        l,
        lambda,
        s,
        lambda_inv,
        det_lambda,
        sigma,
    })
}

/// Full pipeline from a table already built for `model`.
pub fn limit_set_from_series(model: &ArxModel, series: &SeriesTable) -> Result<LimitSet, LimitError> {
    let (gamma, delta) = (model.gamma(), model.delta());
    let h = compute_h(series, gamma, delta, model.q());
    let k = compute_k(series, gamma, delta, model.p(), model.q());
    let l = compute_l(gamma, delta, model.p());
    schur_and_invert(assemble_lambda(h, k, l), gamma, delta)
}

/// Builds the series with default options and returns both.
pub fn limit_set(model: &ArxModel) -> Result<(SeriesTable, LimitSet), LimitError> {
    let series = SeriesTable::build(model, &SeriesOptions::default())?;
    let limit = limit_set_from_series(model, &series)?;
    Ok((series, limit))
}

impl LimitSet {
    /// Positive definiteness of `(Λ, S, L)` by the relative eigenvalue test.
    pub fn positive_definite(&self) -> (bool, bool, bool) {
        (
            linalg::is_positive_definite(&self.lambda),
            linalg::is_positive_definite(&self.s),
            linalg::is_positive_definite(&self.l),
        )
    }

    pub fn summary(&self) -> LimitSummary {
        LimitSummary {
            h: linalg::to_rows(&self.h),
            k: linalg::to_rows(&self.k),
            l: linalg::to_rows(&self.l),
            lambda: linalg::to_rows(&self.lambda),
            s: linalg::to_rows(&self.s),
            lambda_inv: linalg::to_rows(&self.lambda_inv),
            sigma: linalg::to_rows(&self.sigma),
            det_lambda: self.det_lambda,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitSummary {
    pub h: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub l: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub lambda_inv: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub det_lambda: f64,
}

/// `dq`-row block-Hankel array: block `(r, j)` holds `coef[p − r + j]`
/// (zero for negative indices), with as many block columns as keep every
/// index within the table.
fn hankel_array(coefs: &[DMatrix<f64>], p: usize, q: usize) -> DMatrix<f64> {
    let d = coefs[0].nrows();
    let kmax = coefs.len() - 1;
    let ncols = (kmax + 1).saturating_sub(p);
    let mut out = DMatrix::zeros(d * q, d * ncols);
    for r in 0..q {
        for j in 0..ncols {
            let idx = (p + j) as isize - r as isize;
            if idx >= 0 {
                set_block(&mut out, r, j, &coefs[idx as usize]);
            }
        }
    }
    out
}

/// The series-decomposition route to `S`.
///
/// For `p ≥ q`: `𝒫𝒜𝒫ᵗ + 𝒬ℬ𝒬ᵗ + V𝒞Vᵗ` with `V` the `dq × dp` array of
/// `D_{c−r}`. For `p < q`: `V` is the `dp × dp` upper block-triangular array
/// and `V𝒞Vᵗ` fills the leading `dp × dp` corner of `R`. The trailing rows of
/// `𝒬` already carry the `Q₀ Δ Q₀ᵗ` contributions of the lags beyond `p`, so
/// `R` has no separate excitation block there.
pub fn schur_by_series(model: &ArxModel, series: &SeriesTable, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q, d) = (model.p(), model.q(), model.d());
    let pa = hankel_array(&series.pk, p, q);
    let qa = hankel_array(&series.qk, p, q);
    let ncols = pa.ncols() / d;
    let script_a = block_diag(model.gamma(), ncols);
    let script_b = block_diag(model.delta(), ncols);

    let rows = p.min(q);
    let mut v = DMatrix::zeros(d * rows, d * p);
    for r in 0..rows {
        for c in r..p {
            set_block(&mut v, r, c, &series.dk[c - r]);
        }
    }
    let vcv = &v * block_diag(sigma, p) * v.transpose();
    let mut r_mat = DMatrix::zeros(d * q, d * q);
    r_mat.view_mut((0, 0), (d * rows, d * rows)).copy_from(&vcv);

    &pa * script_a * pa.transpose() + &qa * script_b * qa.transpose() + r_mat
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossCheck {
    pub max_discrepancy: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Tolerance `10 · tail_bound · (accumulated coefficient norms)`.
pub fn default_cross_check_tol(model: &ArxModel, series: &SeriesTable) -> f64 {
    let noise = linalg::op_norm(model.gamma()).max(linalg::op_norm(model.delta()));
    let accum: f64 = series
        .pk
        .iter()
        .zip(&series.qk)
        .map(|(p, q)| linalg::op_norm(p) + linalg::op_norm(q))
        .sum();
    10.0 * series.tail_bound * (accum * noise).max(1.0)
}

pub fn series_cross_check(model: &ArxModel, series: &SeriesTable, limit: &LimitSet, tol: f64) -> CrossCheck {
    let alt = schur_by_series(model, series, &limit.sigma);
    let max_discrepancy = linalg::max_abs(&(&limit.s - alt));
    CrossCheck {
        max_discrepancy,
        tol,
        pass: max_discrepancy <= tol,
    }
}
