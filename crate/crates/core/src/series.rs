//! Truncated power series of `B⁻¹(z) = Σ D_k z^k`,
//! `P(z) = B⁻¹(z)(A(z) − I) = Σ P_k z^k` and `Q_k = D_k + P_k`.

use nalgebra::DMatrix;

use crate::linalg;
use crate::matpoly::{self, ArxModel, ModelError};

pub const DEFAULT_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_SAFETY_CAP: usize = 10_000;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("series of B^-1 diverges: spectral radius {0} is not below 1")]
    NotCausal(f64),
    #[error("truncation tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesOptions {
    /// Operator-norm level below which the discarded coefficients must fall.
    pub tol: f64,
    pub safety_cap: usize,
    pub causality_margin: f64,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOLERANCE,
            safety_cap: DEFAULT_SAFETY_CAP,
            causality_margin: matpoly::DEFAULT_CAUSALITY_MARGIN,
        }
    }
}

/// Coefficients `D_k`, `P_k`, `Q_k` for `0 ≤ k ≤ kmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub kmax: usize,
    pub dk: Vec<DMatrix<f64>>,
    pub pk: Vec<DMatrix<f64>>,
    pub qk: Vec<DMatrix<f64>>,
    /// Companion spectral radius of `B`.
    pub rho: f64,
    /// Fitted envelope `‖coef_k‖ ≤ decay_scale · decay_rate^k` over all three
    /// sequences.
    pub decay_rate: f64,
    pub decay_scale: f64,
    /// Bound on the summed operator norms of the discarded coefficients of
    /// any of the three sequences.
    pub tail_bound: f64,
    /// Set when the safety cap limited `kmax`.
    pub capped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncationOrder {
    pub order: usize,
    pub capped: bool,
}

/// Smallest `K ≥ min_order` with `scale · rho^K < tol`, capped at `safety_cap`.
pub fn truncation_order(
    rho: f64,
    tol: f64,
    scale: f64,
    min_order: usize,
    safety_cap: usize,
) -> Result<TruncationOrder, SeriesError> {
    if !(rho < 1.0) {
        return Err(SeriesError::NotCausal(rho));
    }
    if !(tol > 0.0) {
        return Err(SeriesError::BadTolerance(tol));
    }
    let floor = min_order.min(safety_cap);
    if rho <= 0.0 || scale <= 0.0 || scale < tol {
        return Ok(TruncationOrder {
            order: floor,
            capped: false,
        });
    }
    // scale·rho^K < tol  <=>  K > ln(tol/scale)/ln(rho)
    let bound = (tol / scale).ln() / rho.ln();
    let needed = if bound.is_finite() {
        let mut k = bound.floor().max(0.0);
        // nudge past the boundary when the bound is an exact integer
        while scale * rho.powf(k) >= tol {
            k += 1.0;
        }
        k
    } else {
        f64::INFINITY
    };
    if needed > safety_cap as f64 {
        log::warn!(
            "series truncation capped at {safety_cap} (rho = {rho}, tol = {tol:e}); tail not certified below tol"
        );
        return Ok(TruncationOrder {
            order: safety_cap,
            capped: true,
        });
    }
    Ok(TruncationOrder {
        order: (needed as usize).max(floor),
        capped: false,
    })
}

/// `D_0 = I`; `D_k = −Σ_{j=1}^{min(k,q)} D_{k−j} B_j`.
pub fn compute_d(model: &ArxModel, kmax: usize) -> Vec<DMatrix<f64>> {
    let d = model.d();
    let mut out = Vec::with_capacity(kmax + 1);
    out.push(DMatrix::identity(d, d));
    extend_d(model, &mut out, kmax);
    out
}

fn extend_d(model: &ArxModel, out: &mut Vec<DMatrix<f64>>, kmax: usize) {
    let d = model.d();
    let b = model.b();
    for k in out.len()..=kmax {
        let mut acc = DMatrix::zeros(d, d);
        for (j, bj) in b.iter().enumerate().take(k) {
            acc -= &out[k - j - 1] * bj;
        }
        out.push(acc);
    }
}

/// `P_0 = 0`; `P_k = −Σ_{j=1}^{min(k,p)} D_{k−j} A_j`.
pub fn compute_p(model: &ArxModel, dk: &[DMatrix<f64>], kmax: usize) -> Vec<DMatrix<f64>> {
    let d = model.d();
    let mut out = Vec::with_capacity(kmax + 1);
    out.push(DMatrix::zeros(d, d));
    extend_p(model, dk, &mut out, kmax);
    out
}

fn extend_p(model: &ArxModel, dk: &[DMatrix<f64>], out: &mut Vec<DMatrix<f64>>, kmax: usize) {
    let d = model.d();
    let a = model.a();
    for k in out.len()..=kmax {
        let mut acc = DMatrix::zeros(d, d);
        for (j, aj) in a.iter().enumerate().take(k) {
            acc -= &dk[k - j - 1] * aj;
        }
        out.push(acc);
    }
}

pub fn compute_q(dk: &[DMatrix<f64>], pk: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    assert_eq!(dk.len(), pk.len(), "D and P series must have equal length");
    dk.iter().zip(pk).map(|(d, p)| d + p).collect()
}

/// Largest `‖coef_k‖ / rate^k` over `1 ≤ k < len`.
fn fit_scale(seqs: [&[DMatrix<f64>]; 3], rate: f64) -> f64 {
    let len = seqs[0].len();
    let mut scale = 0.0_f64;
    let mut log_rate_k = 0.0;
    for k in 1..len {
        log_rate_k += rate.ln();
        let norm = seqs.iter().map(|s| linalg::op_norm(&s[k])).fold(0.0, f64::max);
        if norm > 0.0 {
            scale = scale.max((norm.ln() - log_rate_k).exp());
        }
    }
    scale
}

impl SeriesTable {
    /// Builds the table with a truncation order certified against
    /// `opts.tol`. Fails for a non-causal `B`.
    pub fn build(model: &ArxModel, opts: &SeriesOptions) -> Result<Self, SeriesError> {
        let rho = matpoly::is_causal(model, opts.causality_margin)?.spectral_radius;
        if !(rho <= 1.0 - opts.causality_margin) {
            return Err(SeriesError::NotCausal(rho));
        }
        let rate = rho + (0.005_f64).min((1.0 - rho) / 2.0);
        let min_order = model.p().max(model.q()) + 2;
        let d = model.d();

        let pilot = (min_order + 4 * d * model.q() + 8).min(opts.safety_cap.max(min_order));
        let mut dk = compute_d(model, pilot);
        let mut pk = compute_p(model, &dk, pilot);
        let mut scale = fit_scale([&dk, &pk, &compute_q(&dk, &pk)], rate);
        let mut trunc;
        // refit the envelope on everything computed until the order settles
        loop {
            trunc = truncation_order(rate, opts.tol, scale, min_order, opts.safety_cap)?;
            if trunc.order + 1 > dk.len() {
                extend_d(model, &mut dk, trunc.order);
                extend_p(model, &dk, &mut pk, trunc.order);
            }
            let refit = fit_scale(
                [
                    &dk[..=trunc.order],
                    &pk[..=trunc.order],
                    &compute_q(&dk[..=trunc.order], &pk[..=trunc.order]),
                ],
                rate,
            );
            if refit <= scale * (1.0 + 1e-12) {
                break;
            }
            scale = refit;
        }
        let kmax = trunc.order;
        dk.truncate(kmax + 1);
        pk.truncate(kmax + 1);
        let qk = compute_q(&dk, &pk);
        let tail_bound = scale * rate.powi(kmax as i32) / (1.0 - rate);
        Ok(Self {
            kmax,
            dk,
            pk,
            qk,
            rho,
            decay_rate: rate,
            decay_scale: scale,
            tail_bound,
            capped: trunc.capped,
        })
    }

    /// Table at a caller-chosen order, without a certified envelope.
    pub fn with_order(model: &ArxModel, kmax: usize) -> Result<Self, SeriesError> {
        let rho = matpoly::is_causal(model, 0.0)?.spectral_radius;
        let dk = compute_d(model, kmax);
        let pk = compute_p(model, &dk, kmax);
        let qk = compute_q(&dk, &pk);
        let rate = if rho < 1.0 {
            rho + (0.005_f64).min((1.0 - rho) / 2.0)
        } else {
            rho
        };
        let scale = fit_scale([&dk, &pk, &qk], rate);
        let tail_bound = if rate < 1.0 {
            scale * rate.powi(kmax as i32) / (1.0 - rate)
        } else {
            f64::INFINITY
        };
        Ok(Self {
            kmax,
            dk,
            pk,
            qk,
            rho,
            decay_rate: rate,
            decay_scale: scale,
            tail_bound,
            capped: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dk[0].nrows()
    }

    /// Rows `k, D_k, P_k, Q_k` with every matrix flattened row-major.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("k");
        for name in ["D", "P", "Q"] {
            for i in 1..=d {
                for j in 1..=d {
                    out.push_str(&format!(",{name}_{i}{j}"));
                }
            }
        }
        out.push('\n');
        for k in 0..=self.kmax {
            out.push_str(&k.to_string());
            for m in [&self.dk[k], &self.pk[k], &self.qk[k]] {
                for i in 0..d {
                    for j in 0..d {
                        out.push(',');
                        out.push_str(&linalg::fmt17(m[(i, j)]));
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}
