//! The ARX model and the causality test on its input polynomial.
//!
//! The process is `A(R) X_{n+1} = B(R) U_n + ε_{n+1}` with
//! `A(z) = I − A₁z − … − A_p z^p` and `B(z) = I + B₁z + … + B_q z^q`,
//! equivalently `X_{n+1} = θᵗ Φ_n + U_n + ε_{n+1}`.

use nalgebra::{DMatrix, Schur};

use crate::linalg;

/// Default margin below 1 required of the companion spectral radius.
pub const DEFAULT_CAUSALITY_MARGIN: f64 = 1e-6;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model needs p >= 1 and q >= 1 (got p = {p}, q = {q})")]
    ZeroOrder { p: usize, q: usize },
    #[error("output dimension must be at least 1")]
    ZeroDimension,
    #[error("{name} is {rows}x{cols}, expected {d}x{d}")]
    Shape {
        name: String,
        rows: usize,
        cols: usize,
        d: usize,
    },
    #[error("{name} is not symmetric positive definite")]
    NotSpd { name: String },
    #[error("{name} has non-finite entries")]
    NonFinite { name: String },
    #[error("eigenvalue iteration on the companion matrix of B did not converge")]
    Eigen,
    #[error("B is not causal: companion spectral radius {spectral_radius} exceeds 1 - {margin}")]
    NotCausal { spectral_radius: f64, margin: f64 },
}

/// `ARX_d(p, q)` coefficients together with the driven-noise covariance `Γ`
/// and the excitation covariance `Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxModel {
    d: usize,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    gamma: DMatrix<f64>,
    delta: DMatrix<f64>,
}

impl ArxModel {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        gamma: DMatrix<f64>,
        delta: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        if a.is_empty() || b.is_empty() {
            return Err(ModelError::ZeroOrder { p: a.len(), q: b.len() });
        }
        let d = gamma.nrows();
        if d == 0 {
            return Err(ModelError::ZeroDimension);
        }
        let check = |name: String, m: &DMatrix<f64>| -> Result<(), ModelError> {
            if m.nrows() != d || m.ncols() != d {
                return Err(ModelError::Shape {
                    name,
                    rows: m.nrows(),
                    cols: m.ncols(),
                    d,
                });
            }
            if !linalg::all_finite(m) {
                return Err(ModelError::NonFinite { name });
            }
            Ok(())
        };
        for (i, m) in a.iter().enumerate() {
            check(format!("A{}", i + 1), m)?;
        }
        for (j, m) in b.iter().enumerate() {
            check(format!("B{}", j + 1), m)?;
        }
        for (name, m) in [("Gamma", &gamma), ("Delta", &delta)] {
            check(name.to_string(), m)?;
            let asym = linalg::max_abs(&(m - m.transpose()));
            if asym > 1e-12 * linalg::max_abs(m).max(1.0) || !linalg::is_positive_definite(m) {
                return Err(ModelError::NotSpd { name: name.to_string() });
            }
        }
        Ok(Self { d, a, b, gamma, delta })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> usize {
        self.a.len()
    }

    pub fn q(&self) -> usize {
        self.b.len()
    }

    /// Regressor dimension `δ = d(p + q)`.
    pub fn delta_dim(&self) -> usize {
        self.d * (self.p() + self.q())
    }

    pub fn a(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn b(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn delta(&self) -> &DMatrix<f64> {
        &self.delta
    }

    /// The `δ × d` parameter matrix whose transpose is `(A₁, …, A_p, B₁, …, B_q)`.
    pub fn theta(&self) -> DMatrix<f64> {
        let d = self.d;
        let mut theta = DMatrix::zeros(self.delta_dim(), d);
        for (i, m) in self.a.iter().chain(self.b.iter()).enumerate() {
            theta.view_mut((i * d, 0), (d, d)).copy_from(&m.transpose());
        }
        theta
    }

    /// Same coefficients with new noise covariances.
    pub fn with_noise(&self, gamma: DMatrix<f64>, delta: DMatrix<f64>) -> Result<Self, ModelError> {
        Self::new(self.a.clone(), self.b.clone(), gamma, delta)
    }
}

/// Block companion matrix of the recursion `D_k = −Σ_j D_{k−j} B_j`.
///
/// Acting on the stacked transposes `(D_{k−1}ᵗ; …; D_{k−q}ᵗ)` it yields
/// `(D_kᵗ; …; D_{k−q+1}ᵗ)`. Its eigenvalues are the reciprocals of the zeros of
/// `det B(z)`, padded with zeros when that determinant has degree below `dq`.
pub fn companion_of_b(model: &ArxModel) -> DMatrix<f64> {
    let d = model.d();
    let q = model.q();
    let mut c = DMatrix::zeros(d * q, d * q);
    for (j, bj) in model.b().iter().enumerate() {
        linalg::set_block(&mut c, 0, j, &(-bj.transpose()));
    }
    for i in 1..q {
        linalg::set_block(&mut c, i, i - 1, &DMatrix::identity(d, d));
    }
    c
}

/// Largest eigenvalue modulus of a real square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64, ModelError> {
    let scale = m.amax();
    if scale == 0.0 {
        return Ok(0.0);
    }
    // unit-scaled input keeps the absolute convergence threshold meaningful;
    // QR can stall on nilpotent blocks, so retry with a few exact shifts
    let unit = m / scale;
    let n = m.nrows();
    for shift in [0.0, 0.1, -0.27, 0.53] {
        let shifted = &unit + DMatrix::identity(n, n) * shift;
        if let Some(schur) = Schur::try_new(shifted, f64::EPSILON, 10_000) {
            let radius = schur
                .complex_eigenvalues()
                .iter()
                .map(|z| (z - shift).norm())
                .fold(0.0, f64::max);
            return Ok(scale * radius);
        }
    }
    Err(ModelError::Eigen)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Causality {
    pub causal: bool,
    /// Spectral radius of the companion matrix, i.e. the reciprocal of the
    /// smallest zero modulus of `det B(z)`.
    pub spectral_radius: f64,
}

pub fn is_causal(model: &ArxModel, margin: f64) -> Result<Causality, ModelError> {
    let spectral_radius = spectral_radius(&companion_of_b(model))?;
    Ok(Causality {
        causal: spectral_radius <= 1.0 - margin,
        spectral_radius,
    })
}

/// `is_causal` that turns a negative answer into an error.
pub fn require_causal(model: &ArxModel, margin: f64) -> Result<f64, ModelError> {
    let c = is_causal(model, margin)?;
    if c.causal {
        Ok(c.spectral_radius)
    } else {
        Err(ModelError::NotCausal {
            spectral_radius: c.spectral_radius,
            margin,
        })
    }
}
