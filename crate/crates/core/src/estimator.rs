//! Recursive least squares and weighted least squares estimation of `θ`.
//!
//! One step with regressor `Φ_n`, weight `a_n` and target `y = X_{n+1} − U_n`:
//!
//! ```text
//! S_n(a) = S_{n−1}(a) + a_n Φ_n Φ_nᵗ,   S_{−1}(a) = I_δ
//! θ̂_{n+1} = θ̂_n + a_n S_n(a)⁻¹ Φ_n (y − θ̂_nᵗ Φ_n)ᵗ
//! ```
//!
//! `S_n(a)⁻¹` is carried by Sherman–Morrison updates and refreshed from a
//! Cholesky factorisation of the directly accumulated `S_n(a)` every
//! [`RESYNC_PERIOD`] steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg;

pub const RESYNC_PERIOD: u64 = 500;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("non-finite {what} at step {step}; estimator state is poisoned")]
    NonFinite { what: &'static str, step: u64 },
    #[error("estimator was poisoned by an earlier non-finite update")]
    Poisoned,
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("WLS exponent gamma must be positive, got {0}")]
    BadGamma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum WeightMode {
    /// `a_n = 1`.
    Ls,
    /// `a_n = (1 / log max(s_n, e))^{1+γ}`.
    Wls { gamma: f64 },
}

impl WeightMode {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        match *self {
            WeightMode::Wls { gamma } if !(gamma > 0.0 && gamma.is_finite()) => Err(EstimatorError::BadGamma(gamma)),
            _ => Ok(()),
        }
    }

    pub fn weight(&self, s_n: f64) -> f64 {
        match *self {
            WeightMode::Ls => 1.0,
            WeightMode::Wls { gamma } => {
                let log_s = s_n.max(std::f64::consts::E).ln();
                log_s.recip().powf(1.0 + gamma)
            }
        }
    }

    /// `(log n)^{1+γ}` for WLS, 1 for LS: the factor that makes
    /// `factor · S_n(a) / n` converge.
    pub fn normalisation(&self, n: f64) -> f64 {
        match *self {
            WeightMode::Ls => 1.0,
            WeightMode::Wls { gamma } => n.ln().powf(1.0 + gamma),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub theta_hat: DMatrix<f64>,
    /// Rank-one maintained inverse of `S_n(a)`.
    pub s_inv: DMatrix<f64>,
    /// `Σ a_k Φ_k Φ_kᵗ + I_δ` accumulated directly.
    pub s_raw: DMatrix<f64>,
    /// `Σ ‖Φ_k‖²`.
    pub s_n: f64,
    pub n: u64,
    pub mode: WeightMode,
    /// Weight used by the latest update.
    pub last_weight: f64,
    /// Largest relative gap seen at a resync between the maintained and the
    /// refactorised inverse.
    pub max_resync_drift: f64,
    poisoned: bool,
}

impl EstimatorState {
    /// Fresh estimator with `θ̂₀ = theta0` (`δ × d`).
    pub fn new(theta0: DMatrix<f64>, mode: WeightMode) -> Result<Self, EstimatorError> {
        mode.validate()?;
        let delta = theta0.nrows();
        Ok(Self {
            theta_hat: theta0,
            s_inv: DMatrix::identity(delta, delta),
            s_raw: DMatrix::identity(delta, delta),
            s_n: 0.0,
            n: 0,
            mode,
            last_weight: 1.0,
            max_resync_drift: 0.0,
            poisoned: false,
        })
    }

    pub fn zeros(delta: usize, d: usize, mode: WeightMode) -> Result<Self, EstimatorError> {
        Self::new(DMatrix::zeros(delta, d), mode)
    }

    /// Weight for the current `s_n`.
    pub fn weight(&self) -> f64 {
        self.mode.weight(self.s_n)
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    /// One recursion step; returns the weight `a_n` used.
    pub fn update(
        &mut self,
        phi: &DVector<f64>,
        x_next: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<f64, EstimatorError> {
        self.check_inputs(phi, x_next, u)?;
        self.s_n += phi.norm_squared();
        let a = self.weight();
        self.apply(phi, &(x_next - u), a);
        Ok(a)
    }

    /// Same recursion with an externally supplied weight. `s_n` still
    /// accumulates `‖Φ_n‖²`.
    pub fn update_with_weight(
        &mut self,
        phi: &DVector<f64>,
        x_next: &DVector<f64>,
        u: &DVector<f64>,
        weight: f64,
    ) -> Result<f64, EstimatorError> {
        self.check_inputs(phi, x_next, u)?;
        self.s_n += phi.norm_squared();
        self.apply(phi, &(x_next - u), weight);
        Ok(weight)
    }

    fn check_inputs(
        &mut self,
        phi: &DVector<f64>,
        x_next: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(), EstimatorError> {
        if self.poisoned {
            return Err(EstimatorError::Poisoned);
        }
        let (delta, d) = self.theta_hat.shape();
        for (what, got, expected) in [
            ("phi", phi.len(), delta),
            ("x_next", x_next.len(), d),
            ("u", u.len(), d),
        ] {
            if got != expected {
                return Err(EstimatorError::Dimension { what, got, expected });
            }
        }
        for (what, v) in [("phi", phi), ("x_next", x_next), ("u", u)] {
            if !linalg::all_finite_vec(v) {
                self.poisoned = true;
                return Err(EstimatorError::NonFinite { what, step: self.n });
            }
        }
        Ok(())
    }

    fn apply(&mut self, phi: &DVector<f64>, target: &DVector<f64>, a: f64) {
        // Sherman–Morrison for S + a φφᵗ
        let v = &self.s_inv * phi;
        let denom = 1.0 + a * phi.dot(&v);
        self.s_inv -= (a / denom) * &v * v.transpose();
        self.s_raw += a * phi * phi.transpose();

        let innovation = target - self.theta_hat.transpose() * phi;
        let gain = a * (&self.s_inv * phi);
        self.theta_hat += gain * innovation.transpose();
        self.last_weight = a;
        self.n += 1;

        if self.n % RESYNC_PERIOD == 0 {
            self.resync();
        }
    }

    /// Replaces the maintained inverse with a fresh factorisation of
    /// `s_raw`; records the relative drift.
    pub fn resync(&mut self) {
        let sym = linalg::symmetrize(&self.s_raw);
        if let Some(ch) = sym.cholesky() {
            let fresh = ch.inverse();
            let scale = linalg::max_abs(&fresh).max(f64::MIN_POSITIVE);
            let drift = linalg::max_abs(&(&fresh - &self.s_inv)) / scale;
            self.max_resync_drift = self.max_resync_drift.max(drift);
            self.s_inv = fresh;
        }
    }

    /// `‖θ̂_n − θ‖²` (squared Frobenius).
    pub fn error_norm(&self, theta: &DMatrix<f64>) -> f64 {
        (&self.theta_hat - theta).norm_squared()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn ls_weight_is_one() {
        assert_eq!(WeightMode::Ls.weight(1e9), 1.0);
        assert_eq!(WeightMode::Ls.weight(0.0), 1.0);
    }

    #[test]
    fn wls_weight_values() {
        let w = WeightMode::Wls { gamma: 1.0 };
        let e2 = std::f64::consts::E.powi(2);
        assert!((w.weight(e2) - 0.25).abs() < 1e-15);
        assert_eq!(w.weight(1.0), 1.0);
        assert_eq!(w.weight(0.0), 1.0);
    }

    #[test]
    fn wls_rejects_bad_gamma() {
        assert!(EstimatorState::zeros(2, 1, WeightMode::Wls { gamma: 0.0 }).is_err());
        assert!(EstimatorState::zeros(2, 1, WeightMode::Wls { gamma: f64::NAN }).is_err());
    }

    #[test]
    fn zero_regressor_is_a_no_op() {
        let mut st = EstimatorState::new(DMatrix::from_element(2, 1, 0.3), WeightMode::Ls).unwrap();
        let before = st.clone();
        st.update(&v(&[0.0, 0.0]), &v(&[5.0]), &v(&[1.0])).unwrap();
        assert_eq!(st.theta_hat, before.theta_hat);
        assert_eq!(st.s_inv, before.s_inv);
        assert_eq!(st.s_raw, before.s_raw);
        assert_eq!(st.s_n, 0.0);
        assert_eq!(st.n, 1);
    }

    #[test]
    fn first_step_by_hand() {
        let mut st = EstimatorState::zeros(1, 1, WeightMode::Ls).unwrap();
        st.update(&v(&[1.0]), &v(&[2.0]), &v(&[0.0])).unwrap();
        assert_eq!(st.s_raw[(0, 0)], 2.0);
        assert!((st.theta_hat[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_poisons() {
        let mut st = EstimatorState::zeros(1, 1, WeightMode::Ls).unwrap();
        let err = st.update(&v(&[f64::NAN]), &v(&[1.0]), &v(&[0.0])).unwrap_err();
        assert!(matches!(err, EstimatorError::NonFinite { what: "phi", .. }));
        assert!(st.is_poisoned());
        assert_eq!(
            st.update(&v(&[1.0]), &v(&[1.0]), &v(&[0.0])).unwrap_err(),
            EstimatorError::Poisoned
        );
    }

    #[test]
    fn dimension_mismatch() {
        let mut st = EstimatorState::zeros(2, 1, WeightMode::Ls).unwrap();
        assert!(matches!(
            st.update(&v(&[1.0]), &v(&[1.0]), &v(&[0.0])),
            Err(EstimatorError::Dimension { what: "phi", .. })
        ));
    }

    /// `S_n(a)⁻¹ (θ̂₀ + Σ a_k Φ_k y_kᵗ)` by direct solve.
    fn batch_solution(theta0: &DMatrix<f64>, data: &[(DVector<f64>, DVector<f64>, f64)]) -> DMatrix<f64> {
        let delta = theta0.nrows();
        let mut s = DMatrix::<f64>::identity(delta, delta);
        let mut rhs = theta0.clone();
        for (phi, y, a) in data {
            s += *a * phi * phi.transpose();
            rhs += *a * phi * y.transpose();
        }
        s.lu().solve(&rhs).unwrap()
    }

    fn random_run(mode: WeightMode, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (delta, d) = (4, 2);
        let theta0 = DMatrix::from_fn(delta, d, |_, _| rng.random_range(-1.0..1.0));
        let mut st = EstimatorState::new(theta0.clone(), mode).unwrap();
        let mut data = Vec::new();
        for _ in 0..100 {
            let phi = DVector::from_fn(delta, |_, _| rng.random_range(-2.0..2.0));
            let x = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let u = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let a = st.update(&phi, &x, &u).unwrap();
            data.push((phi, &x - &u, a));
        }
        let batch = batch_solution(&theta0, &data);
        assert!(linalg::max_abs(&(&batch - &st.theta_hat)) < 1e-8);
        let fresh = st.s_raw.clone().try_inverse().unwrap();
        assert!(linalg::max_abs(&(&fresh - &st.s_inv)) / linalg::max_abs(&fresh) < 1e-8);
    }

    #[test]
    fn ls_matches_batch_solve() {
        for seed in 0..5 {
            random_run(WeightMode::Ls, seed);
        }
    }

    #[test]
    fn wls_matches_batch_solve() {
        for seed in 10..15 {
            random_run(WeightMode::Wls { gamma: 1.0 }, seed);
        }
    }

    #[test]
    fn forced_unit_weight_is_bit_identical_to_ls() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ls = EstimatorState::zeros(3, 1, WeightMode::Ls).unwrap();
        let mut forced = EstimatorState::zeros(3, 1, WeightMode::Wls { gamma: 1.0 }).unwrap();
        for _ in 0..1200 {
            let phi = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let x = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
            let u = DVector::zeros(1);
            ls.update(&phi, &x, &u).unwrap();
            forced.update_with_weight(&phi, &x, &u, 1.0).unwrap();
            assert_eq!(ls.theta_hat, forced.theta_hat);
            assert_eq!(ls.s_inv, forced.s_inv);
        }
    }

    #[test]
    fn resync_drift_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = EstimatorState::zeros(4, 2, WeightMode::Ls).unwrap();
        for _ in 0..2000 {
            let phi = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            st.update(&phi, &x, &DVector::zeros(2)).unwrap();
        }
        assert!(st.max_resync_drift < 1e-8, "{}", st.max_resync_drift);
    }

    #[test]
    fn weights_never_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut st = EstimatorState::zeros(2, 1, WeightMode::Wls { gamma: 0.5 }).unwrap();
        let mut prev = f64::INFINITY;
        for _ in 0..500 {
            let phi = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let a = st.update(&phi, &DVector::zeros(1), &DVector::zeros(1)).unwrap();
            assert!(a <= prev);
            assert!(a > 0.0 && a <= 1.0);
            prev = a;
        }
    }

    #[test]
    fn error_norm_values() {
        let st = EstimatorState::zeros(4, 2, WeightMode::Ls).unwrap();
        assert_eq!(st.error_norm(&DMatrix::zeros(4, 2)), 0.0);
        let mut theta = DMatrix::zeros(4, 2);
        theta[(0, 0)] = 1.0;
        theta[(1, 1)] = 1.0;
        assert_eq!(st.error_norm(&theta), 2.0);
    }
}
