//! Closed-loop simulation of the ARX plant under persistently excited
//! adaptive tracking control
//!
//! ```text
//! U_n     = x_{n+1} − θ̂_nᵗ Φ_n + ξ_{n+1}
//! X_{n+1} = θᵗ Φ_n + U_n + ε_{n+1}
//! ```
//!
//! so that `X_{n+1} − x_{n+1} = π_n + ε_{n+1} + ξ_{n+1}` with
//! `π_n = (θ − θ̂_n)ᵗ Φ_n`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::estimator::{EstimatorError, EstimatorState, WeightMode};
use crate::linalg;
use crate::matpoly::{self, ArxModel};

/// `‖X_n‖` beyond which a run is declared unstable.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

const EPS_STREAM: u64 = 1;
const XI_STREAM: u64 = 2;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SimError {
    #[error("trajectory blew up at step {step} (|X| = {norm:e})")]
    Blowup { step: u64, norm: f64 },
    #[error("{0} is not positive definite; cannot factor it")]
    Factorisation(&'static str),
    #[error("record_stride must be at least 1")]
    ZeroStride,
    #[error("initial estimate has shape {got:?}, expected {expected:?}")]
    Theta0Shape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Reference trajectory `x_n`, predictable by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    Zero,
    /// `x_n = scale · n^{−1/2} · (1, …, 1)/√d`.
    Decaying {
        scale: f64,
    },
}

impl Trajectory {
    pub fn at(&self, n: u64, d: usize) -> DVector<f64> {
        match *self {
            Trajectory::Zero => DVector::zeros(d),
            Trajectory::Decaying { .. } if n == 0 => DVector::zeros(d),
            Trajectory::Decaying { scale } => {
                let level = scale / (n as f64).sqrt() / (d as f64).sqrt();
                DVector::from_element(d, level)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: ArxModel,
    pub horizon: usize,
    pub trajectory: Trajectory,
    pub excitation_on: bool,
    pub seed: u64,
    pub mode: WeightMode,
    pub record_stride: usize,
    /// `θ̂₀`; zero when absent.
    pub theta0: Option<DMatrix<f64>>,
    /// Keep `θ̂ ≡ θ̂₀` (oracle runs).
    pub freeze_estimator: bool,
    /// Record `λ_min`, `λ_max` of `S_n(a)/n` for each kept step.
    pub verbose: bool,
}

impl SimConfig {
    pub fn new(model: ArxModel, horizon: usize, seed: u64) -> Self {
        Self {
            model,
            horizon,
            trajectory: Trajectory::Zero,
            excitation_on: true,
            seed,
            mode: WeightMode::Ls,
            record_stride: 1,
            theta0: None,
            freeze_estimator: false,
            verbose: false,
        }
    }
}

/// Gaussian driven noise `ε ~ N(0, Γ)` and excitation `ξ ~ N(0, Δ)` from two
/// independent ChaCha streams.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    eps_rng: ChaCha8Rng,
    xi_rng: ChaCha8Rng,
    gamma_factor: DMatrix<f64>,
    delta_factor: DMatrix<f64>,
    excitation_on: bool,
}

impl NoiseSource {
    pub fn new(seed: u64, gamma: &DMatrix<f64>, delta: &DMatrix<f64>, excitation_on: bool) -> Result<Self, SimError> {
        let gamma_factor = gamma
            .clone()
            .cholesky()
            .ok_or(SimError::Factorisation("Gamma"))?
            .unpack();
        let delta_factor = delta
            .clone()
            .cholesky()
            .ok_or(SimError::Factorisation("Delta"))?
            .unpack();
        let mut eps_rng = ChaCha8Rng::seed_from_u64(seed);
        eps_rng.set_stream(EPS_STREAM);
        let mut xi_rng = ChaCha8Rng::seed_from_u64(seed);
        xi_rng.set_stream(XI_STREAM);
        Ok(Self {
            eps_rng,
            xi_rng,
            gamma_factor,
            delta_factor,
            excitation_on,
        })
    }

    /// `(ε, ξ)`; `ξ = 0` with excitation off.
    pub fn draw(&mut self) -> (DVector<f64>, DVector<f64>) {
        let d = self.gamma_factor.nrows();
        let z_eps = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut self.eps_rng));
        let eps = &self.gamma_factor * z_eps;
        let xi = if self.excitation_on {
            let z_xi = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut self.xi_rng));
            &self.delta_factor * z_xi
        } else {
            DVector::zeros(d)
        };
        (eps, xi)
    }
}

/// `U_n = x_{n+1} − θ̂_nᵗ Φ_n + ξ_{n+1}`.
pub fn control(
    theta_hat: &DMatrix<f64>,
    phi: &DVector<f64>,
    x_next: &DVector<f64>,
    xi_next: &DVector<f64>,
) -> DVector<f64> {
    x_next - theta_hat.transpose() * phi + xi_next
}

/// `X_{n+1} = θᵗ Φ_n + U_n + ε_{n+1}`.
pub fn plant_step(theta: &DMatrix<f64>, phi: &DVector<f64>, u: &DVector<f64>, eps_next: &DVector<f64>) -> DVector<f64> {
    theta.transpose() * phi + u + eps_next
}

/// `Φ_n = (X_n, …, X_{n−p+1}, U_{n−1}, …, U_{n−q})`, newest first in both
/// histories.
pub fn assemble_regressor(x_hist: &[DVector<f64>], u_hist: &[DVector<f64>]) -> DVector<f64> {
    let d = x_hist.first().or(u_hist.first()).map_or(0, |v| v.len());
    let mut phi = DVector::zeros(d * (x_hist.len() + u_hist.len()));
    for (i, v) in x_hist.iter().chain(u_hist).enumerate() {
        phi.rows_mut(i * d, d).copy_from(v);
    }
    phi
}

/// Incremental mean of outer products.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningOuterMean {
    pub mean: DMatrix<f64>,
    pub count: u64,
}

impl RunningOuterMean {
    pub fn new(d: usize) -> Self {
        Self {
            mean: DMatrix::zeros(d, d),
            count: 0,
        }
    }

    pub fn push(&mut self, v: &DVector<f64>) {
        self.count += 1;
        let outer = v * v.transpose();
        self.mean += (outer - &self.mean) / self.count as f64;
    }
}

/// State after one closed-loop step `n → n+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// `n + 1`.
    pub step: u64,
    /// `X_{n+1}`.
    pub x: DVector<f64>,
    /// `U_n`.
    pub u: DVector<f64>,
    /// `x_{n+1}`.
    pub reference: DVector<f64>,
    /// `Φ_n`.
    pub phi: DVector<f64>,
    /// `π_n`.
    pub prediction_error: DVector<f64>,
    pub epsilon: DVector<f64>,
    pub xi: DVector<f64>,
    /// `C_{n+1}`.
    pub cost: DMatrix<f64>,
    /// `Δ_{n+1}`.
    pub delta_avg: DMatrix<f64>,
    /// `Γ_{n+1}`.
    pub gamma_avg: DMatrix<f64>,
    /// `‖θ̂_{n+1} − θ‖²`.
    pub theta_error: f64,
    pub s_n: f64,
    /// `a_n`.
    pub weight: f64,
    /// `(λ_min, λ_max)` of `S_n(a)/(n+1)` when verbose.
    pub design_eig: Option<(f64, f64)>,
}

/// Step-by-step driver; [`run`] wraps it into a [`SimTrace`].
#[derive(Debug, Clone)]
pub struct Simulator {
    model: ArxModel,
    theta: DMatrix<f64>,
    trajectory: Trajectory,
    freeze: bool,
    verbose: bool,
    estimator: EstimatorState,
    noise: NoiseSource,
    x_hist: Vec<DVector<f64>>,
    u_hist: Vec<DVector<f64>>,
    step: u64,
    cost: RunningOuterMean,
    delta_avg: RunningOuterMean,
    gamma_avg: RunningOuterMean,
    max_identity_residual: f64,
}

impl Simulator {
    pub fn new(cfg: &SimConfig) -> Result<Self, SimError> {
        let model = cfg.model.clone();
        let (d, delta) = (model.d(), model.delta_dim());
        if let Ok(c) = matpoly::is_causal(&model, matpoly::DEFAULT_CAUSALITY_MARGIN) {
            if !c.causal {
                log::warn!(
                    "B is not causal (spectral radius {}); running anyway",
                    c.spectral_radius
                );
            }
        }
        let theta0 = match &cfg.theta0 {
            Some(t) if t.shape() != (delta, d) => {
                return Err(SimError::Theta0Shape {
                    got: t.shape(),
                    expected: (delta, d),
                })
            }
            Some(t) => t.clone(),
            None => DMatrix::zeros(delta, d),
        };
        let estimator = EstimatorState::new(theta0, cfg.mode)?;
        let noise = NoiseSource::new(cfg.seed, model.gamma(), model.delta(), cfg.excitation_on)?;
        Ok(Self {
            theta: model.theta(),
            x_hist: vec![DVector::zeros(d); model.p()],
            u_hist: vec![DVector::zeros(d); model.q()],
            trajectory: cfg.trajectory,
            freeze: cfg.freeze_estimator,
            verbose: cfg.verbose,
            estimator,
            noise,
            step: 0,
            cost: RunningOuterMean::new(d),
            delta_avg: RunningOuterMean::new(d),
            gamma_avg: RunningOuterMean::new(d),
            max_identity_residual: 0.0,
            model,
        })
    }

    pub fn estimator(&self) -> &EstimatorState {
        &self.estimator
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn cost(&self) -> &DMatrix<f64> {
        &self.cost.mean
    }

    pub fn delta_avg(&self) -> &DMatrix<f64> {
        &self.delta_avg.mean
    }

    pub fn gamma_avg(&self) -> &DMatrix<f64> {
        &self.gamma_avg.mean
    }

    /// Largest `‖(X_{n+1} − x_{n+1}) − π_n − ε_{n+1} − ξ_{n+1}‖` so far.
    pub fn max_identity_residual(&self) -> f64 {
        self.max_identity_residual
    }

    pub fn step(&mut self) -> Result<StepRecord, SimError> {
        let d = self.model.d();
        let n = self.step;
        let phi = assemble_regressor(&self.x_hist, &self.u_hist);
        let (eps, xi) = self.noise.draw();
        let reference = self.trajectory.at(n + 1, d);

        let theta_hat = &self.estimator.theta_hat;
        let u = control(theta_hat, &phi, &reference, &xi);
        let prediction_error = self.theta.transpose() * &phi - theta_hat.transpose() * &phi;
        let x = plant_step(&self.theta, &phi, &u, &eps);

        let norm = x.norm();
        if !(norm <= BLOWUP_THRESHOLD) {
            return Err(SimError::Blowup { step: n + 1, norm });
        }

        let weight = if self.freeze {
            self.estimator.s_n += phi.norm_squared();
            self.estimator.weight()
        } else {
            self.estimator.update(&phi, &x, &u)?
        };

        let tracking = &x - &reference;
        let residual = (&tracking - &prediction_error - &eps - &xi).amax();
        self.max_identity_residual = self.max_identity_residual.max(residual);
        self.cost.push(&tracking);
        self.delta_avg.push(&(&eps + &xi));
        self.gamma_avg.push(&eps);

        self.x_hist.rotate_right(1);
        self.x_hist[0] = x.clone();
        self.u_hist.rotate_right(1);
        self.u_hist[0] = u.clone();
        self.step += 1;

        let design_eig = self.verbose.then(|| {
            let scaled = &self.estimator.s_raw / self.step as f64;
            linalg::sym_eig_range(&scaled)
        });

        Ok(StepRecord {
            step: self.step,
            x,
            u,
            reference,
            phi,
            prediction_error,
            epsilon: eps,
            xi,
            cost: self.cost.mean.clone(),
            delta_avg: self.delta_avg.mean.clone(),
            gamma_avg: self.gamma_avg.mean.clone(),
            theta_error: self.estimator.error_norm(&self.theta),
            s_n: self.estimator.s_n,
            weight,
            design_eig,
        })
    }
}

/// Recorded history of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub d: usize,
    pub records: Vec<StepRecord>,
    pub steps: u64,
    pub theta_hat: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    /// `S_N(a)`, including the `I_δ` seed.
    pub design: DMatrix<f64>,
    pub s_n: f64,
    pub cost: DMatrix<f64>,
    pub delta_avg: DMatrix<f64>,
    pub gamma_avg: DMatrix<f64>,
    pub max_identity_residual: f64,
    pub verbose: bool,
}

pub fn run(cfg: &SimConfig) -> Result<SimTrace, SimError> {
    if cfg.record_stride == 0 {
        return Err(SimError::ZeroStride);
    }
    let mut sim = Simulator::new(cfg)?;
    let mut records = Vec::with_capacity(cfg.horizon / cfg.record_stride + 1);
    for _ in 0..cfg.horizon {
        let rec = sim.step()?;
        if rec.step % cfg.record_stride as u64 == 0 {
            records.push(rec);
        }
    }
    Ok(SimTrace {
        d: cfg.model.d(),
        records,
        steps: sim.step,
        theta_hat: sim.estimator.theta_hat.clone(),
        theta: sim.theta.clone(),
        design: sim.estimator.s_raw.clone(),
        s_n: sim.estimator.s_n,
        cost: sim.cost.mean.clone(),
        delta_avg: sim.delta_avg.mean.clone(),
        gamma_avg: sim.gamma_avg.mean.clone(),
        max_identity_residual: sim.max_identity_residual,
        verbose: cfg.verbose,
    })
}

impl SimTrace {
    pub fn theta_error(&self) -> f64 {
        (&self.theta_hat - &self.theta).norm_squared()
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["step".to_string()];
        for name in ["X", "U", "x"] {
            cols.extend((1..=self.d).map(|i| format!("{name}_{i}")));
        }
        cols.extend(
            ["pi_norm", "theta_err", "tr_C", "tr_Delta", "s_n"]
                .iter()
                .map(|s| s.to_string()),
        );
        if self.verbose {
            cols.extend(["a_n", "lambda_min", "lambda_max"].iter().map(|s| s.to_string()));
        }
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.records {
            let mut cells = vec![r.step.to_string()];
            for v in [&r.x, &r.u, &r.reference] {
                cells.extend(v.iter().map(|&c| linalg::fmt17(c)));
            }
            cells.push(linalg::fmt17(r.prediction_error.norm()));
            cells.push(linalg::fmt17(r.theta_error));
            cells.push(linalg::fmt17(r.cost.trace()));
            cells.push(linalg::fmt17(r.delta_avg.trace()));
            cells.push(linalg::fmt17(r.s_n));
            if self.verbose {
                let (lo, hi) = r.design_eig.unwrap_or((f64::NAN, f64::NAN));
                cells.push(linalg::fmt17(r.weight));
                cells.push(linalg::fmt17(lo));
                cells.push(linalg::fmt17(hi));
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_model() -> ArxModel {
        ArxModel::new(
            vec![crate::linalg::diag(&[2.0, 0.0])],
            vec![crate::linalg::diag(&[0.75, -0.5])],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    #[test]
    fn noise_covariance_matches() {
        let gamma = DMatrix::identity(2, 2);
        let mut src = NoiseSource::new(99, &gamma, &gamma, true).unwrap();
        let mut acc = RunningOuterMean::new(2);
        for _ in 0..100_000 {
            let (eps, _) = src.draw();
            acc.push(&eps);
        }
        assert!(linalg::max_abs(&(&acc.mean - gamma)) < 0.03);
    }

    #[test]
    fn correlated_noise_factor() {
        let gamma = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let delta = DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.3]);
        let mut src = NoiseSource::new(5, &gamma, &delta, true).unwrap();
        let mut ge = RunningOuterMean::new(2);
        let mut gx = RunningOuterMean::new(2);
        for _ in 0..100_000 {
            let (eps, xi) = src.draw();
            ge.push(&eps);
            gx.push(&xi);
        }
        assert!(linalg::max_abs(&(&ge.mean - gamma)) < 0.05);
        assert!(linalg::max_abs(&(&gx.mean - delta)) < 0.02);
    }

    #[test]
    fn excitation_off_gives_zero_xi() {
        let i = DMatrix::identity(2, 2);
        let mut src = NoiseSource::new(1, &i, &i, false).unwrap();
        for _ in 0..10 {
            assert_eq!(src.draw().1, DVector::zeros(2));
        }
    }

    #[test]
    fn noise_is_deterministic() {
        let i = DMatrix::identity(3, 3);
        let mut a = NoiseSource::new(42, &i, &i, true).unwrap();
        let mut b = NoiseSource::new(42, &i, &i, true).unwrap();
        for _ in 0..50 {
            assert_eq!(a.draw(), b.draw());
        }
    }

    #[test]
    fn control_cases() {
        let theta_hat = DMatrix::zeros(4, 2);
        let phi = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]);
        let z = DVector::zeros(2);
        assert_eq!(control(&theta_hat, &phi, &z, &z), z);

        let m = diag_model();
        let theta = m.theta();
        let xi = DVector::from_column_slice(&[0.3, -0.1]);
        let u = control(&theta, &phi, &z, &xi);
        assert_eq!(u, -(theta.transpose() * &phi) + &xi);
        let eps = DVector::from_column_slice(&[0.05, 0.2]);
        let x = plant_step(&theta, &phi, &u, &eps);
        assert!((x - (&eps + &xi)).amax() < 1e-14);
    }

    #[test]
    fn scalar_plant_expansion() {
        let (a, b) = (0.6, -0.3);
        let theta = DMatrix::from_column_slice(2, 1, &[a, b]);
        let (xn, un_1, un, e) = (1.5, -0.4, 0.8, 0.1);
        let phi = DVector::from_column_slice(&[xn, un_1]);
        let x = plant_step(
            &theta,
            &phi,
            &DVector::from_element(1, un),
            &DVector::from_element(1, e),
        );
        assert!((x[0] - (a * xn + un + b * un_1 + e)).abs() < 1e-15);
        let zero = plant_step(&DMatrix::zeros(2, 1), &phi, &DVector::zeros(1), &DVector::zeros(1));
        assert_eq!(zero[0], 0.0);
    }

    #[test]
    fn empty_horizon() {
        let trace = run(&SimConfig::new(diag_model(), 0, 1)).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.theta_hat, DMatrix::zeros(4, 2));
        assert_eq!(trace.to_csv().lines().count(), 1);
    }

    #[test]
    fn oracle_run_has_zero_tracking_gap() {
        let m = diag_model();
        let mut cfg = SimConfig::new(m.clone(), 300, 3);
        cfg.theta0 = Some(m.theta());
        cfg.freeze_estimator = true;
        let trace = run(&cfg).unwrap();
        for r in &trace.records {
            assert!(r.prediction_error.amax() == 0.0);
            assert!(linalg::max_abs(&(&r.cost - &r.delta_avg)) < 1e-12);
            assert_eq!(r.theta_error, 0.0);
        }
    }

    #[test]
    fn closed_loop_identity_and_psd_averages() {
        let mut cfg = SimConfig::new(diag_model(), 500, 17);
        cfg.trajectory = Trajectory::Decaying { scale: 2.0 };
        let trace = run(&cfg).unwrap();
        assert!(
            trace.max_identity_residual <= 1e-12 * 1e3,
            "{}",
            trace.max_identity_residual
        );
        for r in trace.records.iter().step_by(50) {
            for m in [&r.cost, &r.delta_avg, &r.gamma_avg] {
                assert_eq!(m, &m.transpose());
                assert!(linalg::sym_eig_range(m).0 > -1e-12);
            }
        }
    }

    #[test]
    fn trace_is_deterministic() {
        let cfg = SimConfig::new(diag_model(), 200, 1234);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn decaying_reference_energy() {
        let t = Trajectory::Decaying { scale: 1.5 };
        let n = 10_000u64;
        let energy: f64 = (1..=n).map(|k| t.at(k, 3).norm_squared()).sum();
        let bound = 10.0 * (n as f64).ln() / n as f64 * 1.5 * 1.5;
        assert!(energy / n as f64 <= bound);
        assert_eq!(Trajectory::Zero.at(5, 2), DVector::zeros(2));
    }

    #[test]
    fn unstable_loop_aborts() {
        // no excitation, frozen zero estimate, explosive A: plain open loop
        let m = ArxModel::new(
            vec![DMatrix::from_element(1, 1, 3.0)],
            vec![DMatrix::from_element(1, 1, 0.0)],
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let mut cfg = SimConfig::new(m, 1000, 1);
        cfg.freeze_estimator = true;
        match run(&cfg) {
            Err(SimError::Blowup { step, .. }) => assert!(step > 10 && step < 100),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn verbose_columns() {
        let mut cfg = SimConfig::new(diag_model(), 5, 2);
        cfg.verbose = true;
        let trace = run(&cfg).unwrap();
        let csv = trace.to_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.ends_with("a_n,lambda_min,lambda_max"));
        assert_eq!(header.split(',').count(), 1 + 6 + 5 + 3);
    }
}
