//! Seed ensembles of closed-loop runs and the statistics computed on them:
//! the normalised estimation error `Z_N = √N Λ^{1/2}(θ̂_N − θ)Γ^{−1/2}`,
//! Kolmogorov–Smirnov normality, rate ratios at checkpoints, the
//! iterated-logarithm band and the excitation ablation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::estimator::WeightMode;
use crate::limitmat::{self, LimitSet};
use crate::linalg;
use crate::matpoly::{self, ArxModel};
use crate::sim::{SimConfig, SimError, Simulator};

/// Threshold on the terminal coordinate error used by the ablation.
pub const ABLATION_THRESHOLD: f64 = 0.1;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum McError {
    #[error("limit matrix is not symmetric positive definite")]
    NotSpd,
    #[error("ensemble needs at least one run")]
    NoRuns,
    #[error("vector {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub sim: SimConfig,
    pub runs: usize,
    pub base_seed: u64,
    /// 0 picks the pool default.
    pub workers: usize,
    pub checkpoints: Vec<u64>,
    /// `u ∈ ℝ^d`, `v ∈ ℝ^δ` for the iterated-logarithm band.
    pub lil_u: DVector<f64>,
    pub lil_v: DVector<f64>,
}

impl EnsembleConfig {
    /// Checkpoints `{N/4, N/2, N}` and first basis vectors for `u`, `v`.
    pub fn new(sim: SimConfig, runs: usize, base_seed: u64) -> Self {
        let n = sim.horizon as u64;
        let mut checkpoints: Vec<u64> = [n / 4, n / 2, n].into_iter().filter(|&c| c >= 2).collect();
        checkpoints.dedup();
        let (d, delta) = (sim.model.d(), sim.model.delta_dim());
        let mut lil_u = DVector::zeros(d);
        lil_u[0] = 1.0;
        let mut lil_v = DVector::zeros(delta);
        lil_v[0] = 1.0;
        Self {
            sim,
            runs,
            base_seed,
            workers: 0,
            checkpoints,
            lil_u,
            lil_v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointStat {
    pub n: u64,
    pub theta_error: f64,
    pub cost_gap: f64,
    /// `‖c_n S_n(a)/n − Λ‖_F` with `c_n = 1` (LS) or `(log n)^{1+γ}` (WLS).
    pub design_dev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub index: usize,
    pub seed: u64,
    pub theta_error: f64,
    /// `‖C_N − Δ_N‖_F`.
    pub cost_gap: f64,
    /// `c_N S_N(a)/N`, row-major.
    pub design_normalised: Vec<f64>,
    /// `θ̂_N − θ`, row-major `δ × d`.
    pub theta_dev: Vec<f64>,
    pub checkpoints: Vec<CheckpointStat>,
    /// `(n, θ̂_n − θ)` over `[N/2, N]`.
    #[serde(skip)]
    pub path: Vec<(u64, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedRun {
    pub index: usize,
    pub seed: u64,
    pub step: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateStat {
    pub name: String,
    pub mean: f64,
    pub variance: f64,
    pub ks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub n: u64,
    pub theta_ratio_median: f64,
    pub theta_ratio_p90: f64,
    pub cost_ratio_median: f64,
    pub cost_ratio_p90: f64,
    pub design_dev_median: Option<f64>,
    pub design_dev_p90: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LilBand {
    pub predicted: f64,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub median_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub m: usize,
    pub n: usize,
    pub mode: WeightMode,
    pub excitation_on: bool,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<FailedRun>,
    /// Ensemble mean of `c_N S_N(a)/N`, row-major.
    pub mean_design: Vec<f64>,
    /// `‖mean_design − Λ‖_F / ‖Λ‖_F`.
    pub design_rel_error: Option<f64>,
    pub median_theta_error: f64,
    /// `M × δd` samples of `Z_N`.
    #[serde(skip)]
    pub z: Vec<Vec<f64>>,
    pub coordinates: Vec<CoordinateStat>,
    pub rates: Vec<RateRow>,
    pub lil: Option<LilBand>,
}

impl EnsembleSummary {
    pub fn z_csv(&self) -> String {
        let mut out = self
            .coordinates
            .iter()
            .map(|c| c.name.clone())
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in &self.z {
            let cells: Vec<_> = row.iter().map(|&v| linalg::fmt17(v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// `Φ(x)` by the Abramowitz–Stegun 26.2.17 rational approximation
/// (absolute error below 7.5e-8).
pub fn normal_cdf(x: f64) -> f64 {
    const P: f64 = 0.231_641_9;
    const B: [f64; 5] = [
        0.319_381_530,
        -0.356_563_782,
        1.781_477_937,
        -1.821_255_978,
        1.330_274_429,
    ];
    if x.is_nan() {
        return f64::NAN;
    }
    let z = x.abs();
    let t = 1.0 / (1.0 + P * z);
    let poly = t * (B[0] + t * (B[1] + t * (B[2] + t * (B[3] + t * B[4]))));
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let upper = pdf * poly;
    if x >= 0.0 {
        1.0 - upper
    } else {
        upper
    }
}

/// One-sample Kolmogorov–Smirnov statistic against `N(0, 1)`.
pub fn ks_normality(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            ((i + 1) as f64 / m - f).max(f - i as f64 / m)
        })
        .fold(0.0, f64::max)
}

/// `√n Λ^{1/2} (θ̂_n − θ) Γ^{−1/2}` flattened row-major. Coordinates are
/// asymptotically independent standard normals.
pub fn clt_statistic(
    theta_dev: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    n: f64,
) -> Result<Vec<f64>, McError> {
    if !linalg::is_positive_definite(lambda) || !linalg::is_positive_definite(gamma) {
        return Err(McError::NotSpd);
    }
    let z = linalg::sym_sqrt(lambda) * theta_dev * linalg::sym_power(gamma, -0.5) * n.sqrt();
    Ok(row_major(&z))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

fn from_row_major(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

/// `log n` for LS and `(log n)^{1+γ}` for WLS: the rate at which
/// `n ‖θ̂_n − θ‖²` and `n ‖C_n − Δ_n‖` may grow.
pub fn rate_scale(mode: WeightMode, n: f64) -> f64 {
    match mode {
        WeightMode::Ls => n.ln(),
        WeightMode::Wls { gamma } => n.ln().powf(1.0 + gamma),
    }
}

/// Nearest-rank quantile of already sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Median and 90th percentile of the rate ratios at each checkpoint.
pub fn rate_diagnostics(runs: &[RunRecord], mode: WeightMode) -> Vec<RateRow> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .checkpoints
        .iter()
        .enumerate()
        .map(|(ci, cp)| {
            let n = cp.n as f64;
            let scale = n / rate_scale(mode, n);
            let theta = sorted(runs.iter().map(|r| r.checkpoints[ci].theta_error * scale).collect());
            let cost = sorted(runs.iter().map(|r| r.checkpoints[ci].cost_gap * scale).collect());
            let design: Option<Vec<f64>> = runs.iter().map(|r| r.checkpoints[ci].design_dev).collect();
            let design = design.map(sorted);
            RateRow {
                n: cp.n,
                theta_ratio_median: quantile(&theta, 0.5),
                theta_ratio_p90: quantile(&theta, 0.9),
                cost_ratio_median: quantile(&cost, 0.5),
                cost_ratio_p90: quantile(&cost, 0.9),
                design_dev_median: design.as_deref().map(|d| quantile(d, 0.5)),
                design_dev_p90: design.as_deref().map(|d| quantile(d, 0.9)),
            }
        })
        .collect()
}

/// Per run, `sup_{n ∈ [N/2, N]} (n / (2 log log n))^{1/2} vᵗ(θ̂_n − θ)u`
/// divided by `(vᵗΛ⁻¹v)^{1/2}(uᵗΓu)^{1/2}`. Points with `n ≤ e^e` are skipped.
pub fn lil_band(
    paths: &[&[(u64, Vec<f64>)]],
    u: &DVector<f64>,
    v: &DVector<f64>,
    lambda_inv: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
) -> Result<LilBand, McError> {
    let (delta, d) = (lambda_inv.nrows(), gamma.nrows());
    if u.len() != d {
        return Err(McError::Dimension {
            what: "u",
            got: u.len(),
            expected: d,
        });
    }
    if v.len() != delta {
        return Err(McError::Dimension {
            what: "v",
            got: v.len(),
            expected: delta,
        });
    }
    let predicted = (v.dot(&(lambda_inv * v))).sqrt() * (u.dot(&(gamma * u))).sqrt();
    let e_e = std::f64::consts::E.powf(std::f64::consts::E);
    let ratios: Vec<f64> = paths
        .iter()
        .map(|path| {
            let sup = path
                .iter()
                .filter(|(n, _)| *n as f64 > e_e)
                .map(|(n, dev)| {
                    let n = *n as f64;
                    let m = from_row_major(dev, delta, d);
                    let proj = v.dot(&(m * u));
                    (n / (2.0 * n.ln().ln())).sqrt() * proj
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let sup = if sup.is_finite() { sup } else { 0.0 };
            if predicted > 0.0 {
                sup / predicted
            } else {
                0.0
            }
        })
        .collect();
    let max_ratio = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let median_ratio = quantile(&sorted(ratios.clone()), 0.5);
    Ok(LilBand {
        predicted,
        ratios,
        max_ratio,
        median_ratio,
    })
}

/// Observed supremum (unnormalised) for one path; exposed for tests.
pub fn lil_observed_sup(path: &[(u64, Vec<f64>)], u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let (d, delta) = (u.len(), v.len());
    let e_e = std::f64::consts::E.powf(std::f64::consts::E);
    path.iter()
        .filter(|(n, _)| *n as f64 > e_e)
        .map(|(n, dev)| {
            let n = *n as f64;
            (n / (2.0 * n.ln().ln())).sqrt() * v.dot(&(from_row_major(dev, delta, d) * u))
        })
        .fold(0.0_f64, |acc, x| if acc == 0.0 { x } else { acc.max(x) })
}

fn map_runs<T, F>(runs: usize, workers: usize, f: F) -> Result<Vec<T>, McError>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if workers != 1 {
            let mut builder = rayon::ThreadPoolBuilder::new();
            if workers > 1 {
                builder = builder.num_threads(workers);
            }
            let pool = builder.build().map_err(|e| McError::Pool(e.to_string()))?;
            return Ok(pool.install(|| (0..runs).into_par_iter().map(&f).collect()));
        }
    }
    let _ = workers;
    Ok((0..runs).map(f).collect())
}

fn run_one(cfg: &EnsembleConfig, index: usize, lambda: Option<&DMatrix<f64>>) -> Result<RunRecord, FailedRun> {
    let seed = cfg.base_seed.wrapping_add(index as u64);
    let mut sim_cfg = cfg.sim.clone();
    sim_cfg.seed = seed;
    sim_cfg.verbose = false;
    let fail = |e: SimError| FailedRun {
        index,
        seed,
        step: match e {
            SimError::Blowup { step, .. } => Some(step),
            _ => None,
        },
        message: e.to_string(),
    };
    let mut sim = Simulator::new(&sim_cfg).map_err(fail)?;
    let horizon = sim_cfg.horizon as u64;
    let mode = sim_cfg.mode;
    let window_start = horizon / 2;
    let mut checkpoints = Vec::with_capacity(cfg.checkpoints.len());
    let mut path = Vec::new();
    let design_dev = |sim: &Simulator, n: u64| {
        lambda.map(|lam| {
            let nf = n as f64;
            let normalised = &sim.estimator().s_raw * (mode.normalisation(nf) / nf);
            (normalised - lam).norm()
        })
    };
    for _ in 0..horizon {
        let rec = sim.step().map_err(fail)?;
        let n = rec.step;
        if cfg.checkpoints.contains(&n) {
            checkpoints.push(CheckpointStat {
                n,
                theta_error: rec.theta_error,
                cost_gap: (&rec.cost - &rec.delta_avg).norm(),
                design_dev: design_dev(&sim, n),
            });
        }
        if n >= window_start {
            path.push((n, row_major(&(&sim.estimator().theta_hat - sim.theta()))));
        }
    }
    let nf = horizon.max(1) as f64;
    let design = &sim.estimator().s_raw * (mode.normalisation(nf) / nf);
    Ok(RunRecord {
        index,
        seed,
        theta_error: sim.estimator().error_norm(sim.theta()),
        cost_gap: (sim.cost() - sim.delta_avg()).norm(),
        design_normalised: row_major(&design),
        theta_dev: row_major(&(&sim.estimator().theta_hat - sim.theta())),
        checkpoints,
        path,
    })
}

/// `M` independent runs with seeds `base_seed + i`. Deterministic in
/// `(config, M, base_seed)` whatever the worker count.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<EnsembleSummary, McError> {
    if cfg.runs == 0 {
        return Err(McError::NoRuns);
    }
    let model = &cfg.sim.model;
    let limit = match matpoly::is_causal(model, matpoly::DEFAULT_CAUSALITY_MARGIN) {
        Ok(c) if c.causal => limitmat::limit_set(model).ok().map(|(_, l)| l),
        _ => None,
    };
    let lambda = limit.as_ref().map(|l| &l.lambda);
    let results = map_runs(cfg.runs, cfg.workers, |i| run_one(cfg, i, lambda))?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => runs.push(rec),
            Err(f) => failures.push(f),
        }
    }
    summarize(cfg, runs, failures, limit.as_ref())
}

/// Deterministic reduction over runs in index order.
pub fn summarize(
    cfg: &EnsembleConfig,
    mut runs: Vec<RunRecord>,
    mut failures: Vec<FailedRun>,
    limit: Option<&LimitSet>,
) -> Result<EnsembleSummary, McError> {
    runs.sort_by_key(|r| r.index);
    failures.sort_by_key(|f| f.index);
    let model = &cfg.sim.model;
    let (d, delta) = (model.d(), model.delta_dim());
    let n = cfg.sim.horizon;

    let mut mean_design = vec![0.0; delta * delta];
    for r in &runs {
        for (acc, v) in mean_design.iter_mut().zip(&r.design_normalised) {
            *acc += v;
        }
    }
    let count = runs.len().max(1) as f64;
    mean_design.iter_mut().for_each(|v| *v /= count);
    let design_rel_error = limit.filter(|_| !runs.is_empty()).map(|l| {
        let mean = from_row_major(&mean_design, delta, delta);
        (mean - &l.lambda).norm() / l.lambda.norm()
    });

    let mut z = Vec::new();
    let mut coordinates = Vec::new();
    if let Some(l) = limit {
        for r in &runs {
            let dev = from_row_major(&r.theta_dev, delta, d);
            z.push(clt_statistic(&dev, &l.lambda, model.gamma(), n as f64)?);
        }
        for j in 0..delta * d {
            let col: Vec<f64> = z.iter().map(|row| row[j]).collect();
            let m = col.len() as f64;
            let mean = col.iter().sum::<f64>() / m;
            let variance = if col.len() > 1 {
                col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            coordinates.push(CoordinateStat {
                name: format!("Z_{}_{}", j / d + 1, j % d + 1),
                mean,
                variance,
                ks: ks_normality(&col),
            });
        }
    }

    let lil = match limit {
        Some(l) if !runs.is_empty() => {
            let paths: Vec<&[(u64, Vec<f64>)]> = runs.iter().map(|r| r.path.as_slice()).collect();
            Some(lil_band(&paths, &cfg.lil_u, &cfg.lil_v, &l.lambda_inv, model.gamma())?)
        }
        _ => None,
    };

    let errs = sorted(runs.iter().map(|r| r.theta_error).collect());
    Ok(EnsembleSummary {
        m: cfg.runs,
        n,
        mode: cfg.sim.mode,
        excitation_on: cfg.sim.excitation_on,
        rates: rate_diagnostics(&runs, cfg.sim.mode),
        median_theta_error: quantile(&errs, 0.5),
        runs,
        failures,
        mean_design,
        design_rel_error,
        z,
        coordinates,
        lil,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub case: String,
    pub excitation_on: bool,
    pub coordinate: String,
    /// Fraction of all `M` runs whose terminal error is below the threshold;
    /// failed runs count as not converged.
    pub fraction_below: f64,
    pub median_error: f64,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub threshold: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, case: &str, coordinate: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.case == case && r.coordinate == coordinate)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,excitation_on,coordinate,fraction_below,median_error,failed_runs\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.case,
                r.excitation_on,
                r.coordinate,
                linalg::fmt17(r.fraction_below),
                linalg::fmt17(r.median_error),
                r.failed_runs
            ));
        }
        out
    }
}

/// Diagonal entries of `A₁` and `B₁` as `(name, row of θ, column of θ)`.
pub fn diagonal_coordinates(model: &ArxModel) -> Vec<(String, usize, usize)> {
    let (d, p) = (model.d(), model.p());
    let mut out: Vec<_> = (0..d).map(|i| (format!("A_{0}{0}", i + 1), i, i)).collect();
    out.extend((0..d).map(|i| (format!("B_{0}{0}", i + 1), d * p + i, i)));
    out
}

fn ablation_rows(case: &str, cfg: &EnsembleConfig) -> Result<Vec<AblationRow>, McError> {
    let model = cfg.sim.model.clone();
    let (d, delta) = (model.d(), model.delta_dim());
    let results = map_runs(cfg.runs, cfg.workers, |i| {
        let mut sim_cfg = cfg.sim.clone();
        sim_cfg.seed = cfg.base_seed.wrapping_add(i as u64);
        sim_cfg.record_stride = usize::MAX;
        crate::sim::run(&sim_cfg).map(|t| row_major(&(&t.theta_hat - &t.theta)))
    })?;
    let failed_runs = results.iter().filter(|r| r.is_err()).count();
    let devs: Vec<Vec<f64>> = results.into_iter().filter_map(Result::ok).collect();
    Ok(diagonal_coordinates(&model)
        .into_iter()
        .map(|(name, row, col)| {
            let errs: Vec<f64> = devs.iter().map(|v| v[row * d + col].abs()).collect();
            let below = errs.iter().filter(|&&e| e < ABLATION_THRESHOLD).count();
            let _ = delta;
            AblationRow {
                case: case.to_string(),
                excitation_on: cfg.sim.excitation_on,
                coordinate: name,
                fraction_below: below as f64 / cfg.runs as f64,
                median_error: quantile(&sorted(errs), 0.5),
                failed_runs,
            }
        })
        .collect())
}

/// Paired ensembles with excitation on and off, plus an optional contrast
/// model run without excitation.
pub fn excitation_ablation(cfg: &EnsembleConfig, contrast: Option<&ArxModel>) -> Result<AblationReport, McError> {
    if cfg.runs == 0 {
        return Err(McError::NoRuns);
    }
    let mut on = cfg.clone();
    on.sim.excitation_on = true;
    let mut off = cfg.clone();
    off.sim.excitation_on = false;
    let mut rows = ablation_rows("excited", &on)?;
    rows.extend(ablation_rows("unexcited", &off)?);
    if let Some(m) = contrast {
        let mut c = off.clone();
        c.sim.model = m.clone();
        rows.extend(ablation_rows("unexcited_contrast", &c)?);
    }
    Ok(AblationReport {
        threshold: ABLATION_THRESHOLD,
        rows,
    })
}
