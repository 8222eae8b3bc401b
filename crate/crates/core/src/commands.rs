//! Work behind each CLI subcommand. Every function takes a parsed config and
//! an output directory and writes its files there; nothing here reads the
//! clock or the environment, so outputs depend only on `(config, seed)`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::estimator::{EstimatorState, WeightMode};
use crate::limitmat::{self, CrossCheck, LimitSet, LimitSummary};
use crate::linalg;
use crate::matpoly::{self, ArxModel};
use crate::mc::{self, AblationReport, EnsembleSummary};
use crate::series::{SeriesError, SeriesOptions, SeriesTable};
use crate::sim;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_SELFTEST: i32 = 4;

/// Maps an error onto the exit-code contract. A non-causal `B` is a property
/// of the configured model, so it counts as a config error.
pub fn exit_code(err: &Error) -> i32 {
    use crate::limitmat::LimitError;
    match err {
        Error::Config(_) | Error::Io { .. } | Error::Model(_) => EXIT_CONFIG,
        Error::Series(SeriesError::NotCausal(_) | SeriesError::Model(_) | SeriesError::BadTolerance(_)) => EXIT_CONFIG,
        Error::Limit(LimitError::Series(_)) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let io = |source, path: &Path| Error::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| io(e, &path))?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serialises");
    s.push('\n');
    s
}

/// Writes `config.toml` as parsed (worker count dropped) next to the outputs.
fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    let mut echo = cfg.clone();
    echo.run.workers = None;
    write_file(dir, "config.toml", &echo.to_toml()?)
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitReport {
    pub config_digest: String,
    pub d: usize,
    pub p: usize,
    pub q: usize,
    pub spectral_radius: f64,
    pub truncation_order: usize,
    pub tail_bound: f64,
    pub truncation_capped: bool,
    pub lambda_positive_definite: bool,
    pub schur_positive_definite: bool,
    pub det_lambda: f64,
    pub cross_check: CrossCheck,
    pub matrices: LimitSummary,
}

/// `Λ` and friends as long-format CSV: `matrix,row,col,value`.
pub fn limit_csv(limit: &LimitSet) -> String {
    let mut out = String::from("matrix,row,col,value\n");
    let blocks: [(&str, &DMatrix<f64>); 6] = [
        ("H", &limit.h),
        ("K", &limit.k),
        ("L", &limit.l),
        ("Lambda", &limit.lambda),
        ("S", &limit.s),
        ("Lambda_inv", &limit.lambda_inv),
    ];
    for (name, m) in blocks {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.push_str(&format!("{name},{},{},{}\n", r + 1, c + 1, linalg::fmt17(m[(r, c)])));
            }
        }
    }
    out.push_str(&format!("det_Lambda,1,1,{}\n", linalg::fmt17(limit.det_lambda)));
    out
}

pub fn limit_report(model: &ArxModel, digest: String) -> Result<(SeriesTable, LimitSet, LimitReport)> {
    let spectral_radius = matpoly::require_causal(model, matpoly::DEFAULT_CAUSALITY_MARGIN)?;
    let series = SeriesTable::build(model, &SeriesOptions::default())?;
    let limit = limitmat::limit_set_from_series(model, &series)?;
    let tol = limitmat::default_cross_check_tol(model, &series);
    let cross_check = limitmat::series_cross_check(model, &series, &limit, tol);
    let (lambda_pd, s_pd, _) = limit.positive_definite();
    let report = LimitReport {
        config_digest: digest,
        d: model.d(),
        p: model.p(),
        q: model.q(),
        spectral_radius,
        truncation_order: series.kmax,
        tail_bound: series.tail_bound,
        truncation_capped: series.capped,
        lambda_positive_definite: lambda_pd,
        schur_positive_definite: s_pd,
        det_lambda: limit.det_lambda,
        cross_check,
        matrices: limit.summary(),
    };
    Ok((series, limit, report))
}

/// `limit_matrix.csv`, `limit_matrix.json`, optionally `series.csv`.
pub fn cmd_limit_matrix(cfg: &ExperimentConfig, out: &Path, series_csv: bool) -> Result<LimitReport> {
    let model = cfg.model()?;
    let (series, limit, report) = limit_report(&model, cfg.digest()?)?;
    echo_config(cfg, out)?;
    write_file(out, "limit_matrix.csv", &limit_csv(&limit))?;
    write_file(out, "limit_matrix.json", &to_json(&report))?;
    if series_csv || cfg.output.series_csv {
        write_file(out, "series.csv", &series.to_csv())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub config_digest: String,
    pub seed: u64,
    pub horizon: usize,
    pub steps: u64,
    pub mode: WeightMode,
    pub excitation_on: bool,
    pub theta_hat: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub theta_error: f64,
    pub cost: Vec<Vec<f64>>,
    pub delta_avg: Vec<Vec<f64>>,
    pub gamma_avg: Vec<Vec<f64>>,
    pub cost_gap: f64,
    pub s_n: f64,
    pub max_identity_residual: f64,
}

/// `trace.csv` and `summary.json` for one run.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path, verbose: bool) -> Result<SimulateSummary> {
    let mut sim_cfg = cfg.sim_config()?;
    sim_cfg.verbose = verbose;
    let trace = sim::run(&sim_cfg)?;
    let summary = SimulateSummary {
        config_digest: cfg.digest()?,
        seed: sim_cfg.seed,
        horizon: sim_cfg.horizon,
        steps: trace.steps,
        mode: sim_cfg.mode,
        excitation_on: sim_cfg.excitation_on,
        theta_hat: linalg::to_rows(&trace.theta_hat),
        theta: linalg::to_rows(&trace.theta),
        theta_error: trace.theta_error(),
        cost: linalg::to_rows(&trace.cost),
        delta_avg: linalg::to_rows(&trace.delta_avg),
        gamma_avg: linalg::to_rows(&trace.gamma_avg),
        cost_gap: (&trace.cost - &trace.delta_avg).norm(),
        s_n: trace.s_n,
        max_identity_residual: trace.max_identity_residual,
    };
    echo_config(cfg, out)?;
    write_file(out, "trace.csv", &trace.to_csv())?;
    write_file(out, "summary.json", &to_json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub config_digest: String,
    pub base_seed: u64,
    #[serde(flatten)]
    pub ensemble: EnsembleSummary,
    pub ablation: Option<AblationReport>,
}

/// `ensemble.json`, `z_matrix.csv` and, when requested, `ablation.csv`.
/// `workers` overrides the config and never changes the outputs.
pub fn cmd_montecarlo(cfg: &ExperimentConfig, out: &Path, workers: Option<usize>) -> Result<MonteCarloReport> {
    let mut ens = cfg.ensemble_config()?;
    if let Some(w) = workers {
        ens.workers = w;
    }
    let ensemble = mc::run_ensemble(&ens)?;
    let ablation = if cfg.output.ablation {
        let contrast = cfg.contrast_model()?;
        Some(mc::excitation_ablation(&ens, contrast.as_ref())?)
    } else {
        None
    };
    let report = MonteCarloReport {
        config_digest: cfg.digest()?,
        base_seed: ens.base_seed,
        ensemble,
        ablation,
    };
    echo_config(cfg, out)?;
    write_file(out, "ensemble.json", &to_json(&report))?;
    write_file(out, "z_matrix.csv", &report.ensemble.z_csv())?;
    if let Some(a) = &report.ablation {
        write_file(out, "ablation.csv", &a.to_csv())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    pub pass: bool,
}

fn diag_model() -> ArxModel {
    ArxModel::new(
        vec![crate::linalg::diag(&[2.0, 0.0])],
        vec![crate::linalg::diag(&[0.75, -0.5])],
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
    )
    .expect("valid model")
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match run() {
        Ok((pass, detail)) => Check { name, pass, detail },
        Err(e) => Check {
            name,
            pass: false,
            detail: e.to_string(),
        },
    }
}

/// Fast built-in checks; writes `selftest.json` when `out` is given.
pub fn selftest(out: Option<&Path>) -> Result<SelftestReport> {
    let model = diag_model();
    let mut checks = Vec::new();

    checks.push(check("diagonal model limit matrix", || {
        let (_, lim) = limitmat::limit_set(&model)?;
        #[rustfmt::skip]
        let expect = DMatrix::from_row_slice(4, 4, &[
            42.0, 0.0, 21.0, 0.0,
            0.0, 42.0, 0.0, 21.0,
            21.0, 0.0, 576.0, 0.0,
            0.0, 21.0, 0.0, 28.0,
        ]) / 21.0;
        let err = linalg::max_abs(&(&lim.lambda - expect));
        let det_err = (lim.det_lambda - 89.7619).abs();
        Ok((
            err <= 1e-6 && det_err <= 1e-4,
            format!("max entry error {err:e}, det {}", lim.det_lambda),
        ))
    }));

    checks.push(check("series cross-check", || {
        let (series, lim) = limitmat::limit_set(&model)?;
        let c = limitmat::series_cross_check(
            &model,
            &series,
            &lim,
            limitmat::default_cross_check_tol(&model, &series),
        );
        Ok((c.pass, format!("discrepancy {:e} (tol {:e})", c.max_discrepancy, c.tol)))
    }));

    checks.push(check("block inverse", || {
        let (_, lim) = limitmat::limit_set(&model)?;
        let n = lim.lambda.nrows();
        let err = linalg::max_abs(&(&lim.lambda * &lim.lambda_inv - DMatrix::identity(n, n)));
        Ok((err <= 1e-8, format!("|Lambda Lambda^-1 - I| = {err:e}")))
    }));

    checks.push(check("recursive estimator vs batch solve", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = EstimatorState::zeros(3, 2, WeightMode::Wls { gamma: 1.0 })?;
        let mut s = DMatrix::<f64>::identity(3, 3);
        let mut rhs = DMatrix::<f64>::zeros(3, 2);
        for _ in 0..200 {
            let phi = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let u = DVector::zeros(2);
            let a = st.update(&phi, &x, &u)?;
            s += a * &phi * phi.transpose();
            rhs += a * &phi * x.transpose();
        }
        let batch = s
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| DMatrix::from_element(3, 2, f64::NAN));
        let err = linalg::max_abs(&(batch - &st.theta_hat));
        Ok((err <= 1e-8, format!("max deviation {err:e}")))
    }));

    checks.push(check("closed-loop identity and determinism", || {
        let cfg = sim::SimConfig::new(model.clone(), 300, 42);
        let a = sim::run(&cfg)?;
        let b = sim::run(&cfg)?;
        let same = a.to_csv() == b.to_csv();
        Ok((
            same && a.max_identity_residual <= 1e-9,
            format!("identical: {same}, residual {:e}", a.max_identity_residual),
        ))
    }));

    checks.push(check("non-causal model rejected", || {
        let bad = ArxModel::new(
            vec![DMatrix::zeros(1, 1)],
            vec![DMatrix::from_element(1, 1, 2.0)],
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )?;
        let rejected = matches!(limitmat::limit_set(&bad), Err(crate::limitmat::LimitError::Series(_)));
        Ok((rejected, format!("rejected: {rejected}")))
    }));

    let pass = checks.iter().all(|c| c.pass);
    let report = SelftestReport { checks, pass };
    if let Some(dir) = out {
        write_file(dir, "selftest.json", &to_json(&report))?;
    }
    Ok(report)
}
