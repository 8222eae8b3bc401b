//! TOML experiment files.
//!
//! ```toml
//! [model]
//! d = 2
//! p = 1
//! q = 1
//! a = [[[2.0, 0.0], [0.0, 0.0]]]          # A_1 .. A_p, each row by row
//! b = [[[0.75, 0.0], [0.0, -0.5]]]        # B_1 .. B_q
//! gamma = [[1.0, 0.0], [0.0, 1.0]]
//! delta = [[1.0, 0.0], [0.0, 1.0]]
//!
//! [run]
//! horizon = 1000
//! runs = 500
//! seed = 2026
//! estimator = "ls"      # or "wls" with wls_gamma
//!
//! [output]
//! dir = "out"
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::estimator::WeightMode;
use crate::matpoly::ArxModel;
use crate::mc::EnsembleConfig;
use crate::sim::{SimConfig, Trajectory};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot serialise config: {0}")]
    Serialise(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub p: usize,
    pub q: usize,
    pub a: Vec<Rows>,
    pub b: Vec<Rows>,
    pub gamma: Rows,
    pub delta: Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Ls,
    Wls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Zero,
    Decaying,
}

fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}
fn default_wls_gamma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: usize,
    #[serde(default = "default_one")]
    pub runs: usize,
    pub seed: u64,
    pub estimator: EstimatorKind,
    #[serde(default = "default_wls_gamma")]
    pub wls_gamma: f64,
    #[serde(default = "default_trajectory")]
    pub trajectory: TrajectoryKind,
    #[serde(default = "default_scale")]
    pub trajectory_scale: f64,
    #[serde(default = "default_true")]
    pub excitation: bool,
    #[serde(default = "default_one")]
    pub record_stride: usize,
    /// Not part of the digest: results do not depend on it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_trajectory() -> TrajectoryKind {
    TrajectoryKind::Zero
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: String,
    /// Also write the `D_k`, `P_k`, `Q_k` table.
    #[serde(default)]
    pub series_csv: bool,
    /// Run the excitation ablation with `montecarlo`.
    #[serde(default)]
    pub ablation: bool,
    /// `A_1 .. A_p` of a contrast model for the ablation; other blocks are
    /// shared with `[model]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast_a: Option<Vec<Rows>>,
}

fn default_dir() -> String {
    "out".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            series_csv: false,
            ablation: false,
            contrast_a: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn matrix(field: &str, rows: &Rows, d: usize) -> Result<DMatrix<f64>, ConfigError> {
    if rows.len() != d {
        return Err(invalid(field, format!("expected {d} rows, found {}", rows.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != d {
            return Err(invalid(
                format!("{field}[{i}]"),
                format!("expected {d} columns, found {}", row.len()),
            ));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("{field}[{i}][{j}]"), "value is not finite"));
        }
    }
    Ok(DMatrix::from_fn(d, d, |r, c| rows[r][c]))
}

fn matrices(field: &str, list: &[Rows], count: usize, d: usize) -> Result<Vec<DMatrix<f64>>, ConfigError> {
    if list.len() != count {
        return Err(invalid(
            field,
            format!("expected {count} matrices, found {}", list.len()),
        ));
    }
    list.iter()
        .enumerate()
        .map(|(i, m)| matrix(&format!("{field}[{i}]"), m, d))
        .collect()
}

fn spd(field: &str, m: &DMatrix<f64>) -> Result<(), ConfigError> {
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(invalid(field, "matrix is not symmetric"));
    }
    if m.clone().cholesky().is_none() {
        return Err(invalid(field, "matrix is not positive definite"));
    }
    Ok(())
}

impl ModelSection {
    /// Validated model; errors name the offending field.
    pub fn build(&self) -> Result<ArxModel, ConfigError> {
        let m = self;
        if m.d == 0 {
            return Err(invalid("model.d", "must be at least 1"));
        }
        if m.p == 0 {
            return Err(invalid("model.p", "must be at least 1"));
        }
        if m.q == 0 {
            return Err(invalid("model.q", "must be at least 1"));
        }
        let a = matrices("model.a", &m.a, m.p, m.d)?;
        let b = matrices("model.b", &m.b, m.q, m.d)?;
        let gamma = matrix("model.gamma", &m.gamma, m.d)?;
        let delta = matrix("model.delta", &m.delta, m.d)?;
        spd("model.gamma", &gamma)?;
        spd("model.delta", &delta)?;
        ArxModel::new(a, b, gamma, delta).map_err(|e| invalid("model", e.to_string()))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path).map_err(|source| crate::Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::parse(&text)?)
    }

    /// Checks every field before anything is computed.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model()?;
        let run = &self.run;
        if run.record_stride == 0 {
            return Err(invalid("run.record_stride", "must be at least 1"));
        }
        if run.estimator == EstimatorKind::Wls && !(run.wls_gamma > 0.0 && run.wls_gamma.is_finite()) {
            return Err(invalid("run.wls_gamma", "must be positive"));
        }
        if !run.trajectory_scale.is_finite() {
            return Err(invalid("run.trajectory_scale", "value is not finite"));
        }
        if let Some(a) = &self.output.contrast_a {
            matrices("output.contrast_a", a, self.model.p, self.model.d)?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ArxModel, ConfigError> {
        self.model.build()
    }

    pub fn contrast_model(&self) -> Result<Option<ArxModel>, ConfigError> {
        let Some(a) = &self.output.contrast_a else {
            return Ok(None);
        };
        let base = self.model()?;
        let a = matrices("output.contrast_a", a, self.model.p, self.model.d)?;
        ArxModel::new(a, base.b().to_vec(), base.gamma().clone(), base.delta().clone())
            .map(Some)
            .map_err(|e| invalid("output.contrast_a", e.to_string()))
    }

    pub fn mode(&self) -> WeightMode {
        match self.run.estimator {
            EstimatorKind::Ls => WeightMode::Ls,
            EstimatorKind::Wls => WeightMode::Wls {
                gamma: self.run.wls_gamma,
            },
        }
    }

    pub fn trajectory(&self) -> Trajectory {
        match self.run.trajectory {
            TrajectoryKind::Zero => Trajectory::Zero,
            TrajectoryKind::Decaying => Trajectory::Decaying {
                scale: self.run.trajectory_scale,
            },
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let mut sim = SimConfig::new(self.model()?, self.run.horizon, self.run.seed);
        sim.mode = self.mode();
        sim.trajectory = self.trajectory();
        sim.excitation_on = self.run.excitation;
        sim.record_stride = self.run.record_stride;
        Ok(sim)
    }

    pub fn ensemble_config(&self) -> Result<EnsembleConfig, ConfigError> {
        let mut ens = EnsembleConfig::new(self.sim_config()?, self.run.runs, self.run.seed);
        ens.workers = self.run.workers.unwrap_or(0);
        Ok(ens)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Serialise(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form with the worker count removed.
    pub fn digest(&self) -> Result<String, ConfigError> {
        let mut canon = self.clone();
        canon.run.workers = None;
        Ok(hex::encode(Sha256::digest(canon.to_toml()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
[model]
d = 2
p = 1
q = 1
a = [[[2.0, 0.0], [0.0, 0.0]]]
b = [[[0.75, 0.0], [0.0, -0.5]]]
gamma = [[1.0, 0.0], [0.0, 1.0]]
delta = [[1.0, 0.0], [0.0, 1.0]]

[run]
horizon = 100
runs = 4
seed = 9
estimator = "ls"
"#;

    #[test]
    fn parses_and_builds_model() {
        let cfg = ExperimentConfig::parse(EXAMPLE).unwrap();
        let m = cfg.model().unwrap();
        assert_eq!((m.d(), m.p(), m.q()), (2, 1, 1));
        assert_eq!(m.a()[0][(0, 0)], 2.0);
        assert_eq!(m.b()[0][(1, 1)], -0.5);
        assert!(cfg.run.excitation);
        assert_eq!(cfg.output, OutputSection::default());
        assert_eq!(cfg.mode(), WeightMode::Ls);
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::parse(EXAMPLE).unwrap();
        cfg.output.contrast_a = Some(vec![vec![vec![2.0, 0.0], vec![0.0, 1.0]]]);
        cfg.run.workers = Some(3);
        let echoed = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&echoed).unwrap(), cfg);
    }

    #[test]
    fn digest_ignores_workers() {
        let a = ExperimentConfig::parse(EXAMPLE).unwrap();
        let mut b = a.clone();
        b.run.workers = Some(8);
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let mut c = a.clone();
        c.run.seed = 10;
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 64);
    }

    fn field_of(text: &str) -> String {
        match ExperimentConfig::parse(text).unwrap_err() {
            ConfigError::Invalid { field, .. } => field,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn field_paths_in_errors() {
        let bad_row = EXAMPLE.replace("b = [[[0.75, 0.0], [0.0, -0.5]]]", "b = [[[0.75, 0.0], [0.0]]]");
        assert_eq!(field_of(&bad_row), "model.b[0][1]");
        let bad_count = EXAMPLE.replace("p = 1", "p = 2");
        assert_eq!(field_of(&bad_count), "model.a");
        let not_spd = EXAMPLE.replace("delta = [[1.0, 0.0], [0.0, 1.0]]", "delta = [[1.0, 0.0], [0.0, -1.0]]");
        assert_eq!(field_of(&not_spd), "model.delta");
        let asym = EXAMPLE.replace("gamma = [[1.0, 0.0], [0.0, 1.0]]", "gamma = [[1.0, 0.5], [0.0, 1.0]]");
        assert_eq!(field_of(&asym), "model.gamma");
        let wls = EXAMPLE.replace("estimator = \"ls\"", "estimator = \"wls\"\nwls_gamma = 0.0");
        assert_eq!(field_of(&wls), "run.wls_gamma");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = EXAMPLE.replace("seed = 9", "seed = 9\nsed = 3");
        assert!(matches!(ExperimentConfig::parse(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn wls_and_trajectory() {
        let text = EXAMPLE.replace(
            "estimator = \"ls\"",
            "estimator = \"wls\"\nwls_gamma = 0.5\ntrajectory = \"decaying\"\ntrajectory_scale = 2.0",
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg.mode(), WeightMode::Wls { gamma: 0.5 });
        assert_eq!(cfg.trajectory(), Trajectory::Decaying { scale: 2.0 });
        let sim = cfg.sim_config().unwrap();
        assert_eq!(sim.horizon, 100);
        assert_eq!(sim.seed, 9);
    }
}
