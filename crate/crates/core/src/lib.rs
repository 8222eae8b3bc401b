//! Persistently excited adaptive tracking for multidimensional ARX(p, q)
//! processes.
//!
//! The crate is organised bottom-up:
//!
//! * [`matpoly`]: the model `A(R) X_{n+1} = B(R) U_n + ε_{n+1}` and the
//!   causality test on `B`.
//! * [`series`]: power-series coefficients of `B⁻¹(z)` and
//!   `B⁻¹(z)(A(z) − I)`.
//! * [`limitmat`]: the limiting matrix `Λ` of the normalised design matrix,
//!   its Schur complement, block inverse and determinant.
//! * [`estimator`]: recursive LS / WLS estimation of `θ`.
//! * [`sim`]: the closed loop under excited certainty-equivalence control.
//! * [`mc`]: seed ensembles and the statistics built on them.
//! * [`config`] and [`commands`]: the experiment file format and the work
//!   behind each CLI subcommand.

pub mod commands;
pub mod config;
pub mod estimator;
pub mod limitmat;
pub(crate) mod linalg;
pub mod matpoly;
pub mod mc;
pub mod series;
pub mod sim;

pub use estimator::{EstimatorState, WeightMode};
pub use limitmat::LimitSet;
pub use matpoly::ArxModel;
pub use series::SeriesTable;
pub use sim::{SimConfig, SimTrace, Trajectory};

/// Workspace-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] matpoly::ModelError),
    #[error(transparent)]
    Series(#[from] series::SeriesError),
    #[error(transparent)]
    Limit(#[from] limitmat::LimitError),
    #[error(transparent)]
    Estimator(#[from] estimator::EstimatorError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Mc(#[from] mc::McError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
