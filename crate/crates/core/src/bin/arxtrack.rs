use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use arxtrack::commands::{self, EXIT_OK, EXIT_SELFTEST};
use arxtrack::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "arxtrack",
    version,
    about = "Adaptive tracking for ARX models: limit matrices, simulation, Monte Carlo"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// H, K, L, Λ, S, Λ⁻¹ and det Λ for the configured model.
    LimitMatrix {
        #[command(flatten)]
        common: Common,
        /// Also write the D_k, P_k, Q_k table.
        #[arg(long)]
        series_csv: bool,
    },
    /// One closed-loop run.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Seed ensemble with CLT, rate and LIL statistics.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Built-in numerical checks.
    Selftest {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        verbose: bool,
    },
}

fn init_logging(verbose: bool) {
    let level = if verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn load(common: &Common) -> arxtrack::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    Ok((cfg, out))
}

fn run(cli: Cli) -> arxtrack::Result<i32> {
    match cli.command {
        Command::LimitMatrix { common, series_csv } => {
            init_logging(common.verbose);
            let (cfg, out) = load(&common)?;
            let report = commands::cmd_limit_matrix(&cfg, &out, series_csv)?;
            print!(
                "{}",
                std::fs::read_to_string(out.join("limit_matrix.csv")).unwrap_or_default()
            );
            println!("det_Lambda = {:.10}", report.det_lambda);
            println!(
                "cross-check discrepancy {:e} (tol {:e}): {}",
                report.cross_check.max_discrepancy,
                report.cross_check.tol,
                if report.cross_check.pass { "ok" } else { "FAILED" }
            );
            println!("wrote {}", out.display());
        }
        Command::Simulate { common } => {
            init_logging(common.verbose);
            let (cfg, out) = load(&common)?;
            let s = commands::cmd_simulate(&cfg, &out, common.verbose)?;
            println!("{} steps, |theta_hat - theta|^2 = {:e}", s.steps, s.theta_error);
            println!("wrote {}", out.display());
        }
        Command::Montecarlo { common, workers } => {
            init_logging(common.verbose);
            let (cfg, out) = load(&common)?;
            let r = commands::cmd_montecarlo(&cfg, &out, workers.or(cfg.run.workers))?;
            let e = &r.ensemble;
            println!("{} runs ({} failed), N = {}", e.m, e.failures.len(), e.n);
            for c in &e.coordinates {
                println!(
                    "{:>8}  mean {:+.4}  var {:.4}  KS {:.4}",
                    c.name, c.mean, c.variance, c.ks
                );
            }
            if let Some(err) = e.design_rel_error {
                println!("mean normalised design vs Lambda: relative error {err:.4}");
            }
            println!("wrote {}", out.display());
        }
        Command::Selftest { out, verbose } => {
            init_logging(verbose);
            let report = commands::selftest(out.as_deref().map(Path::new))?;
            for c in &report.checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if !report.pass {
                return Ok(EXIT_SELFTEST);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
