//! `walkctl`: run closed-loop scenarios, tune the joint-velocity filter and
//! dump gait references.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (a layer error or a fall),
//! 2 on a usage or configuration error. Log verbosity follows `WALKCTL_LOG`
//! (`error`, `warn`, `info`, `debug`), default `warn`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "walkctl", version, about = "Centroidal MPC walking stack")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rhp,
    Mpc,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the scenario of a configuration file in closed loop.
    Run {
        config: PathBuf,
        /// Feedback mode of the trajectory adjustment layer.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Directory for traces, summary and the effective configuration.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tune the joint-velocity Kalman filter on a recorded dataset.
    TuneKf {
        dataset: PathBuf,
        /// Configuration file supplying the GA and filter settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated joint names; all joints when omitted.
        #[arg(long, value_delimiter = ',')]
        joints: Option<Vec<String>>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the references the gait generator produces for the configured command.
    Gen {
        config: PathBuf,
        /// Span of the references, seconds.
        #[arg(long)]
        horizon: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Why a command stopped.
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WALKCTL_LOG", "warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Cmd::Run {
            config,
            mode,
            out,
            seed,
        } => commands::run(
            &config,
            mode.map(|m| match m {
                Mode::Rhp => walkctl::sim::RunMode::Rhp,
                Mode::Mpc => walkctl::sim::RunMode::Mpc,
            }),
            out,
            seed,
        ),
        Cmd::TuneKf {
            dataset,
            config,
            joints,
            seed,
            out,
        } => commands::tune_kf(&dataset, config.as_deref(), joints, seed, out),
        Cmd::Gen { config, horizon, out } => commands::gen(&config, horizon, out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
