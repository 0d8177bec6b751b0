mod commands;
mod output;
mod verify;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mfrobust::model::MeanFieldJumpModel;
use mfrobust::riccati::GainMode;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "mfrobust",
    version,
    about = "Robust mean-field control: Riccati synthesis, simulation and policy iteration"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Model file (TOML).
    #[arg(long)]
    pub model: PathBuf,
    /// Attenuation level.
    #[arg(long, default_value_t = 5.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the coupled Riccati equations backward and write the trajectories.
    Riccati {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Integrator gain handling: frozen|stage.
        #[arg(long, default_value = "frozen")]
        mode: GainMode,
    },
    /// Bisect for the smallest feasible attenuation level.
    GammaSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value = "frozen")]
        mode: GainMode,
        #[arg(long, default_value_t = 0.1)]
        lo: f64,
        #[arg(long, default_value_t = 5.0)]
        hi: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Simulate the particle system under the synthesized control.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value = "frozen")]
        mode: GainMode,
        #[arg(long, default_value_t = 10_000)]
        particles: usize,
        /// Initial state as comma-separated values; all ones when omitted.
        #[arg(long)]
        x0: Option<String>,
        #[arg(long, value_enum, default_value_t = Disturbance::Worst)]
        disturbance: Disturbance,
        /// Number of independent runs in `random` mode.
        #[arg(long, default_value_t = 20)]
        runs: usize,
        /// Intensity of the random disturbance.
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        /// Number of particle paths of the first run to write.
        #[arg(long, default_value_t = 0)]
        paths: usize,
    },
    /// Learn the control and disturbance gains from trajectory data.
    Rl {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = DataMode::Oracle)]
        mode: DataMode,
        /// Learning intervals (default 1500 oracle, 10 sampled).
        #[arg(long)]
        intervals: Option<usize>,
        /// Simulation steps per interval (default 2 oracle, 20 sampled).
        #[arg(long)]
        substeps: Option<usize>,
        /// Initial-state populations.
        #[arg(long, default_value_t = 30)]
        populations: usize,
        /// Particles per population in sampled mode.
        #[arg(long, default_value_t = 10_000)]
        particles: usize,
        /// Stopping tolerance (default 1e-10 oracle, 1e-8 sampled).
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        /// Drop jump atoms instead of refusing the model.
        #[arg(long)]
        strip_jumps: bool,
    },
    /// Run the invariant checks on a model.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 10_000)]
        particles: usize,
        /// Lower end of the attenuation bracket.
        #[arg(long, default_value_t = 0.1)]
        lo: f64,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disturbance {
    /// The worst-case feedback disturbance.
    Worst,
    Zero,
    /// Independent white-noise disturbances, one per run.
    Random,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    /// Exact expectations.
    Oracle,
    /// Particle averages.
    Sampled,
}

pub fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        bail!("--{name} must be positive and finite, got {v}");
    }
    Ok(())
}

pub fn positive_count(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        bail!("--{name} must be positive");
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MeanFieldJumpModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read model file {}", path.display()))?;
    MeanFieldJumpModel::from_toml_str(&text).with_context(|| format!("invalid model file {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Command::Riccati { common, dt, mode } => commands::riccati(&common, dt, mode).map(|_| true),
        Command::GammaSearch { common, dt, mode, lo, hi, tol } => {
            commands::gamma_search(&common, dt, mode, lo, hi, tol).map(|_| true)
        }
        Command::Simulate { common, dt, mode, particles, x0, disturbance, runs, amplitude, paths } => {
            let opts = commands::SimulateOpts { dt, mode, particles, x0, disturbance, runs, amplitude, paths };
            commands::simulate(&common, &opts).map(|_| true)
        }
        Command::Rl { common, mode, intervals, substeps, populations, particles, eps, max_iter, strip_jumps } => {
            let opts =
                commands::RlOpts { mode, intervals, substeps, populations, particles, eps, max_iter, strip_jumps };
            commands::rl(&common, &opts).map(|_| true)
        }
        Command::Verify { common, dt, particles, lo } => verify::run(&common, dt, particles, lo),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
