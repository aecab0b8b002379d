//! `tbcure`: simulate, fit, bootstrap, trajectory and benchmark commands.
//!
//! Exit codes: 0 success, 1 error, 2 finished but some fit did not converge.

mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "tbcure", version, about = "Cure-rate change-point joint model for tumor burden and progression time")]
struct Cli {
    /// Worker threads (default: available parallelism). Outputs do not
    /// depend on this setting.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic study.
    Simulate(SimulateArgs),
    /// Fit the joint model (one fit per arm when the schema names an arm column).
    Fit(FitArgs),
    /// Percentile bootstrap intervals for every parameter.
    Bootstrap(BootstrapArgs),
    /// Marginal trajectories, the treatment effect and its landmarks.
    Trajectory(TrajectoryArgs),
    /// Simulation study: bias, MSE and coverage tables.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Longitudinal CSV.
    #[arg(long)]
    pub long: PathBuf,
    /// Event CSV.
    #[arg(long)]
    pub events: PathBuf,
    /// Column-role schema (JSON). Defaults to `subject_id, visit_time, y,
    /// x*` and `subject_id, event_time, event, w*`.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Times in the input files are in days.
    #[arg(long)]
    pub input_days: bool,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario JSON; the flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Stable-group rate.
    #[arg(long)]
    pub pi: Option<f64>,
    /// Random-effect mean `omega,b0,b1,b2`.
    #[arg(long, allow_hyphen_values = true)]
    pub mu_r: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Two-arm study with these arm sizes, e.g. `202,198`.
    #[arg(long)]
    pub arms: Option<String>,
    /// Random-effect mean for the second (control) arm.
    #[arg(long, allow_hyphen_values = true)]
    pub control_mu_r: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fit settings (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Change-point-only model: π pinned at 0.
    #[arg(long)]
    pub baseline: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    /// Bootstrap replicates.
    #[arg(long = "B", default_value_t = 100)]
    pub b: usize,
    /// Start replicates from the default initializer instead of the
    /// full-data estimate.
    #[arg(long)]
    pub cold: bool,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    /// Fit result JSON, once per arm; the first is the treatment arm.
    #[arg(long = "fit")]
    pub fits: Vec<PathBuf>,
    #[arg(long)]
    pub long: Option<PathBuf>,
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub input_days: bool,
    /// Fit settings (JSON) for bootstrap refits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Arm treated as the treatment arm when arms come from the data.
    #[arg(long)]
    pub treatment: Option<String>,
    /// Bootstrap replicates for bands (needs the data files).
    #[arg(long = "B")]
    pub b: Option<usize>,
    /// `start,stop,step` in years.
    #[arg(long, default_value = "0.1,2.0,0.1")]
    pub grid: String,
    /// Monte Carlo draws per trajectory.
    #[arg(long, default_value_t = 2000)]
    pub draws: usize,
    /// Also emit the grid in days.
    #[arg(long)]
    pub days: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Benchmark JSON with optional `scenario`, `fit` and `options` blocks;
    /// the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub pi: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu_r: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Bootstrap replicates per fit (0 skips intervals).
    #[arg(long = "B")]
    pub b: Option<usize>,
    /// Also fit the change-point-only model.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub grid: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Bootstrap(a) => commands::bootstrap(a),
        Command::Trajectory(a) => commands::trajectory(a),
        Command::Benchmark(a) => commands::benchmark(a),
    };
    match result {
        Ok(commands::Outcome::Converged) => ExitCode::SUCCESS,
        Ok(commands::Outcome::NotConverged) => {
            eprintln!("warning: at least one fit stopped before meeting the convergence rule");
            ExitCode::from(2)
        }
        Err(e) => {
            // Library errors often repeat their source in their own message.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
