use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "critscore", version, about = "Modified score tests and confidence regions for mixed models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Long-format CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Model formula, e.g. `y ~ 1 + x | re(1) + re(x)`.
    #[arg(long, default_value = "y ~ 1 + x | re(1) + re(x)")]
    pub formula: String,
    /// Group identifier column.
    #[arg(long, default_value = "group")]
    pub group: String,
    /// Treat the error standard deviation as known and equal to this value.
    #[arg(long = "sigma-known", value_name = "SIGMA")]
    pub sigma_known: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SimMode {
    Coverage,
    Power,
    Qq,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Modified score test of a parameter value; unspecified parameters are
    /// set to their maximum likelihood estimates.
    Test {
        #[command(flatten)]
        data: DataArgs,
        /// `lambda=a,b`, `psi=a,b` or `sigma=s`; repeatable.
        #[arg(long = "at", required = true)]
        at: Vec<String>,
    },
    /// Per-parameter modified score confidence intervals.
    Interval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Scan range `lo:hi:steps` for the scale parameters.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Joint confidence region for the scale parameters over a grid.
    Region {
        #[command(flatten)]
        data: DataArgs,
        /// `lo:hi:steps`, one per scale parameter.
        #[arg(long)]
        grid: Vec<String>,
        /// Comma-separated confidence levels.
        #[arg(long, default_value = "0.8,0.9,0.95,0.99")]
        level: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Maximum likelihood fit with modified score, Wald and likelihood ratio intervals.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Monte Carlo coverage, power or quantile experiment.
    Simulate {
        /// JSON experiment configuration; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<SimMode>,
        /// Null value `a,b` for power mode.
        #[arg(long)]
        null: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
        /// Summary CSV (or quantile CSV in qq mode).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-replication CSV.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Write a simulated unbalanced longitudinal dataset (columns group, y, x).
    Generate {
        #[arg(long, default_value_t = 100)]
        groups: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Scale of the random intercept and of the random slope.
        #[arg(long, default_value = "0,0.02")]
        lambda: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Test { data, at } => commands::test(&data, &at),
        Command::Interval { data, level, grid } => commands::interval(&data, level, grid.as_deref()),
        Command::Region { data, grid, level, out } => commands::region(&data, &grid, &level, out.as_deref()),
        Command::Fit { data, level, format } => commands::fit(&data, level, format),
        Command::Simulate {
            config,
            mode,
            null,
            seed,
            reps,
            level,
            out,
            raw,
        } => commands::simulate(commands::SimulateArgs {
            config,
            mode,
            null,
            seed,
            reps,
            level,
            out,
            raw,
        }),
        Command::Generate { groups, seed, lambda, out } => commands::generate(groups, seed, &lambda, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                if matches!(e, critscore::Error::SingularInformation { .. }) {
                    eprintln!(
                        "note: the information matrix is singular at the requested point; this is a critical \
                         point whose critical directions are not known to the model, so the modified score \
                         statistic is not defined there"
                    );
                }
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
