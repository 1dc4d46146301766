//! Experiment runner: synthetic data, plain and distilled training,
//! ablation matrices, parameter sweeps and summary reports.

pub mod config;
pub mod error;
pub mod matrix;
pub mod report;
pub mod run;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_pairs, Command, RunConfig};
pub use crate::error::CliError;
use crate::run::{execute, prepare, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "distillrec", version, about = "Sequential recommenders with teacher distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable. Takes precedence over --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for --set seed=N; for `synth` also sets data.seed and
    /// teacher.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Do not echo training progress to stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many total epochs, keeping a resumable state.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic dataset and teacher artifact.
    Synth(Common),
    /// Train a plain student.
    Train(TrainArgs),
    /// Train a student with ranking and embedding distillation.
    Distill(TrainArgs),
    /// Run an ablation matrix over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Built-in matrix: `ranking` or `embedding`.
        #[arg(long)]
        preset: Option<String>,
        /// Extra cell `name:key=value,key=value`; repeatable.
        #[arg(long)]
        cell: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Run one configuration per grid value of a distillation parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda_d, gamma_p, gamma_c, gamma_o or beta.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Summarize completed train/distill run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(command: Command, common: &Common) -> Result<RunConfig, CliError> {
    let file = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            parse_pairs(&text, &path.display().to_string())?
        }
        None => Vec::new(),
    };
    let mut overrides = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
        if command == Command::Synth {
            overrides.push(("data.seed".into(), seed.to_string()));
            overrides.push(("teacher.seed".into(), seed.to_string()));
        }
    }
    RunConfig::resolve(command, &file, &overrides)
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::Config(format!("seed `{s}` is not an integer"))))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds given".into()));
    }
    Ok(seeds)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn train_like(command: Command, args: &TrainArgs) -> Result<String, CliError> {
    let cfg = resolve(command, &args.common)?;
    let prepared = prepare(&cfg)?;
    let opts = RunOptions {
        out: Some(args.common.out.clone()),
        resume: args.resume,
        stop_after: args.stop_after,
        verbose: !args.common.quiet,
    };
    let outcome = execute(&cfg, &prepared, &opts)?;
    Ok(run::metrics_csv(&outcome))
}

/// Runs a parsed command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Cmd::Synth(common) => run::synth(&resolve(Command::Synth, common)?, &common.out),
        Cmd::Train(args) => train_like(Command::Train, args),
        Cmd::Distill(args) => train_like(Command::Distill, args),
        Cmd::Ablate {
            common,
            preset,
            cell,
            seeds,
        } => {
            let base = resolve(Command::Ablate, common)?;
            let mut cells = match preset {
                Some(p) => matrix::preset(p)?,
                None => Vec::new(),
            };
            for c in cell {
                cells.push(matrix::Cell::parse(c)?);
            }
            if cells.is_empty() {
                return Err(CliError::Config("ablate needs --preset or at least one --cell".into()));
            }
            matrix::ablate(&base, &cells, &parse_seeds(seeds)?, &common.out)
        }
        Cmd::Sweep {
            common,
            param,
            grid,
            seeds,
        } => {
            let base = resolve(Command::Sweep, common)?;
            matrix::sweep(&base, param, &matrix::parse_grid(grid)?, &parse_seeds(seeds)?, &common.out)
        }
        Cmd::Report { runs, out } => {
            let md = report::report(runs)?;
            if let Some(path) = out {
                write_text(path, &md)?;
            }
            Ok(md)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    run(&cli)
}
