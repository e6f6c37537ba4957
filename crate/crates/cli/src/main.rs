//! `ctxforest`: phantom generation, training, prediction, refinement,
//! evaluation and model inspection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Preset;

/// A misuse of the command line discovered after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DATA: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "ctxforest",
    version,
    about = "Cartilage segmentation with semantic-context random forests"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CTXFOREST_THREADS")]
    threads: Option<usize>,

    /// TOML configuration; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base configuration the file and flags are applied on top of.
    #[arg(long, global = true, value_enum, default_value = "full")]
    preset: Preset,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic knee dataset and its manifest.
    Phantom(PhantomArgs),
    /// Train a cascade on every volume of a manifest.
    Train(TrainArgs),
    /// Write cartilage probability maps for every volume of a manifest.
    Predict(PredictArgs),
    /// Graph-cut refinement of `predict` outputs.
    Refine(RefineArgs),
    /// Dice report for refined labels, or cross-validation on a manifest.
    Eval(EvalArgs),
    /// Summarise a trained model.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid size: `N` or `X,Y,Z`.
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub volumes_per_subject: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Disable distance-to-landmark features.
    #[arg(long)]
    pub no_landmarks: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for maps, bands and `predictions.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    /// `predictions.csv` written by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Output directory for labels, audit logs and `labels.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub p_floor: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Manifest holding the ground truth.
    #[arg(long)]
    pub manifest: PathBuf,
    /// `labels.csv` written by `refine`; mutually exclusive with `--cv`.
    #[arg(long, conflicts_with_all = ["cv", "ablation"])]
    pub labels: Option<PathBuf>,
    /// Run k-fold grouped cross-validation instead.
    #[arg(long)]
    pub cv: Option<usize>,
    /// Run the six-variant ablation (implies cross-validation, default k = 3).
    #[arg(long)]
    pub ablation: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV report to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write gnuplot data and scripts into this directory.
    #[arg(long)]
    pub emit_gnuplot: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if let Some(e) = err.downcast_ref::<ctxforest_core::Error>() {
        return if e.is_io() { EXIT_IO } else { EXIT_DATA };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return EXIT_IO;
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = config::RunConfig::load(cli.config.as_deref(), cli.preset).and_then(|cfg| match &cli.command {
        Command::Phantom(a) => commands::phantom(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Predict(a) => commands::predict(cfg, a),
        Command::Refine(a) => commands::refine(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Inspect(a) => commands::inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
