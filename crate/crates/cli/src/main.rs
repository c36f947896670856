//! `v2m`: extract features, synthesize data, train, generate, evaluate and
//! render.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "v2m", version, about = "Chord generation conditioned on video features")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true, env = "V2M_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "V2M_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, env = "V2M_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, global = true, env = "V2M_LR")]
    lr: Option<f64>,
    /// Weight of the chord loss; the emotion loss gets 1 - lambda.
    #[arg(long, global = true, env = "V2M_LAMBDA")]
    lambda: Option<f64>,
    #[arg(long, global = true, env = "V2M_HEADS")]
    heads: Option<usize>,
    /// Encoder and decoder depth.
    #[arg(long, global = true, env = "V2M_LAYERS")]
    layers: Option<usize>,
    #[arg(long, global = true, env = "V2M_TMAX")]
    tmax: Option<usize>,
    /// Zero wall-clock columns so logs repeat byte for byte.
    #[arg(long, global = true, env = "V2M_DETERMINISTIC")]
    deterministic: bool,
    #[arg(long, global = true, env = "V2M_DATA")]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress to stderr (-vv for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build feature records from raw per-record input directories.
    Extract(commands::ExtractArgs),
    /// Write a synthetic dataset with a manifest.
    Synth(commands::SynthArgs),
    /// Train the chord model; writes model.ckpt and train_log.csv.
    Train(commands::TrainArgs),
    /// Train the density/loudness regressor; writes regressor.ckpt and regressor_log.csv.
    TrainRegressor(commands::TrainRegressorArgs),
    /// Generate chords for a feature file and render them to MIDI.
    Generate(commands::GenerateArgs),
    /// Score a checkpoint on a dataset split and write confusion matrices.
    Evaluate(commands::EvaluateArgs),
    /// Render a chord text file to MIDI.
    Render(commands::RenderArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    let file = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: g.seed,
        epochs: g.epochs,
        lr: g.lr,
        lambda: g.lambda,
        heads: g.heads,
        layers: g.layers,
        t_max: g.tmax,
        deterministic: g.deterministic,
        data: g.data,
        out: g.out,
    };
    let regressor_lr = matches!(cli.command, Command::TrainRegressor(_));
    let cfg = file.resolve(&overrides, regressor_lr)?;
    log::debug!("resolved configuration: {cfg:?}");
    match cli.command {
        Command::Extract(a) => commands::extract(&cfg, &a),
        Command::Synth(a) => commands::synth(&cfg, &a),
        Command::Train(a) => commands::train(&cfg, &a),
        Command::TrainRegressor(a) => commands::train_regressor(&cfg, &a),
        Command::Generate(a) => commands::generate(&cfg, &a),
        Command::Evaluate(a) => commands::evaluate(&cfg, &a),
        Command::Render(a) => commands::render(&cfg, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
