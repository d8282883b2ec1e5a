//! Command-line entry point: dataset generation, training, evaluation, and
//! parameter sweeps, all driven by a JSON experiment config.
//!
//! Exit codes: 0 on success, 2 for usage or config problems (including
//! malformed JSON and unknown predictor or parameter names), 1 for runtime
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coarse2fine::experiment::{
    cmd_evaluate, cmd_gen_data, cmd_sweep, cmd_train, ExperimentConfig, SweepParameter,
};
use coarse2fine::{Error, Result};

#[derive(Parser)]
#[command(
    name = "coarse2fine",
    version,
    about = "Predict fine-resolution scalar fields from coarse tile-average labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write its manifest and tiles.
    GenData(CommonArgs),
    /// Train the configured predictor once per seed.
    Train(PredictorArgs),
    /// Score trained checkpoints; writes metrics, maps, and pair dumps.
    Evaluate(PredictorArgs),
    /// Retrain or re-filter across a grid of parameter values.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output` field.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictorArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// cs-sunet, vanilla-unet, pixel-nn, ridge, or fine-unet; overrides the
    /// config's `predictor` field.
    #[arg(long)]
    predictor: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    predictor: PredictorArgs,
    /// Swept parameter: lambda, tau, min-soundings, or alpha.
    #[arg(long)]
    param: String,
    /// Comma-separated parameter values, e.g. `0,0.5,100`.
    #[arg(long)]
    values: String,
}

fn load_config(common: &CommonArgs, predictor: Option<&str>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(name) = predictor {
        config.predictor = name.parse()?;
    }
    let out = common.out.clone().unwrap_or_else(|| config.output.clone());
    Ok((config, out))
}

fn parse_values(text: &str) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    text.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .map_err(|_| Error::Config(format!("sweep value '{}' is not a number", t)))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let (config, out) = load_config(&args, None)?;
            let summary = cmd_gen_data(&config, &out)?;
            println!("wrote {}", summary.manifest_path.display());
            println!("wrote {}", summary.tiles_path.display());
            println!(
                "tiles: {} train / {} val / {} test",
                summary.train_tiles, summary.val_tiles, summary.test_tiles
            );
        }
        Command::Train(args) => {
            let (config, out) = load_config(&args.common, args.predictor.as_deref())?;
            for path in cmd_train(&config, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Evaluate(args) => {
            let (config, out) = load_config(&args.common, args.predictor.as_deref())?;
            let path = cmd_evaluate(&config, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Sweep(args) => {
            let (config, out) =
                load_config(&args.predictor.common, args.predictor.predictor.as_deref())?;
            let parameter: SweepParameter = args.param.parse()?;
            let values = parse_values(&args.values)?;
            let (path, rows) = cmd_sweep(&config, parameter, &values, &out)?;
            for row in &rows {
                println!(
                    "{} = {} -> fine-val NRMSE {} ({} runs)",
                    row.parameter, row.value, row.val_fine_nrmse, row.runs
                );
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(if e.is_user_input() { 2 } else { 1 })
        }
    }
}
