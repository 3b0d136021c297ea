//! `contra`: train, calibrate and query conformal flow regions.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contra::{Error, ErrorKind, Result};

use crate::commands::PredictOptions;
use crate::config::{PredictConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "contra", version, about = "Conformal prediction regions from conditional normalizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured dataset as CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output file (default: <output_dir>/data.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the configured method on the training block.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Calibrate a trained model on the calibration block.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Region artifacts for test inputs.
    Predict {
        #[arg(long)]
        predictor: PathBuf,
        /// Optional config whose [predict] table sets the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// A comma-separated input vector; repeatable.
        #[arg(long = "x", value_delimiter = ';')]
        x: Vec<String>,
        /// CSV of inputs with a header row.
        #[arg(long)]
        x_file: Option<PathBuf>,
        /// CSV of outputs, one per input, for membership checks.
        #[arg(long)]
        y_file: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        boundary_points: Option<usize>,
        #[arg(long)]
        volume_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the replicated comparison in the [eval] table.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print calibration latent diagnostics as JSON.
    Diagnose {
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long, default_value_t = contra::conformal::DEFAULT_DISPERSION_FACTOR)]
        factor: f64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 3,
        ErrorKind::Data => 4,
        ErrorKind::Numeric => 5,
        ErrorKind::Io => 6,
    }
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("cannot parse {t:?} in input vector {s:?}")))
        })
        .collect()
}

/// One line to stdout; a closed pipe is not an error.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let path = commands::generate(&RunConfig::load(&config)?, out)?;
            emit(&path.display().to_string());
        }
        Command::Train { config } => {
            let path = commands::train(&RunConfig::load(&config)?)?;
            emit(&path.display().to_string());
        }
        Command::Calibrate { config, model } => {
            let path = commands::calibrate(&RunConfig::load(&config)?, &model)?;
            emit(&path.display().to_string());
        }
        Command::Predict {
            predictor,
            config,
            x,
            x_file,
            y_file,
            out,
            boundary_points,
            volume_samples,
            seed,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let defaults = cfg.as_ref().map(|c| c.predict.clone()).unwrap_or_default();
            let mut xs = x.iter().map(|s| parse_vector(s)).collect::<Result<Vec<_>>>()?;
            let pred = commands::load_predictor(&predictor)?;
            if let Some(path) = &x_file {
                xs.extend(commands::read_matrix(path, pred.input_dim())?);
            }
            if xs.is_empty() {
                return Err(Error::Config("predict needs --x or --x-file".into()));
            }
            let ys = y_file.as_deref().map(|p| commands::read_matrix(p, pred.output_dim())).transpose()?;
            let out_dir = match (out, &cfg) {
                (Some(o), _) => o,
                (None, Some(c)) => c.output_dir.join("predict"),
                (None, None) => PathBuf::from("predict"),
            };
            let PredictConfig {
                boundary_points: bp,
                volume_samples: vs,
                levels,
                scatter_samples,
                seed: s,
            } = defaults;
            let opts = PredictOptions {
                x: xs,
                y: ys,
                out_dir,
                boundary_points: boundary_points.unwrap_or(bp),
                volume_samples: volume_samples.unwrap_or(vs),
                levels,
                scatter_samples,
                seed: seed.unwrap_or(s),
            };
            if opts.boundary_points < 3 {
                return Err(Error::Config("--boundary-points must be at least 3".into()));
            }
            if opts.volume_samples < 100 {
                return Err(Error::Config("--volume-samples must be at least 100".into()));
            }
            for path in commands::predict(&pred, &opts)? {
                emit(&path.display().to_string());
            }
        }
        Command::Eval { config } => {
            let report = commands::eval(&RunConfig::load(&config)?)?;
            emit(report.table().trim_end());
        }
        Command::Diagnose { predictor, factor } => {
            let d = commands::diagnose(&predictor, factor)?;
            emit(&serde_json::to_string_pretty(&d)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
