use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use avin_cli::commands::{self, GradCheckArgs};
use avin_cli::config::ConfigArgs;
use avin_cli::{CliError, Result};
use avin_core::gradcheck::suite::Target;
use avin_core::gradcheck::{DEFAULT_STEP, DEFAULT_TOLERANCE};
use clap::{Parser, Subcommand};

/// Audio-visual induction: synthetic data, training, localization and metrics.
#[derive(Debug, Parser)]
#[command(name = "avin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset (train/eval splits and a manifest).
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train both projectors; writes checkpoints and a JSON-lines report.
    Train {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write one normalized heatmap per sample of a feature file.
    Localize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// AVF file with `visual` and `audio` tensors.
        #[arg(long)]
        features: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Print a text-art preview of the first N heatmaps.
        #[arg(long, default_value_t = 0)]
        preview: usize,
    },
    /// Score heatmaps against annotator boxes (cIoU at `t` and AUC).
    Eval {
        #[arg(long)]
        heatmaps: PathBuf,
        /// AVF file with a `boxes` tensor, e.g. a dataset split.
        #[arg(long)]
        boxes: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// visual-loss, audio-loss, visual-projector or audio-projector; all when omitted.
        #[arg(long = "target", value_parser = parse_target)]
        targets: Vec<Target>,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Random directional probes per instance; 0 checks every coordinate.
        #[arg(long, default_value_t = 0)]
        probes: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Normalized-cut bipartition of a token file (`tokens` as [C,H,W] or [n,C]).
    Ncut {
        #[arg(long)]
        tokens: PathBuf,
        /// Optional AVF output with the `mask` and `eigenvector`.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn parse_target(s: &str) -> std::result::Result<Target, String> {
    Target::from_name(s).ok_or_else(|| {
        let names: Vec<_> = Target::ALL.iter().map(|t| t.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth { out: dir, config } => commands::synth(&config.resolve()?, &dir, out),
        Command::Train { data, out: dir, config } => commands::train(&config.resolve()?, &data, &dir, out),
        Command::Localize {
            checkpoint,
            features,
            out: file,
            preview,
        } => commands::localize(&checkpoint, &features, &file, preview, out).map(|_| ()),
        Command::Eval {
            heatmaps,
            boxes,
            config,
        } => commands::eval(&config.resolve()?, &heatmaps, &boxes, out).map(|_| ()),
        Command::Gradcheck {
            targets,
            instances,
            step,
            tolerance,
            probes,
            config,
        } => {
            let args = GradCheckArgs {
                targets: if targets.is_empty() {
                    Target::ALL.to_vec()
                } else {
                    targets
                },
                instances,
                step,
                tolerance,
                probes,
            };
            commands::gradcheck(&config.resolve()?, &args, out)
        }
        Command::Ncut {
            tokens,
            out: file,
            config,
        } => commands::ncut(&config.resolve()?, &tokens, file.as_ref(), out),
        Command::Config { config } => {
            let cfg = config.resolve()?;
            cfg.validate()?;
            write!(out, "{}", cfg.to_toml()).map_err(CliError::io("<stdout>"))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
