mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ale::data::SynthConfig;
use ale::pipeline::TrainConfig;

use commands::{EvalConfig, InferConfig};
use error::CliError;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Articulated local-element surface codec.
#[derive(Parser)]
#[command(name = "ale", version, about)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted override applied after the config file, e.g. `model.hidden=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clothed-body dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest (overrides the config).
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Export predicted point clouds as PLY files.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        template: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        /// Pose file (repeatable).
        #[arg(long, value_name = "PATH")]
        poses: Vec<PathBuf>,
        /// Adaptive sampling density in points per square meter.
        #[arg(long, value_name = "FLOAT")]
        density: Option<f64>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        /// Ground-truth draws per frame.
        #[arg(long, value_name = "INT")]
        repeats: Option<usize>,
    },
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp(None).init();
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("ALE_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("ALE_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Synth { common } => {
            let mut cfg: SynthConfig = config::load(common.config.as_deref(), &common.overrides)?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            commands::synth(&cfg, &out_dir(&common, "data"))?;
        }
        Command::Train { common, manifest } => {
            let mut cfg: TrainConfig = config::load(common.config.as_deref(), &common.overrides)?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.manifest = manifest.or(cfg.manifest);
            commands::train_cmd(&cfg, &out_dir(&common, "run"))?;
        }
        Command::Infer { common, checkpoint, template, manifest, poses, density } => {
            let mut cfg: InferConfig = config::load(common.config.as_deref(), &common.overrides)?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.template = template.or(cfg.template);
            cfg.manifest = manifest.or(cfg.manifest);
            if !poses.is_empty() {
                cfg.poses = poses;
            }
            cfg.density = density.or(cfg.density);
            commands::infer(&cfg, &out_dir(&common, "infer"))?;
        }
        Command::Eval { common, checkpoint, manifest, repeats } => {
            let mut cfg: EvalConfig = config::load(common.config.as_deref(), &common.overrides)?;
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.manifest = manifest.or(cfg.manifest);
            cfg.repeats = repeats.unwrap_or(cfg.repeats);
            commands::eval(&cfg, &out_dir(&common, "."))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose, cli.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
