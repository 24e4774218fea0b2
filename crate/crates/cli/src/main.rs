use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{parse_assignment, RunConfig, SchemaError};

/// Environment variable supplying the default worker-thread count.
pub const THREADS_ENV: &str = "DWSMIL_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dwsmil", version, about = "Weakly supervised segmentation from image-level labels")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `key = value` lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable); wins over the config file
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment, global = true)]
    set: Vec<(String, String)>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: $DWSMIL_THREADS, else all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset
    Synth,
    /// Train on a dataset directory
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write heatmaps and masks for images
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// PNG files or directories of PNGs
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score a checkpoint against a dataset with masks
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference gradient checks
    Gradcheck,
    /// Receptive field and stride of each tapped layer
    Rf,
    /// Train and evaluate once per area-constraint weight setting
    SweepAc {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation dataset (default: the training data)
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
}

fn path_override(key: &str, p: &Option<PathBuf>) -> Option<(String, String)> {
    p.as_ref().map(|p| (key.to_string(), p.display().to_string()))
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut base = Vec::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        base.push(("threads".to_string(), v));
    }
    let c = &cli.common;
    let mut flags = c.set.clone();
    flags.extend(c.seed.map(|s| ("seed".to_string(), s.to_string())));
    flags.extend(c.threads.map(|t| ("threads".to_string(), t.to_string())));
    flags.extend(path_override("out", &c.out));
    match &cli.command {
        Command::Train { data } => flags.extend(path_override("data", data)),
        Command::Predict { checkpoint, .. } => flags.extend(path_override("checkpoint", checkpoint)),
        Command::Eval { checkpoint, data } => {
            flags.extend(path_override("checkpoint", checkpoint));
            flags.extend(path_override("data", data));
        }
        Command::SweepAc { data, eval_data } => {
            flags.extend(path_override("data", data));
            flags.extend(path_override("eval_data", eval_data));
        }
        Command::Synth | Command::Gradcheck | Command::Rf => {}
    }
    RunConfig::resolve_layers(&base, c.config.as_deref(), &flags)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli)?;
    if let Some(n) = cfg.threads() {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Predict { images, .. } => commands::predict(&cfg, &images),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Rf => commands::rf(&cfg),
        Command::SweepAc { .. } => commands::sweep_ac(&cfg),
    }
}

/// Exit status for a failed run.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<SchemaError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<commands::GradcheckFailed>().is_some() {
            return 5;
        }
        if let Some(e) = cause.downcast_ref::<dwsmil::Error>() {
            return match e {
                dwsmil::Error::Io { .. }
                | dwsmil::Error::Image { .. }
                | dwsmil::Error::Manifest { .. }
                | dwsmil::Error::Checkpoint(_) => 3,
                dwsmil::Error::NonFiniteLoss { .. } => 4,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
