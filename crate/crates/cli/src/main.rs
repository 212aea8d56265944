//! `ham`: train the toy denoiser, invert and reconstruct images, run style
//! transfer and its module ablation, and evaluate composite metrics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, SEED_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ham_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_usage() => 2,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ham", version, about = "Heterogeneous attention modulation style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the denoiser and write a checkpoint directory plus loss.csv.
    Train(TrainArgs),
    /// Invert an image and sample it back without modulation.
    Reconstruct(ImageArgs),
    /// Invert an image to its initial latent.
    Invert(InvertArgs),
    /// Stylize a content image with a style image or style condition.
    Transfer(TransferArgs),
    /// Run the eight GAR/LAT/SINI toggle rows and summarize them.
    Ablate(AblateArgs),
    /// Append DC, CC and ArtFID columns to a scores CSV.
    Eval(EvalArgs),
    /// Write procedural content/style fixture PNGs.
    GenFixtures(FixtureArgs),
}

/// Options shared by every command that resolves a run configuration.
#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file, applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed (falls back to the HAM_SEED environment variable).
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Inference steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct ImageArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Input PNG.
    #[arg(long)]
    content: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InvertArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    content: PathBuf,
    /// Output HAMT file for z_T.
    #[arg(long)]
    out: PathBuf,
    /// Also write the teacher trace directory.
    #[arg(long)]
    dump_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StyleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    content: PathBuf,
    /// Style PNG (image-guided).
    #[arg(long, conflicts_with = "style_condition", required_unless_present = "style_condition")]
    style: Option<PathBuf>,
    /// Style condition id or class name (text-guided).
    #[arg(long)]
    style_condition: Option<String>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    no_gar: bool,
    #[arg(long)]
    no_lat: bool,
    #[arg(long)]
    no_sini: bool,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[command(flatten)]
    style: StyleArgs,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Write both teacher traces under this directory.
    #[arg(long)]
    dump_trace: Option<PathBuf>,
    /// Write z_T of content, style and student as HAMT under this directory.
    #[arg(long)]
    dump_latents: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    style: StyleArgs,
    /// Directory for A.png … H.png and summary.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Scores CSV with header method,dino,clip_i,clip_t,fid,lpips.
    #[arg(long, required_unless_present = "table1", conflicts_with = "table1")]
    scores: Option<PathBuf>,
    /// Evaluate the bundled comparison table and check it against the
    /// reported composites.
    #[arg(long)]
    table1: bool,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FixtureArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of content/style pairs.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
}

/// Resolves defaults ← HAM_SEED ← config file ← flags.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::new(std::env::var(SEED_ENV).ok())?;
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn style_flags(a: &StyleArgs) -> Vec<(&'static str, Option<String>)> {
    let off = |b: bool| b.then(|| "false".to_string());
    vec![
        ("inference_steps", a.model.steps.map(|v| v.to_string())),
        ("alpha", a.alpha.map(|v| v.to_string())),
        ("beta", a.beta.map(|v| v.to_string())),
        ("gamma", a.gamma.map(|v| v.to_string())),
        ("gar", off(a.no_gar)),
        ("lat", off(a.no_lat)),
        ("sini", off(a.no_sini)),
    ]
}

/// Returns `None` after printing when `--print-config` was given.
fn prepare(common: &Common, flags: &[(&str, Option<String>)]) -> Result<Option<RunConfig>, CliError> {
    let cfg = resolve(common, flags)?;
    if common.print_config {
        print!("{}", cfg.render());
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let flags = [
                ("train_steps", a.steps.map(|v| v.to_string())),
                ("lr", a.lr.map(|v| v.to_string())),
                ("batch_size", a.batch_size.map(|v| v.to_string())),
            ];
            match prepare(&a.common, &flags)? {
                Some(cfg) => commands::train(&cfg, &a.out),
                None => Ok(()),
            }
        }
        Command::Reconstruct(a) => {
            let flags = [("inference_steps", a.model.steps.map(|v| v.to_string()))];
            match prepare(&a.common, &flags)? {
                Some(cfg) => commands::reconstruct(&cfg, &a.model.checkpoint, &a.content, &a.out),
                None => Ok(()),
            }
        }
        Command::Invert(a) => {
            let flags = [("inference_steps", a.model.steps.map(|v| v.to_string()))];
            match prepare(&a.common, &flags)? {
                Some(cfg) => commands::invert(&cfg, &a.model.checkpoint, &a.content, &a.out, a.dump_trace.as_deref()),
                None => Ok(()),
            }
        }
        Command::Transfer(a) => match prepare(&a.style.common, &style_flags(&a.style))? {
            Some(cfg) => commands::transfer(
                &cfg,
                &commands::StyleInputs::from_args(&a.style),
                &a.out,
                a.dump_trace.as_deref(),
                a.dump_latents.as_deref(),
            ),
            None => Ok(()),
        },
        Command::Ablate(a) => match prepare(&a.style.common, &style_flags(&a.style))? {
            Some(cfg) => commands::ablate(&cfg, &commands::StyleInputs::from_args(&a.style), &a.out_dir),
            None => Ok(()),
        },
        Command::Eval(a) => commands::eval(a.scores.as_deref(), a.table1, a.out.as_deref()),
        Command::GenFixtures(a) => commands::gen_fixtures(&a.out_dir, a.count, a.size),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
