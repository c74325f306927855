//! `esacert` command-line front end.
//!
//! Exit codes: 0 success, 1 a verification verdict failed, 2 I/O,
//! 3 invalid spec/config/hypothesis/usage, 4 shape or layout mismatch,
//! 5 internal error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{Outcome, RunError};

#[derive(Parser)]
#[command(name = "esacert", version, about = "Effects-sensitive attention certification and object-transform tooling")]
struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render or move an object and emit its reference image and target mask.
    Transform(TransformArgs),
    /// Certify the KL ordering over seeded trials and write verify_report.json.
    Verify(VerifyArgs),
    /// Sweep the ESA strength and write sweep.csv.
    Sweep(SweepArgs),
    /// Write attention heatmaps for standard, hard and ESA attention.
    Attnmap(AttnmapArgs),
    /// Build the masked scene and the side-by-side in-context input.
    Compose(ComposeArgs),
}

#[derive(Args)]
pub struct TransformArgs {
    /// Mesh in OBJ text (`v x y z [r g b]`, `f i j k`).
    #[arg(long, conflicts_with_all = ["source", "source_mask"])]
    pub mesh: Option<PathBuf>,
    /// Object image in scene coordinates.
    #[arg(long, requires = "source_mask")]
    pub source: Option<PathBuf>,
    /// Mask selecting the object in `--source`.
    #[arg(long, requires = "source")]
    pub source_mask: Option<PathBuf>,
    /// Scene image; fixes the target-mask size.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Scene size `WxH` when no scene image is given.
    #[arg(long, value_parser = config::parse_dims)]
    pub scene_size: Option<(usize, usize)>,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Accept rho below 1/|edit|; verdicts may then fail.
    #[arg(long)]
    pub allow_hypothesis_violation: bool,
    /// Override the configured trial count.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Override both ESA strengths.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Strengths to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub allow_hypothesis_violation: bool,
}

#[derive(Args)]
pub struct AttnmapArgs {
    /// Logit matrix as JSON rows (queries x keys).
    #[arg(long)]
    pub logits: Option<PathBuf>,
    /// Region partition JSON.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// Query grid `HxW`; `H * W` must equal the query count.
    #[arg(long, value_parser = config::parse_dims)]
    pub layout: Option<(usize, usize)>,
    /// Key columns to draw; defaults to every object key.
    #[arg(long = "key")]
    pub keys: Vec<usize>,
}

#[derive(Args)]
pub struct ComposeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub source_mask: PathBuf,
    #[arg(long)]
    pub target_mask: PathBuf,
    /// Appearance reference, same size as the scene.
    #[arg(long)]
    pub reference: PathBuf,
}

pub struct Globals {
    pub seed: u64,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(RunError::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome, RunError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(RunError::usage("--workers must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| RunError::internal(e.to_string()))?;
    let globals = Globals { seed: cli.seed, out: cli.out, config: cli.config };
    std::fs::create_dir_all(&globals.out).map_err(|e| RunError::io(&globals.out, e))?;
    pool.install(|| match cli.command {
        Command::Transform(a) => commands::transform(&globals, &a),
        Command::Verify(a) => commands::verify(&globals, &a),
        Command::Sweep(a) => commands::sweep(&globals, &a),
        Command::Attnmap(a) => commands::attnmap(&globals, &a),
        Command::Compose(a) => commands::compose(&globals, &a),
    })
}
