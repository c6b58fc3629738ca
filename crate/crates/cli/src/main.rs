use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use difflane_cli::commands::{self, EvalMode, TrainOptions};
use difflane_cli::{apply_thread_cap, Overrides, RunConfig};

/// Diffusion-based lane detection on synthetic road scenes.
///
/// Set DIFFLANE_THREADS to cap worker threads.
#[derive(Parser)]
#[command(name = "difflane", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation, weight init, training noise and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct Diffusion {
    /// Anchors per image.
    #[arg(long)]
    n_train: Option<usize>,
    /// Signal scale of the anchor parameters.
    #[arg(long)]
    noise_scale: Option<f64>,
}

#[derive(Args, Default)]
struct Sampling {
    /// Sampling (DDIM) steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Foreground threshold for kept anchors and final lanes.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes in CULane layout.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Train a model and write a checkpoint plus a loss CSV.
    Train {
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Loss CSV path (default: checkpoint path with .loss.csv).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        diffusion: Diffusion,
    },
    /// Detect lanes on every image of a dataset.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        diffusion: Diffusion,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalMode::Culane)]
        mode: EvalMode,
        /// Report directory (default: the prediction directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one overlay per sampling step for a single image.
    Plot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset index of the image; selects the same noise as `infer`.
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[command(flatten)]
        sampling: Sampling,
        #[command(flatten)]
        diffusion: Diffusion,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut over = Overrides { seed: cli.seed, ..Default::default() };
    let mut apply = |d: &Diffusion, s: &Sampling| {
        over.n_train = d.n_train;
        over.noise_scale = d.noise_scale;
        over.steps = s.steps;
        over.threshold = s.threshold;
    };
    match &cli.cmd {
        Cmd::Train { diffusion, epochs, .. } => {
            apply(diffusion, &Sampling::default());
            over.epochs = *epochs;
        }
        Cmd::Infer { diffusion, sampling, .. } | Cmd::Plot { diffusion, sampling, .. } => apply(diffusion, sampling),
        Cmd::Gen { .. } | Cmd::Eval { .. } => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &over)?;
    match cli.cmd {
        Cmd::Gen { out, count } => {
            let written = commands::gen(&cfg, &out, count)?;
            println!("wrote {} scenes to {}", written.len(), out.display());
        }
        Cmd::Train { data, out, resume, log, quiet, .. } => {
            let s = commands::train(&cfg, &TrainOptions { data, out: out.clone(), resume, log, quiet })?;
            println!(
                "trained to step {} ({} epochs), last loss {:.4}; checkpoint {}",
                s.steps,
                s.epochs_done,
                s.last_total,
                out.display()
            );
        }
        Cmd::Infer { ckpt, data, out, .. } => {
            let n = commands::infer_dir(&cfg, &ckpt, &data, &out)?;
            println!("wrote predictions for {n} images to {}", out.display());
        }
        Cmd::Eval { pred, gt, mode, out } => {
            let out = out.unwrap_or_else(|| pred.clone());
            let report = commands::eval(&cfg, &pred, &gt, mode, &out)?;
            println!("{}", commands::summary_line(mode, &report));
        }
        Cmd::Plot { ckpt, image, out, index, .. } => {
            let s = commands::plot(&cfg, &ckpt, &image, index, &out)?;
            for (f, n) in s.files.iter().zip(&s.drawn) {
                println!("{}: {n} anchors", f.display());
            }
            println!("detections: {}", s.detections);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = apply_thread_cap().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
