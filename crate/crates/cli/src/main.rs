use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use occmocap::harness::commands::{self, report_text};
use occmocap::harness::sweep::{curve, inversions};
use occmocap::harness::ExperimentConfig;
use occmocap::Error;

/// Occlusion-robust motion capture from 2D keypoint sequences.
#[derive(Parser)]
#[command(name = "occmocap", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic train/eval sample archives.
    SynthData,
    /// Pretrains the motion prior.
    TrainPrior {
        /// Continues from a prior checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Trains the lifting network.
    TrainLifting {
        /// Prior checkpoint to start from.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Continues from a lifting checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Keeps the prior's weights fixed.
        #[arg(long)]
        freeze_prior: bool,
        /// Trains without the prior.
        #[arg(long)]
        no_prior: bool,
        /// Drops the smoothness loss.
        #[arg(long)]
        no_smoothness: bool,
    },
    /// Scores a checkpoint on the evaluation split.
    Eval {
        checkpoint: PathBuf,
        /// Prints JSON instead of a text line.
        #[arg(long)]
        json: bool,
    },
    /// Runs the full pipeline on a detection file.
    Infer {
        checkpoint: PathBuf,
        detections: PathBuf,
        /// Confidence below which a joint counts as occluded.
        #[arg(long, default_value_t = 0.6)]
        threshold: f64,
    },
    /// Evaluates checkpoints across occlusion ratios; each model is given
    /// as NAME=PATH.
    Sweep {
        #[arg(required = true, value_parser = parse_named)]
        models: Vec<(String, PathBuf)>,
    },
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected NAME=PATH, got `{s}`")),
    }
}

fn load_config(common: &Common) -> occmocap::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(every: usize) -> impl FnMut(&occmocap::harness::StepLog) {
    move |s| {
        if s.step % every == 0 {
            eprintln!("step {:>6}  epoch {:>3}  loss {:.5}", s.step, s.epoch, s.loss);
        }
    }
}

fn run(cli: Cli) -> occmocap::Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out: &Path = &cli.common.out;
    match cli.command {
        Command::SynthData => {
            let (train, eval) = commands::synth_data(&cfg, out)?;
            println!("wrote {train} training and {eval} evaluation samples to {}", out.display());
        }
        Command::TrainPrior { resume } => {
            let s = commands::train_prior(&cfg, out, resume.as_deref(), progress(20))?;
            println!("prior: {} steps, checkpoint {}", s.steps, s.checkpoint.display());
        }
        Command::TrainLifting {
            prior,
            resume,
            freeze_prior,
            no_prior,
            no_smoothness,
        } => {
            let opts = &mut cfg.lifting_options;
            opts.freeze_prior |= freeze_prior;
            opts.use_prior &= !no_prior;
            if no_smoothness {
                opts.weights.smooth = 0.0;
            }
            let s = commands::train_lifting(&cfg, prior.as_deref(), out, resume.as_deref(), progress(20))?;
            println!("lifting: {} steps, checkpoint {}", s.steps, s.checkpoint.display());
        }
        Command::Eval { checkpoint, json } => {
            let report = commands::eval(&cfg, &checkpoint)?;
            commands::write_report(&report, &out.join("eval.json"))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{}", report_text(&report));
            }
        }
        Command::Infer {
            checkpoint,
            detections,
            threshold,
        } => {
            cfg.eval.threshold = threshold;
            cfg.validate()?;
            let path = out.join("inference.json");
            let inf = commands::infer_file(&cfg, &checkpoint, &detections, &path)?;
            if let Some(w) = &inf.warning {
                eprintln!("warning: {w}");
            }
            println!(
                "{} frames, {} occluded joints, output {}",
                inf.frames.len(),
                inf.occluded_joints,
                path.display()
            );
        }
        Command::Sweep { models } => {
            let rows = commands::sweep_files(&cfg, &models, out)?;
            for (name, _) in &models {
                let c = curve(&rows, name);
                let pts: Vec<String> = c.iter().map(|(r, e)| format!("{r:.1}:{e:.1}")).collect();
                println!("{name}  MPJPE by ratio  {}  (inversions {})", pts.join("  "), inversions(&c));
            }
            println!("wrote sweep.csv, sweep.json and sweep.svg to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
