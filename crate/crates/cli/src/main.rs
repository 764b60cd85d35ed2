use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use voxrep_cli::evals::{self, EvalArgs};
use voxrep_cli::inspect;
use voxrep_cli::synth::{self, SynthArgs};
use voxrep_cli::train::{self, TrainArgs};

#[derive(Parser)]
#[command(name = "voxrep", version, about = "3D volume/report pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainOpts {
    /// Flat key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset root containing manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accept a config snapshot mismatch when resuming.
    #[arg(long)]
    force: bool,
    /// Stop after this step (keeps the configured schedule totals).
    #[arg(long)]
    halt_at: Option<u64>,
}

#[derive(Args)]
struct EvalOpts {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Frozen encoder checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom/report corpus.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Regenerate into a non-empty directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Stage-1 self-distillation pretraining of the volume encoder.
    PretrainStage1(TrainOpts),
    /// Masked-language-model pretraining of the report encoder.
    PretrainMlm(TrainOpts),
    /// Stage-2 contrastive alignment of both encoders.
    PretrainStage2 {
        #[command(flatten)]
        opts: TrainOpts,
        /// Stage-1 checkpoint providing the vision encoder (fresh runs).
        #[arg(long)]
        vision_init: Option<PathBuf>,
        /// MLM checkpoint providing the text encoder (fresh runs).
        #[arg(long)]
        text_init: Option<PathBuf>,
    },
    /// Sliding-window probing of a frozen encoder.
    Probe(EvalOpts),
    /// Volume/report retrieval in the contrastive shared space.
    Retrieve(EvalOpts),
    /// Decoder-only segmentation over frozen encoder taps.
    Segment(EvalOpts),
    /// Text-grounded box regression with frozen encoders.
    Ground(EvalOpts),
    /// Print checkpoint metadata and the tensor table.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn train_args(o: TrainOpts) -> TrainArgs {
    TrainArgs {
        config: o.config,
        data: o.data,
        out: o.out,
        resume: o.resume,
        force: o.force,
        halt_at: o.halt_at,
        vision_init: None,
        text_init: None,
    }
}

fn eval_args(o: EvalOpts) -> EvalArgs {
    EvalArgs { config: o.config, data: o.data, out: o.out, checkpoint: o.checkpoint }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synthesize { config, out, overwrite } => {
            let dir = synth::cmd_synthesize(&SynthArgs { config, out, overwrite })?;
            println!("corpus written to {}", dir.display());
        }
        Command::PretrainStage1(o) => {
            let ckpt = train::cmd_pretrain_stage1(&train_args(o))?;
            println!("checkpoint at {}", ckpt.display());
        }
        Command::PretrainMlm(o) => {
            let ckpt = train::cmd_pretrain_mlm(&train_args(o))?;
            println!("checkpoint at {}", ckpt.display());
        }
        Command::PretrainStage2 { opts, vision_init, text_init } => {
            let mut args = train_args(opts);
            args.vision_init = vision_init;
            args.text_init = text_init;
            let ckpt = train::cmd_pretrain_stage2(&args)?;
            println!("checkpoint at {}", ckpt.display());
        }
        Command::Probe(o) => {
            let report = evals::cmd_probe(&eval_args(o))?;
            for r in &report.rows {
                println!("{} -> {}  {} = {}", r.train_scope, r.test_scope, r.metric, r.value);
            }
        }
        Command::Retrieve(o) => {
            let report = evals::cmd_retrieve(&eval_args(o))?;
            for m in &report.metrics {
                println!("{}  {} = {}", m.direction, m.metric, m.value);
            }
        }
        Command::Segment(o) => {
            let report = evals::cmd_segment(&eval_args(o))?;
            for r in &report.per_study {
                println!("{}  foreground dice = {}", r.study, r.foreground_mean);
            }
            println!("mean foreground dice = {}", report.mean_foreground_dice);
        }
        Command::Ground(o) => {
            let report = evals::cmd_ground(&eval_args(o))?;
            println!("mIoU = {}", report.miou);
        }
        Command::InspectCheckpoint { checkpoint } => {
            print!("{}", inspect::cmd_inspect(&checkpoint)?);
        }
    }
    Ok(())
}
