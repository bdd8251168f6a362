//! Command-line front end: train, eval, latency, gen-data, and check.

use cascade_asr::distill::DistillMode;
use cascade_asr::harness::config::{parse_distill, Overrides};
use cascade_asr::harness::runner;
use cascade_asr::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "cascade-asr",
    about = "Joint streaming/offline speech recognition on synthetic data, \
             with similarity-preserving knowledge distillation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed (gen-data re-rolls the corpus seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the distillation mode: none, mse-ED, sp-ED, or sp-DD.
    #[arg(long, value_parser = parse_distill)]
    distill: Option<DistillMode>,
    /// Override the streaming block size (input frames).
    #[arg(long)]
    block: Option<usize>,
    /// Override the decoding beam width.
    #[arg(long)]
    beam: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            distill: self.distill,
            block: self.block,
            beam: self.beam,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint, logs, and summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one decoding path.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Materialized corpus directory (defaults to regenerating
        /// the corpus from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Decoding path: streaming or non-streaming.
        #[arg(long)]
        mode: String,
        /// Earlier evaluation CSV to compute relative error-rate
        /// reduction against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Output directory for the CSV report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the algorithmic-delay table for the configured geometry.
    Latency {
        #[command(flatten)]
        common: Common,
    },
    /// Materialize the synthetic corpus to disk.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle, invariance, and gradient self-checks.
    Check {
        /// Also validate this configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Train { common, out } => {
            let (summary, report) = runner::cli_train(&common.config, &common.overrides(), &out)?;
            println!("trained {} steps ({} skipped)", report.steps, report.skipped_steps);
            println!(
                "test cer: streaming {:.4}, non-streaming {:.4}",
                summary.cer_streaming, summary.cer_nonstreaming
            );
            println!("outputs in {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { common, checkpoint, data, mode, baseline, out } => {
            let mode = runner::parse_mode(&mode).map_err(Error::Config)?;
            let report = runner::cli_eval(
                &common.config,
                &common.overrides(),
                &checkpoint,
                data.as_deref(),
                mode,
                baseline.as_deref(),
                &out,
            )?;
            print!("{}", runner::render_eval(&report));
            println!("report in {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Latency { common } => {
            print!("{}", runner::cli_latency(&common.config, &common.overrides())?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GenData { common, out } => {
            let n = runner::cli_gen_data(&common.config, &common.overrides(), &out)?;
            println!("wrote {n} utterances to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check { config } => {
            if let Some(path) = config {
                let cfg = cascade_asr::harness::config::RunConfig::load(&path)?;
                cfg.validate()?;
                println!("config {} ok", path.display());
            }
            let ok = runner::cli_check(&mut std::io::stdout())?;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
