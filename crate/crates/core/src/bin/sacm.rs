//! `sacm` — drives the agreement-intervention workbench.
//!
//! Stages: generate -> train -> effects -> analyze -> report. Exit codes:
//! 0 success, 2 validation error, 3 degenerate-probability abort, 4 I/O
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sacm_core::config::ExperimentConfig;
use sacm_core::runner::{
    run_analyze, run_effects, run_generate, run_report, run_train, EffectFamily, RunOptions,
};

#[derive(Parser)]
#[command(name = "sacm", version, about = "Causal mediation workbench for subject-verb agreement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file (key = value sections; see README)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Replace every configured seed with streams derived from N
    #[arg(long, value_name = "N")]
    seed_override: Option<u64>,

    /// Worker threads for parallel stages
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,

    /// Reuse completed shards / training state where possible
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Emit per-structure prompt files and the training corpus
    Generate(Common),
    /// Train the toy LM on the generated corpus (checkpointed, resumable)
    Train(Common),
    /// Compute effect CSVs against the checkpoint
    Effects {
        #[command(flatten)]
        common: Common,
        /// Comma-separated families: total, grammaticality, neurons, heads,
        /// zero-heads, verb-profile (default: all)
        #[arg(long, value_name = "LIST")]
        which: Option<String>,
    },
    /// Contours, overlap/hypothesis matrices, summaries, SVG plots
    Analyze(Common),
    /// Render the summary report from the analysis outputs
    Report(Common),
}

fn load_config(common: &Common) -> sacm_core::Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(n) = common.seed_override {
        cfg.apply_seed_override(n);
    }
    let mut opts = RunOptions::default();
    if let Some(j) = common.jobs {
        opts.jobs = j;
    }
    opts.resume = common.resume;
    Ok((cfg, opts))
}

fn run() -> sacm_core::Result<()> {
    match Cli::parse().command {
        Command::Generate(common) => {
            let (cfg, _) = load_config(&common)?;
            run_generate(&cfg)
        }
        Command::Train(common) => {
            let (cfg, opts) = load_config(&common)?;
            run_train(&cfg, opts)
        }
        Command::Effects { common, which } => {
            let (cfg, opts) = load_config(&common)?;
            let families = match which {
                None => EffectFamily::all().to_vec(),
                Some(list) => list
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(EffectFamily::parse)
                    .collect::<sacm_core::Result<Vec<_>>>()?,
            };
            run_effects(&cfg, &families, opts)
        }
        Command::Analyze(common) => {
            let (cfg, _) = load_config(&common)?;
            run_analyze(&cfg)
        }
        Command::Report(common) => {
            let (cfg, _) = load_config(&common)?;
            run_report(&cfg)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sacm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
