//! The `mmiv` command line: self-tests, toy training, generation,
//! benchmarks and the paired copy-task ablation.
//!
//! Exit codes: 0 success, 1 test failure, 2 usage/config error, 3 I/O
//! error. The default config file path can be set via the `MMIV_CONFIG`
//! environment variable; `--config` overrides it and `--set key=value`
//! overrides individual keys (schema in `schemas/runconfig.md`).

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod selftest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::tasks::Task;
use config::RunConfig;
use selftest::FaultInjection;

#[derive(Debug, Parser)]
#[command(
    name = "mmiv",
    version,
    about = "Toy interleaved image-text model with multi-scale deformable feature sampling",
    after_help = "Exit codes: 0 success, 1 test failure, 2 usage error, 3 I/O error."
)]
pub struct Cli {
    /// Flat key=value config file (default: $MMIV_CONFIG when set).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set steps=50 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed override (shorthand for --set seed=N).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the invariant suites and print a JSON summary.
    Selftest {
        /// Only run suites whose `module.id` contains this substring.
        #[arg(long, default_value = "")]
        filter: String,
        /// Corrupt the MMFS gates (alpha = 1) to demonstrate failure
        /// detection; the zero-init identity suites must then fail.
        #[arg(long, hide = true)]
        inject_alpha_one: bool,
    },
    /// Train a task and write checkpoint, log and summary.
    Train {
        /// Task: lm, copy, story or blob.
        #[arg(long)]
        task: Task,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue a checkpointed run (parameters and data order).
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        /// Train the ablation arm: decoder without pyramid access.
        #[arg(long)]
        no_mmfs_decoder: bool,
    },
    /// Generate interleaved output from a checkpoint (text JSON + PPM).
    Generate {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prompt text-token ids, comma separated (e.g. "1,2,3").
        #[arg(long, default_value = "")]
        prompt: String,
    },
    /// FLOPs sweep, runtime measurement and SVG chart.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Timed repetitions per runtime scenario.
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Paired with/without-MMFS copy-task training arms.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
}

impl clap::builder::ValueParserFactory for Task {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| {
            s.parse::<Task>().map_err(|e| e.to_string())
        })
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) => 3,
        Error::Config(_) | Error::UnknownTensor(_) => 2,
        _ => 1,
    }
}

fn parse_prompt(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("bad prompt token '{t}'")))
        })
        .collect()
}

fn dispatch(cli: Cli) -> Result<i32> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    match cli.cmd {
        Cmd::Selftest {
            filter,
            inject_alpha_one,
        } => {
            let inject = FaultInjection {
                alpha_one: inject_alpha_one,
            };
            let outcomes = selftest::run_suites(&filter, &inject);
            let failed: Vec<String> = outcomes
                .iter()
                .filter(|o| !o.pass)
                .map(|o| format!("{}.{}", o.module, o.id))
                .collect();
            let summary = serde_json::json!({
                "run": outcomes.len(),
                "pass": failed.is_empty(),
                "failed": failed,
                "suites": outcomes,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(if summary["pass"].as_bool() == Some(true) { 0 } else { 1 })
        }
        Cmd::Train {
            task,
            out,
            resume,
            no_mmfs_decoder,
        } => {
            if no_mmfs_decoder {
                cfg.decoder_mmfs = Some(false);
            }
            let summary = commands::cmd_train(&cfg, task, &out, resume.as_deref())?;
            println!("{summary}");
            Ok(0)
        }
        Cmd::Generate {
            checkpoint,
            out,
            prompt,
        } => {
            let tokens = parse_prompt(&prompt)?;
            let summary = commands::cmd_generate(&cfg, &checkpoint, &out, &tokens)?;
            println!("{summary}");
            Ok(0)
        }
        Cmd::Bench { out, reps } => {
            let summary = commands::cmd_bench(&out, reps)?;
            println!("{summary}");
            Ok(0)
        }
        Cmd::Ablate { out } => {
            let summary = commands::cmd_ablate(&cfg, &out)?;
            println!("{summary}");
            Ok(0)
        }
    }
}

/// Parse `args` (including the binary name) and run; returns the process
/// exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success status
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Entry point for the `mmiv` binary.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}
