//! `sdft`: pretraining, fine-tuning, evaluation, estimator ablation and
//! sequential-learning runs on the toy mapping tasks.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdft_core::exec::Exec;
use sdft_core::Error;

use crate::commands::Ctx;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "sdft", version, about = "Self-distillation fine-tuning experiments on toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config; every key is optional
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// parent directory of run directories
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// worker threads; 1 runs everything sequentially
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the base model and check the in-context learning gate
    Pretrain,
    /// Fine-tune the base model on a new task
    Train {
        /// sdft, sft, teacher-sft or offline-distill
        #[arg(long)]
        method: Option<String>,
    },
    /// Accuracy, pass@k and KL to the base for a checkpoint
    Eval,
    /// Bias and variance of the gradient estimators on a tabular fixture
    AblateEstimators,
    /// Train on several tasks in turn and report forgetting
    Sequential {
        #[arg(long)]
        method: Option<String>,
    },
}

impl Command {
    fn method(&self) -> Option<&str> {
        match self {
            Command::Train { method } | Command::Sequential { method } => method.as_deref(),
            _ => None,
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Gate(_) | Error::Budget { .. }) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be ≥ 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = file.resolve(cli.seed, cli.command.method())?;
    let ctx = Ctx {
        cfg,
        config_path: cli.config.clone(),
        out: cli.out.clone(),
        exec: if cli.threads == Some(1) { Exec::Sequential } else { Exec::Parallel },
    };
    let dir = match cli.command {
        Command::Pretrain => commands::pretrain(&ctx)?,
        Command::Train { .. } => commands::train(&ctx)?,
        Command::Eval => commands::eval(&ctx)?,
        Command::AblateEstimators => commands::ablate_estimators(&ctx)?,
        Command::Sequential { .. } => commands::sequential(&ctx)?,
    };
    println!("run directory: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
