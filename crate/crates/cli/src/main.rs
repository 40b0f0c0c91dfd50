//! `maple`: extraction, training, evaluation and reporting for the
//! manipulation-prior pipeline.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalContactArgs, ExtractArgs, ReportArgs, TrainPolicyArgs, TrainPriorArgs, TrainTokenizerArgs};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "maple", version, about)]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root under which each subcommand writes `<root>/<subcommand>/`.
    #[arg(long, global = true, env = "MAPLE_OUTPUT_ROOT", default_value = "maple-output")]
    output_root: PathBuf,
    /// Explicit output directory, overriding the output root.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Log filter, e.g. `info` or `maple=debug`.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a manifest from a synthetic corpus.
    Extract(ExtractArgs),
    /// Train the hand-pose tokenizer.
    TrainTokenizer(TrainTokenizerArgs),
    /// Train the contact and hand-pose prior.
    TrainPrior(TrainPriorArgs),
    /// Fit a cVAE contact head on frozen features and report SIM / NSS.
    EvalContact(EvalContactArgs),
    /// Behavior cloning in the toy environment under the evaluation protocol.
    TrainPolicy(TrainPolicyArgs),
    /// Plots and tables from the logs of earlier runs.
    Report(ReportArgs),
}

impl Command {
    fn dir_name(&self) -> &'static str {
        match self {
            Command::Extract(_) => "extract",
            Command::TrainTokenizer(_) => "train-tokenizer",
            Command::TrainPrior(_) => "train-prior",
            Command::EvalContact(_) => "eval-contact",
            Command::TrainPolicy(_) => "train-policy",
            Command::Report(_) => "report",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?.resolve(cli.seed)?;
    if let Some(level) = &cli.log_level {
        cfg.log_level = level.clone();
    }
    env_logger::Builder::new()
        .parse_filters(&cfg.log_level)
        .format_timestamp(None)
        .try_init()
        .ok();
    let out = cli.out_dir.unwrap_or_else(|| cli.output_root.join(cli.command.dir_name()));
    match &cli.command {
        Command::Extract(a) => commands::extract(cfg, a, &out),
        Command::TrainTokenizer(a) => commands::train_tokenizer_cmd(cfg, a, &out),
        Command::TrainPrior(a) => commands::train_prior_cmd(cfg, a, &out),
        Command::EvalContact(a) => commands::eval_contact(cfg, a, &out),
        Command::TrainPolicy(a) => commands::train_policy(cfg, a, &out),
        Command::Report(a) => commands::report(a, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
