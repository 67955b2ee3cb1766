//! Command-line pipeline driver: collect expert data, train, evaluate,
//! attack, and aggregate scores.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use towndrive::config::{ConfigError, RunConfig};
use towndrive::runner::{self, AttackKind, RunnerError};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "towndrive", about = "Penalty-trained driving pipeline")]
struct Cli {
    /// Run configuration file (key = value); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the rule-following expert over the scenario pack and write episodes.
    Collect,
    /// Train a model on collected episodes.
    Train,
    /// Closed-loop benchmark of a checkpoint.
    Eval {
        /// Checkpoint path (defaults to <out_dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Benchmark a checkpoint under an input attack.
    Attack {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Attack kind: fgsm or dot.
        #[arg(long, value_parser = ["fgsm", "dot"])]
        kind: String,
        /// FGSM L-infinity budget.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Aggregate saved report files into one score table.
    Score {
        /// Report files produced by eval/attack.
        files: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(err: &RunnerError) -> u8 {
    match err {
        RunnerError::Config(_) => EXIT_CONFIG,
        RunnerError::Loss(_) | RunnerError::Sim(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let cfg = load_config(&cli).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    let default_ckpt = cfg.out_dir.join("model.ckpt");
    let ckpt_or_default =
        move |c: &Option<PathBuf>| c.clone().unwrap_or_else(|| default_ckpt.clone());
    let fail = |e: RunnerError| (exit_for(&e), e.to_string());
    match cli.command {
        Command::Collect => {
            let report = runner::cmd_collect(&cfg).map_err(fail)?;
            print!("{}", report.render());
        }
        Command::Train => {
            let ckpt = runner::cmd_train(&cfg).map_err(fail)?;
            println!("checkpoint {}", ckpt.display());
        }
        Command::Eval { checkpoint } => {
            let report = runner::cmd_eval(&cfg, &ckpt_or_default(&checkpoint)).map_err(fail)?;
            print!("{report}");
        }
        Command::Attack {
            checkpoint,
            kind,
            epsilon,
        } => {
            let mut cfg = cfg;
            if let Some(eps) = epsilon {
                cfg.attack_eps = eps;
                cfg.validate().map_err(|e| (EXIT_CONFIG, e.to_string()))?;
            }
            let kind = match kind.as_str() {
                "fgsm" => AttackKind::Fgsm,
                _ => AttackKind::Dot,
            };
            let report =
                runner::cmd_attack(&cfg, &ckpt_or_default(&checkpoint), kind).map_err(fail)?;
            print!("{report}");
        }
        Command::Score { files } => {
            if files.is_empty() {
                return Err((EXIT_DATA, "score needs at least one report file".into()));
            }
            let table = runner::cmd_score(&files).map_err(fail)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
