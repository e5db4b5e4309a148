//! Command-line harness for the federated learning simulator.
//!
//! Exit codes: 0 success, 2 configuration error, 3 privacy budget FAIL.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim::harness::{
    self, compare, run_evaluate, run_experiment, run_pretrain, CheckpointStatus, ExperimentConfig,
    HarnessError,
};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Private federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Master seed override.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run central pretraining on the public split and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the full federated experiment.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the heldout split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint file to evaluate.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Privacy accounting dry run: emit the ledger without training.
    Account {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Paired run of two configurations sharing model, corpus, and seed.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Second configuration file.
        #[arg(long = "config-b", value_name = "PATH")]
        config_b: PathBuf,
    },
}

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 2;
const EXIT_BUDGET: u8 = 3;

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn exit_code_for(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Config(_) | HarnessError::ComparisonBasis(_) | HarnessError::Setup(_) => {
            EXIT_CONFIG
        }
        _ => 1,
    }
}

fn run() -> Result<u8, HarnessError> {
    match Cli::parse().command {
        Command::Pretrain { common } => {
            let cfg = load_config(&common.config, common.seed)?;
            let path = run_pretrain(&cfg, &common.out)?;
            println!("pretrained checkpoint written to {}", path.display());
            Ok(EXIT_OK)
        }
        Command::Train { common } => {
            let cfg = load_config(&common.config, common.seed)?;
            let result = run_experiment(&cfg, &common.out)?;
            if let Some(last) = result.per_round.last() {
                println!(
                    "round {}: prediction_accuracy {:.4}, picked_ratio_proxy {:.4}, mean_log_loss {:.4}",
                    last.round,
                    last.metrics.prediction_accuracy,
                    last.metrics.picked_ratio_proxy,
                    last.metrics.mean_log_loss
                );
            }
            println!("ledger: {}", result.ledger.to_json());
            match result.checkpoint {
                CheckpointStatus::Written(path) => {
                    println!("checkpoint written to {}", path.display());
                    Ok(EXIT_OK)
                }
                CheckpointStatus::Withheld => {
                    eprintln!("privacy budget FAIL: checkpoint withheld");
                    Ok(EXIT_BUDGET)
                }
            }
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load_config(&common.config, common.seed)?;
            let report = run_evaluate(&cfg, &checkpoint)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(EXIT_OK)
        }
        Command::Account { common } => {
            let cfg = load_config(&common.config, common.seed)?;
            let ledger = harness::account(&cfg)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join(harness::LEDGER_FILE);
            std::fs::write(&path, ledger.to_json() + "\n")?;
            println!("{}", ledger.to_json());
            match ledger.verdict {
                fedsim::dpftrl::Verdict::Pass => Ok(EXIT_OK),
                fedsim::dpftrl::Verdict::Fail => Ok(EXIT_BUDGET),
            }
        }
        Command::Compare { common, config_b } => {
            let cfg_a = load_config(&common.config, common.seed)?;
            let cfg_b = load_config(&config_b, common.seed)?;
            let report = compare(&cfg_a, &cfg_b, &common.out)?;
            for row in &report.per_round {
                println!(
                    "round {}: accuracy {:.4} vs {:.4} (delta {:+.4})",
                    row.round, row.accuracy_a, row.accuracy_b, row.accuracy_delta
                );
            }
            println!(
                "final rho: {} = {}, {} = {}",
                report.ledger_a.mode,
                report.ledger_a.total_rho,
                report.ledger_b.mode,
                report.ledger_b.total_rho
            );
            if report.ledger_b.rho_ddp != serde_json::Value::Null {
                println!("rho_ddp ({}): {}", report.ledger_b.mode, report.ledger_b.rho_ddp);
            }
            println!("{}", report.verdict);
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
