use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mapu::cli::{self, CliError};
use mapu::config::ExperimentConfig;

/// Source-free time-series domain adaptation via temporal imputation and
/// evidential uncertainty.
#[derive(Parser)]
#[command(name = "mapu", version)]
struct Args {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key with a dotted path, e.g. --set adapt.lr=0.003.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    /// Replace the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for multi-seed scenarios.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source/target dataset quartet for the first seed.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on source_train.tsd found in the data directory.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained checkpoint to an unlabeled target dataset.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full multi-seed pipeline with aggregate mean±std reporting.
    Scenario {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path, &args.overrides)?,
        None => ExperimentConfig::from_json("{}", &args.overrides)?,
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn run(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    match &args.command {
        Command::Generate { out } => cli::cmd_generate(&cfg, out),
        Command::Pretrain { data, out } => {
            let report = cli::cmd_pretrain(&cfg, data, out)?;
            println!(
                "pretrained ({:?}, {} epochs) -> {}",
                report.variant,
                report.epochs,
                out.display()
            );
            Ok(())
        }
        Command::Adapt {
            checkpoint,
            data,
            out,
        } => {
            let report = cli::cmd_adapt(&cfg, checkpoint, data, out)?;
            println!("{} finished -> {}", report.stage, out.display());
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
        } => {
            let report = cli::cmd_evaluate(&cfg, checkpoint, data, out)?;
            println!(
                "accuracy {:.4} | macro-F1 {:.4} (softmax) / {:.4} (evidential)",
                report.accuracy_softmax, report.mf1_softmax, report.mf1_evidential
            );
            Ok(())
        }
        Command::Scenario { out } => {
            let summary = cli::cmd_scenario(&cfg, Some(out), args.workers)?;
            for variant in ["source_only", "mapu", "emapu"] {
                let ms = &summary.aggregate[&format!("mf1_{variant}")];
                println!("MF1 {variant}: {:.4} ± {:.4}", ms.mean, ms.std);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
