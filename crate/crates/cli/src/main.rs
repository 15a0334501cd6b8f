use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hypcv_core::engine::params::ParamStore;
use hypcv_core::eval::{self, ExperimentConfig};
use hypcv_core::model::Model;
use hypcv_core::Result;

/// Hyperbolic spatio-temporal transformer for point cloud video anomaly detection.
#[derive(Debug, Parser)]
#[command(name = "hypcv", version)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Prints trainable parameter counts of the configured model.
    #[arg(long, global = true)]
    report_params: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic train/test split.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains on DATA/train and writes a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Scores every video of DATA/test; one CSV per video in OUT.
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Computes AUROC from the score files in DATA; writes OUT/report.txt and OUT/report.csv.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compares analytic gradients with central finite differences.
    CheckGrad {
        /// Only parameters whose name contains this text.
        #[arg(long, default_value = "")]
        filter: String,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::parse(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn report_params(cfg: &ExperimentConfig) -> Result<()> {
    let mut store = ParamStore::new();
    let model = Model::register(&mut store, &cfg.model_config()?, cfg.seed)?;
    let counts = model.param_counts(&store);
    for (name, n) in &counts {
        println!("{name:<12} {n:>10}");
    }
    println!("{:<12} {:>10}", "total", counts.iter().map(|c| c.1).sum::<usize>());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match (&cli.command, &cli.config) {
        // Without a config file, scoring uses the checkpoint's own settings.
        (Command::Score { checkpoint, .. }, None) => {
            let mut c = eval::checkpoint_config(checkpoint)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            c
        }
        _ => load_config(cli.config.as_deref(), cli.seed)?,
    };
    if cli.report_params {
        report_params(&cfg)?;
    }
    match cli.command {
        Command::GenData { out } => {
            let (train, test) = eval::run_gen_data(&cfg, &out)?;
            println!("wrote {train} training and {test} test sequences to {}", out.display());
        }
        Command::Train { data, checkpoint } => {
            eval::run_training(&cfg, &data, &checkpoint, |line| println!("{line}"))?;
            println!("checkpoint written to {}", checkpoint.display());
        }
        Command::Score { data, checkpoint, out } => {
            let series = eval::run_scoring(&cfg, &checkpoint, &data, &out)?;
            println!("scored {} videos into {}", series.len(), out.display());
        }
        Command::Eval { data, out } => {
            let mut report = eval::run_eval(&eval::load_score_dir(&data)?)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            report.config_echo = cli.config.is_some().then(|| cfg.to_text());
            report.write(&out)?;
            print!("{}", report.to_table());
        }
        Command::CheckGrad { filter, step } => {
            let report = eval::run_check_grad(&cfg, step, |name| name.contains(&filter))?;
            println!(
                "{:<28} {:>8} {:>12} {:>12} {:>12} {:>12}",
                "parameter", "entries", "max_rel", "max_abs", "max_grad", "scaled"
            );
            for p in &report.params {
                println!(
                    "{:<28} {:>8} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e}",
                    p.name,
                    p.entries,
                    p.max_rel_error,
                    p.max_abs_error,
                    p.max_grad,
                    p.scaled_error()
                );
            }
            println!("worst scaled error {:.3e}", report.max_scaled_error());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
