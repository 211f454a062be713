//! `vnce` command-line harness.
//!
//! ```text
//! vnce run <experiment> --config <file> [--paper-scale] [--workers N] [--out DIR]
//! vnce roc --est K.csv --truth K.csv
//! ```

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use vnce::experiments::{read_matrix_csv, roc_auc, run_experiment, ExperimentConfig, ExperimentKind};

#[derive(Debug, Parser)]
#[command(name = "vnce", version, about = "Variational noise-contrastive estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write its CSV tables and manifest.
    Run {
        /// posterior_grid, mog_population or graph_missing.
        experiment: ExperimentKind,
        /// TOML config; must name the same experiment.
        #[arg(long)]
        config: PathBuf,
        /// Full-size settings (d = 20, n = 1000, 500 population runs).
        #[arg(long)]
        paper_scale: bool,
        /// Worker threads (overrides the config; 0 = one per core).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Area under the ROC curve of an estimated precision matrix.
    Roc {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { experiment, config, paper_scale, workers, out } => {
            let mut cfg = ExperimentConfig::from_file(&config).with_context(|| format!("reading {}", config.display()))?;
            if cfg.experiment != experiment {
                bail!("{} configures '{}', not '{}'", config.display(), cfg.experiment.name(), experiment.name());
            }
            if paper_scale {
                cfg.apply_paper_scale();
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
            let summary = pool.install(|| run_experiment(&cfg))?;
            let failed = summary.failed_cells();
            println!(
                "{}: {} cells, {failed} failed; manifest at {}",
                experiment.name(),
                summary.manifest.cells.len(),
                summary.manifest_path.display()
            );
            Ok(failed == 0)
        }
        Command::Roc { est, truth } => {
            let k_est = read_matrix_csv(&est).with_context(|| format!("reading {}", est.display()))?;
            let k_true = read_matrix_csv(&truth).with_context(|| format!("reading {}", truth.display()))?;
            let roc = roc_auc(&k_est, &k_true)?;
            println!("auc,{}", roc.auc);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
