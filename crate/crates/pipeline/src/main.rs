use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use sevit_pipeline::{load_config, write_synthetic, Run, Stage, StageOptions, StageStatus};

#[derive(Parser)]
#[command(name = "sevit", version, about = "Self-ensembling ViT experiment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Directory of class subdirectories (ingest) or the synthetic output directory (synth).
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    /// TOML config file; its keys override the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key=value` with a dotted key, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, default_value = "default")]
    run_id: String,
    /// Directory holding run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Rerun completed stages, replace a run's config or overwrite a synthetic dataset.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Scan and split a class-per-directory image dataset.
    Ingest,
    /// Write a synthetic two-class PNG dataset to --dataset-root.
    Synth,
    TrainBackbone,
    TrainHeads,
    /// Generate adversarial test sets for every configured attack.
    Attack,
    /// Robust accuracy of the vanilla ViT and the ensemble.
    Evaluate,
    /// Detection scores, ROC curves and the calibrated threshold.
    Detect,
    /// Head accuracy, voting-size, random-subset and token-distance sweeps.
    Analyze,
    /// Plots and a markdown summary.
    Report,
    /// Every stage in order, skipping the ones that are up to date.
    All,
    /// Print the resolved config.
    ShowConfig,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    if c.device != "cpu" {
        bail!("device `{}` is not available: this build runs on cpu only", c.device);
    }
    let base = Run::stored_config(&c.runs_dir, &c.run_id)?;
    let config = load_config(base, c.config.as_deref(), &c.overrides, c.seed)?;

    let stage = match cli.command {
        Command::ShowConfig => {
            print!("{}", config.to_toml()?);
            return Ok(());
        }
        Command::Synth => {
            let Some(root) = &c.dataset_root else {
                bail!("synth needs --dataset-root");
            };
            if root.exists() && std::fs::read_dir(root)?.next().is_some() {
                if !c.force {
                    bail!("{} is not empty; pass --force to overwrite it", root.display());
                }
                std::fs::remove_dir_all(root)?;
            }
            let n = write_synthetic(root, &config.synthetic, config.seeds().synthetic)?;
            info!("wrote {n} images to {}", root.display());
            return Ok(());
        }
        Command::Ingest => Some(Stage::Ingest),
        Command::TrainBackbone => Some(Stage::TrainBackbone),
        Command::TrainHeads => Some(Stage::TrainHeads),
        Command::Attack => Some(Stage::Attack),
        Command::Evaluate => Some(Stage::Evaluate),
        Command::Detect => Some(Stage::Detect),
        Command::Analyze => Some(Stage::Analyze),
        Command::Report => Some(Stage::Report),
        Command::All => None,
    };

    let mut run = Run::open(&c.runs_dir, &c.run_id, config, c.force)?;
    let options = StageOptions {
        dataset_root: c.dataset_root.clone(),
        force: c.force,
    };
    let results = match stage {
        Some(stage) => vec![(stage, run.run_stage(stage, &options)?)],
        None => run.run_all(&options)?,
    };
    for (stage, status) in results {
        let status = match status {
            StageStatus::Ran => "done",
            StageStatus::UpToDate => "up to date",
        };
        println!("{stage}: {status}");
    }
    println!("run directory: {}", run.dir().display());
    Ok(())
}
