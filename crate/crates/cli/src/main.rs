use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use metactl::harness::{self, ControllerVariant, ExperimentConfig, Preset};

/// Meta-reinforcement-learning process controller experiments.
#[derive(Parser, Debug)]
#[command(name = "metactl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a preset and write its results directory.
    Run {
        /// binary-gain, first-order-generalize, first-order-adapt,
        /// embedding-export, objectives-generalize or objectives-adapt.
        preset: Preset,
        /// Flat TOML file overriding the preset defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of consecutive seeds starting at the first configured seed.
        #[arg(long)]
        seed_count: Option<usize>,
        /// DE, PE, NoEmbed or Scratch.
        #[arg(long)]
        variant: Option<ControllerVariant>,
        /// Output root; defaults to the config value, then $METACTL_OUT, then ./results.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute metrics.csv from the episodes.csv of a results directory.
    Metrics { results_dir: PathBuf },
    /// Write embeddings.csv for the tasks of a saved checkpoint.
    ExportEmbeddings { checkpoint: PathBuf, results_dir: PathBuf },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            preset,
            config,
            seed_count,
            variant,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => ExperimentConfig::load(path, Some(preset))
                    .with_context(|| format!("loading {}", path.display()))?,
                None => ExperimentConfig::preset(preset),
            };
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(n) = seed_count {
                cfg = cfg.with_seed_count(n);
            }
            if out.is_some() {
                cfg.output_root = out;
            }
            cfg.validate()?;
            let report = harness::run_experiment(&cfg)?;
            println!("{} {} seeds {:?}", cfg.preset, cfg.variant, cfg.seeds);
            if let Some(last) = report.metrics.last() {
                println!(
                    "final episode {}: median {:.3} (q1 {:.3}, q3 {:.3}), moving average {:.3}",
                    last.episode, last.median, last.q1, last.q3, last.moving_avg_median
                );
            }
            println!("{}", report.dir.display());
        }
        Command::Metrics { results_dir } => {
            let rows = harness::recompute_metrics(&results_dir)?;
            println!("episode,q1,median,q3,moving_avg_median");
            for r in &rows {
                println!("{},{},{},{},{}", r.episode, r.q1, r.median, r.q3, r.moving_avg_median);
            }
        }
        Command::ExportEmbeddings {
            checkpoint,
            results_dir,
        } => {
            let rows = harness::export_checkpoint_embeddings(&checkpoint, &results_dir)?;
            println!("{} rows -> {}", rows.len(), results_dir.join("embeddings.csv").display());
        }
    }
    Ok(())
}
