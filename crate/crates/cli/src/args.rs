use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Overrides, Task};
use crate::exit::Result;

#[derive(Debug, Parser)]
#[command(name = "geomae", version, about = "Multi-temporal masked autoencoder for multispectral imagery")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML). Defaults apply to anything left out.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Model preset: tiny, 300M or 600M.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Sets a config key, e.g. `--override schedule.max_steps=200`.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl GlobalArgs {
    /// File (or defaults), then flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        base.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            preset: self.preset.clone(),
            set: self.overrides.clone(),
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Masked reconstruction pretraining; writes a checkpoint and loss trace.
    Pretrain,
    /// Fine-tunes a task head, evaluating on the test split when present.
    Finetune,
    /// Scores a fine-tuned checkpoint on the test split.
    Eval,
    /// Hyperparameter search on validation, then seeded repeats on test.
    Benchmark,
    /// Writes encoder latents `[L, D]` for every input chip.
    Embed {
        /// Stop after this many chips.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Builds a training dataset from a tile catalog and scene index.
    SampleDataset {
        #[arg(long, value_name = "CSV")]
        catalog: PathBuf,
        #[arg(long, value_name = "CSV")]
        scenes: PathBuf,
    },
    /// Writes a synthetic tile catalog and scene index.
    SynthCatalog {
        #[arg(long, default_value_t = 2000)]
        tiles: usize,
        #[arg(long, default_value_t = 24)]
        scenes: usize,
    },
    /// Writes the synthetic chips from `[data.synthetic]` plus a manifest.
    SynthChips,
    /// Writes a synthetic labeled task as train/val/test manifests.
    SynthTask {
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
    },
    /// Prints the resolved config.
    Config,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "classify" => Ok(Task::Classify),
        "segment" => Ok(Task::Segment),
        "regress" => Ok(Task::Regress),
        _ => Err(format!("{s:?} is not classify, segment or regress")),
    }
}
