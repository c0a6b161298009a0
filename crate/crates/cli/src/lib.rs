//! The `geomae` command-line tool, as a library so tests can drive each
//! command directly.

pub mod args;
pub mod commands;
pub mod config;
pub mod exit;
pub mod tasks;

use args::{Cli, Command};
use exit::{CliError, Result};

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.global.resolve()?;
    match &cli.command {
        Command::Pretrain => commands::pretrain(&cfg).map(drop),
        Command::Finetune => commands::finetune(&cfg).map(drop),
        Command::Eval => {
            for (k, v) in commands::eval(&cfg)?.metrics {
                println!("{k}\t{v}");
            }
            Ok(())
        }
        Command::Benchmark => commands::benchmark(&cfg).map(drop),
        Command::Embed { limit } => commands::embed(&cfg, *limit).map(drop),
        Command::SampleDataset { catalog, scenes } => {
            if commands::sample_dataset(&cfg, catalog, scenes)? {
                Ok(())
            } else {
                Err(CliError::data(format!(
                    "dataset failed verification; see {}",
                    cfg.out_dir()?.join("verify.txt").display()
                )))
            }
        }
        Command::SynthCatalog { tiles, scenes } => commands::synth_catalog_cmd(&cfg, *tiles, *scenes),
        Command::SynthChips => commands::synth_chips(&cfg).map(drop),
        Command::SynthTask { task } => {
            let mut cfg = cfg;
            if let Some(t) = task {
                cfg.task = *t;
            }
            commands::synth_task(&cfg)
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}
