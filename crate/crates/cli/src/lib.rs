//! Configuration, orchestration and persistence for the valuation pipeline.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::Setup;
use crate::error::CliError;
use crate::pipeline::Run;

#[derive(Debug, Parser)]
#[command(name = "xva", version, about = "Nested deep BSDE valuation adjustments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true, env = "XVA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory for models, metrics and the manifest.
    #[arg(long, global = true, env = "XVA_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true, env = "XVA_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "XVA_THREADS")]
    pub threads: Option<usize>,
    /// Restricts report, reference and full-pipeline to one layer (or up to it).
    #[arg(long, global = true, env = "XVA_LAYER", value_parser = clap::value_parser!(u8).range(1..=4))]
    pub layer: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Checks the configuration and prints derived quantities.
    Validate,
    /// Writes a CSV dump of simulated paths.
    Simulate,
    /// Trains the clean-value network (layer 1).
    #[command(name = "train-layer1")]
    TrainLayer1,
    /// Trains the initial-margin quantile networks (layer 2).
    #[command(name = "train-layer2")]
    TrainLayer2,
    /// Trains the CVA, DVA, ColVA and MVA networks (layer 3).
    #[command(name = "train-layer3")]
    TrainLayer3,
    /// Trains the FVA network (layer 4).
    #[command(name = "train-layer4")]
    TrainLayer4,
    /// Nested Monte Carlo references along selected evaluation paths.
    Reference,
    /// Metric CSVs for the trained layers.
    Report,
    /// Trains every layer in order, then reports and computes references.
    FullPipeline,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let layer = cli.layer.map(usize::from);
    if cli.command == Command::Validate {
        let setup = Setup::load(config)?;
        for (k, v) in setup.summary() {
            println!("{k}: {v}");
        }
        return Ok(());
    }
    let mut run = Run::open(config, &cli.out, cli.seed)?;
    match cli.command {
        Command::Validate => unreachable!(),
        Command::Simulate => run.simulate(),
        Command::TrainLayer1 => run.train_layer1(),
        Command::TrainLayer2 => run.train_layer2(),
        Command::TrainLayer3 => run.train_layer3(),
        Command::TrainLayer4 => run.train_layer4(),
        Command::Reference => run.reference(layer),
        Command::Report => run.report(layer.unwrap_or(4)),
        Command::FullPipeline => {
            let top = layer.unwrap_or(4);
            run.train_layer1()?;
            if top >= 2 {
                run.train_layer2()?;
            }
            if top >= 3 {
                run.train_layer3()?;
            }
            if top >= 4 {
                run.train_layer4()?;
            }
            run.report(top)?;
            if !run.setup.config.reference.paths.is_empty() && !run.setup.config.reference.steps.is_empty() {
                run.reference(layer.map(|_| top))?;
            }
            Ok(())
        }
    }
}
