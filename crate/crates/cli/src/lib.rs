//! Command-line driver for the routing pipeline.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use xroute_core::routers::Method;

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "xroute",
    version,
    about = "Route queries to the expert model most likely to answer them well"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Query every expert on the corpora and write predictions, split and soft labels.
    Prepare,
    /// Train the selected routers on the prepared split.
    Train,
    /// Evaluate the trained routers and write the reports.
    Evaluate,
    /// Serve the trained routers over HTTP until interrupted.
    Serve {
        /// Listen address; port 0 picks a free port.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Prepare, train and evaluate on a synthetic corpus and simulated fleet.
    Simulate,
}

/// A `--method` value: one method or `all`.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSelection(pub Vec<Method>);

fn parse_methods(s: &str) -> Result<MethodSelection, String> {
    if s == "all" {
        return Ok(MethodSelection(Method::ALL.to_vec()));
    }
    s.parse().map(|m| MethodSelection(vec![m]))
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run config file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// random, knn, mlp, head or all.
    #[arg(long, global = true, value_parser = parse_methods)]
    pub method: Option<MethodSelection>,
    /// Soft-label temperature.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Random-router trials.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Artifact directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            methods: self.method.clone().map(|m| m.0),
            temperature: self.temperature,
            trials: self.trials,
            out: self.out.clone(),
        }
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let config = base.apply(&self.overrides());
        config.validate()?;
        Ok(config)
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = cli.global.resolve()?;
    match &cli.command {
        Command::Prepare => commands::prepare(&config),
        Command::Train => commands::train(&config),
        Command::Evaluate => commands::evaluate(&config).map(drop),
        Command::Serve { bind } => commands::serve(&config, bind.as_deref()),
        Command::Simulate => commands::simulate(&config).map(drop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_flag_accepts_all_and_single_methods() {
        let cli = Cli::try_parse_from(["xroute", "train", "--method", "all"]).unwrap();
        assert_eq!(cli.global.method.unwrap().0, Method::ALL.to_vec());
        let cli = Cli::try_parse_from(["xroute", "--method", "mlp", "evaluate"]).unwrap();
        assert_eq!(cli.global.method.unwrap().0, vec![Method::Mlp]);
        assert!(Cli::try_parse_from(["xroute", "train", "--method", "svm"]).is_err());
    }

    #[test]
    fn unknown_subcommands_are_rejected() {
        assert!(Cli::try_parse_from(["xroute", "deploy"]).is_err());
        assert!(Cli::try_parse_from(["xroute"]).is_err());
    }
}
