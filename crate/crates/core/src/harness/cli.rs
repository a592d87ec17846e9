//! `silofl` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! arguments. Failures print one JSON object on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::config::{ConfigError, CsvDataConfig, DataConfig, ExperimentConfig};
use super::matrix::{run_matrix, MatrixOptions};
use super::sweep::{sweep_epsilon, write_curve_csv};
use super::format_sig;
use crate::data::write_csv;
use crate::ensemble::read_manifest;
use crate::nncore::read_checkpoint;
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "silofl", version, about = "Cross-silo federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic silos described by a config to CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run the regime × year × seed matrix.
    Run(RunArgs),
    /// Sweep the privacy budget of `federated_ldp`.
    Sweep(RunArgs),
    /// Summarize a checkpoint file or an ensemble directory.
    Inspect { path: PathBuf },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    /// Use this CSV (as written by `generate`) instead of `[data]`.
    #[arg(long)]
    data: Option<PathBuf>,
}

enum Failure {
    Config(ConfigError),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { key, message } => Failure::Config(ConfigError { key, message }),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

/// Runs the CLI and returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Config(e)) => {
            eprintln!("{}", json!({ "error": "config", "key": e.key, "message": e.message }));
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("{}", json!({ "error": "runtime", "message": msg }));
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Generate { config, seed, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let DataConfig::Synthetic(mut syn) = cfg.data else {
                return Err(ConfigError { key: "data.source".into(), message: "generate needs synthetic data".into() }.into());
            };
            if let Some(s) = seed {
                syn.seed = s;
            }
            let silos = crate::data::generate_silos(&syn.generator())?;
            std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
            let path = out_dir.join("data.csv");
            write_csv(&path, &silos)?;
            println!("{}", json!({ "data": path, "silos": silos.len(), "records": silos.iter().map(|s| s.len()).sum::<usize>() }));
            Ok(())
        }
        Command::Run(args) => {
            let cfg = prepare(&args)?;
            let silos = cfg.load_silos()?;
            let opts = MatrixOptions { out_dir: Some(args.out_dir.clone()), threads: args.threads };
            let report = run_matrix(&cfg, &silos, &opts)?;
            let failed = report.cells.iter().filter(|c| !c.is_ok()).count();
            let means: serde_json::Map<String, serde_json::Value> = report
                .regime_means()
                .into_iter()
                .map(|(r, m)| (r.to_string(), json!(format_sig(m))))
                .collect();
            println!(
                "{}",
                json!({ "report": args.out_dir.join("report.csv"), "cells": report.cells.len(), "failed": failed, "mean_rmse": means })
            );
            Ok(())
        }
        Command::Sweep(args) => {
            let cfg = prepare(&args)?;
            let silos = cfg.load_silos()?;
            let curve = sweep_epsilon(&cfg, &silos, &cfg.sweep.budgets, args.threads)?;
            let path = args.out_dir.join("curves").join("epsilon.csv");
            write_curve_csv(&path, &curve)?;
            println!("{}", json!({ "curve": path, "points": curve.len() }));
            Ok(())
        }
        Command::Inspect { path } => {
            println!("{}", inspect(&path)?);
            Ok(())
        }
    }
}

fn prepare(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(data) = &args.data {
        let dim = standard_feature_dim(data)?;
        cfg.data = DataConfig::Csv(CsvDataConfig::standard(data.clone(), dim));
    }
    if args.threads == Some(0) {
        return Err(ConfigError { key: "--threads".into(), message: "must be positive".into() }.into());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Number of `x{j}` columns in a CSV written by `generate`.
fn standard_feature_dim(path: &Path) -> Result<usize, Failure> {
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    let headers = r.headers().map_err(Error::from)?;
    let dim = headers.iter().filter(|h| h.strip_prefix('x').is_some_and(|n| n.parse::<usize>().is_ok())).count();
    if dim == 0 {
        return Err(Failure::Runtime(format!("{}: no x0..xN feature columns", path.display())));
    }
    Ok(dim)
}

fn inspect(path: &Path) -> Result<serde_json::Value, Failure> {
    if path.is_dir() {
        let (manifest, bundles) = read_manifest(path)?;
        let members: Vec<_> = bundles
            .iter()
            .map(|b| {
                json!({
                    "silo": b.silo_id,
                    "lat": b.train_location.lat,
                    "lon": b.train_location.lon,
                    "parameters": b.params.num_values(),
                })
            })
            .collect();
        return Ok(json!({ "kind": "ensemble", "config_hash": manifest.config_hash, "members": members }));
    }
    let params = read_checkpoint(path)?;
    let entries: Vec<_> = params
        .entries
        .iter()
        .map(|e| json!({ "name": e.name, "kind": format!("{:?}", e.kind), "shape": e.shape }))
        .collect();
    Ok(json!({ "kind": "checkpoint", "parameters": params.num_values(), "entries": entries }))
}
