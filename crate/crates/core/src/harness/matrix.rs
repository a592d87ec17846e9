use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::regime::{run_regime, Regime, RegimeOutcome, Settings};
use super::{format_sig, mean};
use crate::data::{check_federation, SiloDataset};
use crate::ensemble::write_manifest;
use crate::error::Result;
use crate::federation::{write_history_csv, FedConfig};

#[derive(Debug, Clone, Default)]
pub struct MatrixOptions {
    pub out_dir: Option<PathBuf>,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub regime: Regime,
    pub year: i32,
    pub seed: u64,
    pub status: CellStatus,
    pub rmse: BTreeMap<String, f64>,
    pub epsilon: BTreeMap<String, f64>,
    /// Per-round ε of every silo, keyed by training run.
    pub epsilon_trajectory: BTreeMap<String, Vec<BTreeMap<String, f64>>>,
    pub wall_clock_secs: f64,
}

impl CellResult {
    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub years: Vec<i32>,
    pub silos: Vec<String>,
    pub cells: Vec<CellResult>,
    /// Privacy parameters used outside the accountant's comfortable regime.
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    /// Mean test RMSE over every silo, year and seed of successful cells.
    pub fn regime_means(&self) -> BTreeMap<Regime, f64> {
        let mut acc: BTreeMap<Regime, Vec<f64>> = BTreeMap::new();
        for c in self.cells.iter().filter(|c| c.is_ok()) {
            acc.entry(c.regime).or_default().extend(c.rmse.values().copied());
        }
        acc.into_iter().map(|(r, v)| (r, mean(&v))).collect()
    }

    /// Per-silo RMSE of one regime averaged over seeds, per year.
    pub fn seed_means(&self, regime: Regime) -> BTreeMap<(i32, String), f64> {
        let mut acc: BTreeMap<(i32, String), Vec<f64>> = BTreeMap::new();
        for c in self.cells.iter().filter(|c| c.is_ok() && c.regime == regime) {
            for (s, v) in &c.rmse {
                acc.entry((c.year, s.clone())).or_default().push(*v);
            }
        }
        acc.into_iter().map(|(k, v)| (k, mean(&v))).collect()
    }

    pub fn wall_clock_by_regime(&self) -> BTreeMap<Regime, f64> {
        let mut out = BTreeMap::new();
        for c in &self.cells {
            *out.entry(c.regime).or_insert(0.0) += c.wall_clock_secs;
        }
        out
    }

    /// `report.csv`: one row per (regime, year, seed, silo); failed cells get
    /// one row per silo with empty metrics.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["regime", "year", "seed", "silo", "rmse", "epsilon", "status"])?;
        for c in &self.cells {
            let year = c.year.to_string();
            let seed = c.seed.to_string();
            match &c.status {
                CellStatus::Ok => {
                    for (silo, rmse) in &c.rmse {
                        let eps = c.epsilon.get(silo).copied().unwrap_or(0.0);
                        w.write_record([c.regime.as_str(), &year, &seed, silo, &format_sig(*rmse), &format_sig(eps), "ok"])?;
                    }
                }
                CellStatus::Failed(_) => {
                    for silo in &self.silos {
                        w.write_record([c.regime.as_str(), &year, &seed, silo, "", "", "failed"])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self, cfg: &ExperimentConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_hash: {}", self.config_hash);
        let _ = writeln!(s, "seeds: {:?}", self.seeds);
        let _ = writeln!(s, "test_years: {:?}", self.years);
        let _ = writeln!(s, "silos: {}", self.silos.len());
        let _ = writeln!(s, "normalization: {:?}", cfg.normalization);
        let _ = writeln!(s, "aggregation: {:?}", cfg.federation.aggregation);
        if let Some(p) = &cfg.privacy {
            let _ = writeln!(
                s,
                "privacy: accountant={:?} clip_norm={} noise_multiplier={} delta={} epsilon_budget={} overrides={}",
                p.accountant,
                format_sig(p.clip_norm),
                format_sig(p.noise_multiplier),
                format_sig(p.delta),
                format_sig(p.epsilon_budget),
                p.overrides.len()
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        let _ = writeln!(s, "cells: {} ({} failed)", self.cells.len(), self.cells.iter().filter(|c| !c.is_ok()).count());
        let _ = writeln!(s, "\nregime mean RMSE:");
        let means = self.regime_means();
        let clock = self.wall_clock_by_regime();
        for r in cfg.regimes.iter() {
            let m = means.get(r).map_or_else(|| "n/a".to_string(), |v| format_sig(*v));
            let _ = writeln!(s, "  {:<20} {:>10}   ({} s)", r.as_str(), m, format_sig(clock.get(r).copied().unwrap_or(0.0)));
        }
        for c in self.cells.iter().filter(|c| !c.is_ok()) {
            if let CellStatus::Failed(msg) = &c.status {
                let _ = writeln!(s, "failed: {} year={} seed={}: {}", c.regime, c.year, c.seed, msg);
            }
        }
        let _ = writeln!(s, "\nwall_clock_secs: {}", format_sig(self.wall_clock_secs));
        s
    }
}

/// Privacy-regime warnings for every silo and test year, using the training
/// split sizes the runs will see.
fn privacy_warnings(cfg: &ExperimentConfig, silos: &[SiloDataset], settings: &Settings) -> Vec<String> {
    let Some(policy) = &settings.privacy else { return Vec::new() };
    if !cfg.regimes.iter().any(|r| r.needs_privacy()) {
        return Vec::new();
    }
    let mut out = std::collections::BTreeSet::new();
    for s in silos {
        for &year in &cfg.test_years {
            let earlier = s.records.iter().filter(|r| r.year < year).count();
            let train = earlier - (settings.val_fraction * earlier as f64).floor() as usize;
            let q = (settings.fed.batch_size as f64 / train.max(1) as f64).min(1.0);
            for w in policy.for_silo(&s.silo_id).regime_warnings(q) {
                out.insert(format!("{} (test year {year}): {w}", s.silo_id));
            }
        }
    }
    out.into_iter().collect()
}

fn cell_name(regime: Regime, year: i32, seed: u64) -> String {
    format!("{}_{}_{}", regime.as_str(), year, seed)
}

struct Job {
    regime: Regime,
    year: i32,
    seed: u64,
}

fn run_cell(job: &Job, silos: &[SiloDataset], settings: &Settings, cfg: &ExperimentConfig, out: Option<&Path>) -> CellResult {
    let start = Instant::now();
    let name = cell_name(job.regime, job.year, job.seed);
    let mut settings = settings.clone();
    if let (Some(dir), true) = (out, cfg.output.checkpoints) {
        if matches!(job.regime, Regime::Federated | Regime::FederatedLdp) {
            settings.fed = FedConfig { checkpoint_dir: Some(dir.join("checkpoints").join(&name)), ..settings.fed };
        }
    }
    let result = run_regime(job.regime, silos, job.year, job.seed, &settings)
        .and_then(|o| write_cell_outputs(&o, &name, cfg, out).map(|_| o));
    let mut cell = CellResult {
        regime: job.regime,
        year: job.year,
        seed: job.seed,
        status: CellStatus::Ok,
        rmse: BTreeMap::new(),
        epsilon: BTreeMap::new(),
        epsilon_trajectory: BTreeMap::new(),
        wall_clock_secs: 0.0,
    };
    match result {
        Ok(o) => {
            cell.rmse = o.rmse;
            cell.epsilon = o.epsilon;
            cell.epsilon_trajectory =
                o.history.into_iter().map(|(k, h)| (k, h.into_iter().map(|r| r.epsilon).collect())).collect();
        }
        Err(e) => {
            log::error!("cell {name} failed: {e}");
            cell.status = CellStatus::Failed(e.to_string());
        }
    }
    cell.wall_clock_secs = start.elapsed().as_secs_f64();
    cell
}

fn write_cell_outputs(o: &RegimeOutcome, name: &str, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    for (run, history) in &o.history {
        let file = if o.history.len() == 1 { format!("{name}.csv") } else { format!("{name}_{run}.csv") };
        write_history_csv(&dir.join("history").join(file), history)?;
    }
    if cfg.output.checkpoints && !o.bundles.is_empty() && matches!(o.regime, Regime::ModelSharing | Regime::ModelSharingLdp) {
        write_manifest(&dir.join("ensembles").join(name), &o.bundles, &cfg.hash())?;
    }
    Ok(())
}

/// Runs every (regime, test year, seed) cell.
///
/// Cells run concurrently and each is a pure function of its coordinates, so
/// the report does not depend on scheduling or thread count. A failing cell is
/// recorded as such and the remaining cells still run.
pub fn run_matrix(cfg: &ExperimentConfig, silos: &[SiloDataset], opts: &MatrixOptions) -> Result<ExperimentReport> {
    let start = Instant::now();
    let dim = check_federation(silos)?;
    let settings = cfg.settings(dim);
    let warnings = privacy_warnings(cfg, silos, &settings);
    for w in &warnings {
        log::warn!("{w}");
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut jobs = Vec::new();
    for &regime in &cfg.regimes {
        for &year in &cfg.test_years {
            for &seed in &cfg.seeds {
                jobs.push(Job { regime, year, seed });
            }
        }
    }
    let run = || -> Vec<CellResult> {
        jobs.par_iter().map(|j| run_cell(j, silos, &settings, cfg, opts.out_dir.as_deref())).collect()
    };
    let cells = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| crate::Error::InvalidInput(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let mut silo_ids: Vec<String> = silos.iter().map(|s| s.silo_id.clone()).collect();
    silo_ids.sort();
    let report = ExperimentReport {
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        years: cfg.test_years.clone(),
        silos: silo_ids,
        cells,
        warnings,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &opts.out_dir {
        report.write_csv(&dir.join("report.csv"))?;
        std::fs::write(dir.join("summary.txt"), report.summary(cfg))?;
    }
    Ok(report)
}
