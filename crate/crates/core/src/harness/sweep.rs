use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::regime::{run_regime, Regime};
use super::{format_sig, mean, median};
use crate::data::{check_federation, SiloDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub budget: f64,
    /// Mean ε actually spent per silo.
    pub epsilon_spent: f64,
    pub median_rmse: f64,
    pub mean_rmse: f64,
    /// Per-silo RMSEs pooled into the statistics above.
    pub n: usize,
}

/// Privacy–utility curve of `federated_ldp`: one run per (budget, test year,
/// seed), every silo's budget set to the swept value.
pub fn sweep_epsilon(
    cfg: &ExperimentConfig,
    silos: &[SiloDataset],
    budgets: &[f64],
    threads: Option<usize>,
) -> Result<Vec<CurvePoint>> {
    if budgets.is_empty() || budgets.iter().any(|b| !(*b > 0.0)) || !budgets.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::config("sweep.budgets", "budgets must be positive and strictly increasing"));
    }
    let dim = check_federation(silos)?;
    let base = cfg.settings(dim);
    if base.privacy.is_none() {
        return Err(Error::config("privacy", "the sweep requires a [privacy] section"));
    }
    let mut jobs = Vec::new();
    for &b in budgets {
        for &year in &cfg.test_years {
            for &seed in &cfg.seeds {
                jobs.push((b, year, seed));
            }
        }
    }
    let run = || {
        jobs.par_iter()
            .map(|&(b, year, seed)| {
                let mut settings = base.clone();
                let policy = settings.privacy.as_mut().expect("checked above");
                policy.default.epsilon_budget = b;
                policy.overrides.values_mut().for_each(|s| s.epsilon_budget = b);
                run_regime(Regime::FederatedLdp, silos, year, seed, &settings).map(|o| (b, o))
            })
            .collect::<Result<Vec<_>>>()
    };
    let outcomes = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(budgets
        .iter()
        .map(|&b| {
            let runs: Vec<_> = outcomes.iter().filter(|(ob, _)| *ob == b).map(|(_, o)| o).collect();
            let rmse: Vec<f64> = runs.iter().flat_map(|o| o.rmse.values().copied()).collect();
            let eps: Vec<f64> = runs.iter().flat_map(|o| o.epsilon.values().copied()).collect();
            CurvePoint { budget: b, epsilon_spent: mean(&eps), median_rmse: median(&rmse), mean_rmse: mean(&rmse), n: rmse.len() }
        })
        .collect())
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epsilon_budget", "epsilon_spent", "median_rmse", "mean_rmse", "n"])?;
    for p in curve {
        w.write_record([
            format_sig(p.budget),
            format_sig(p.epsilon_spent),
            format_sig(p.median_rmse),
            format_sig(p.mean_rmse),
            p.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
