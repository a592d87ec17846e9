use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_features, split, NormMode, NormalizationStats, SiloDataset, SplitPlan};
use crate::ensemble::{evaluate_ensemble, train_local_with_result, ModelBundle, RankWeighting};
use crate::error::{Error, Result};
use crate::federation::{evaluate, run_federation, Aggregation, FedConfig, PrivacyPolicy, RoundRecord, SiloSplits};
use crate::nncore::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// All silos' data merged and trained centrally.
    TraditionalPooled,
    LocalOnly,
    ModelSharing,
    ModelSharingLdp,
    Federated,
    FederatedLdp,
}

impl Regime {
    pub fn all() -> Vec<Regime> {
        use Regime::*;
        vec![TraditionalPooled, LocalOnly, ModelSharing, ModelSharingLdp, Federated, FederatedLdp]
    }

    pub fn needs_privacy(self) -> bool {
        matches!(self, Regime::ModelSharingLdp | Regime::FederatedLdp)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::TraditionalPooled => "traditional_pooled",
            Regime::LocalOnly => "local_only",
            Regime::ModelSharing => "model_sharing",
            Regime::ModelSharingLdp => "model_sharing_ldp",
            Regime::Federated => "federated",
            Regime::FederatedLdp => "federated_ldp",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::all()
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown regime `{s}`")))
    }
}

/// Everything a regime needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub model: ModelSpec,
    /// `seed` and `checkpoint_dir` are overwritten per run.
    pub fed: FedConfig,
    pub privacy: Option<PrivacyPolicy>,
    pub weighting: RankWeighting,
    pub norm: NormMode,
    pub val_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct RegimeOutcome {
    pub regime: Regime,
    /// Test RMSE per silo.
    pub rmse: BTreeMap<String, f64>,
    /// ε spent per silo (0 for non-private regimes).
    pub epsilon: BTreeMap<String, f64>,
    /// Training history per run: one entry for federated regimes, one per
    /// silo for locally trained ones.
    pub history: BTreeMap<String, Vec<RoundRecord>>,
    /// Trained members of a model-sharing ensemble.
    pub bundles: Vec<ModelBundle>,
    pub norm_warnings: Vec<String>,
}

struct Prepared {
    splits: Vec<SiloSplits>,
    /// Normalized test splits.
    tests: Vec<SiloDataset>,
    raw_tests: Vec<SiloDataset>,
    stats: NormalizationStats,
}

fn prepare(silos: &[SiloDataset], test_year: i32, seed: u64, settings: &Settings) -> Result<Prepared> {
    let plan = SplitPlan { test_year, val_fraction: settings.val_fraction };
    let mut sorted: Vec<&SiloDataset> = silos.iter().collect();
    sorted.sort_by(|a, b| a.silo_id.cmp(&b.silo_id));
    let mut trains = Vec::new();
    let mut vals = Vec::new();
    let mut raw_tests = Vec::new();
    for s in sorted {
        let (tr, va, te) = split(s, &plan, seed)?;
        trains.push(tr);
        vals.push(va);
        raw_tests.push(te);
    }
    let (trains, stats) = normalize_features(&trains, settings.norm)?;
    let norm = |d: &SiloDataset| if d.is_empty() { Ok(d.clone()) } else { stats.apply(d) };
    let vals = vals.iter().map(norm).collect::<Result<Vec<_>>>()?;
    let tests = raw_tests.iter().map(norm).collect::<Result<Vec<_>>>()?;
    let splits = trains.into_iter().zip(vals).map(|(train, val)| SiloSplits { train, val }).collect();
    Ok(Prepared { splits, tests, raw_tests, stats })
}

fn pooled(splits: &[SiloSplits]) -> SiloSplits {
    let id = splits.iter().map(|s| s.id()).collect::<Vec<_>>().join("+");
    let mut train = splits[0].train.empty_like();
    let mut val = splits[0].val.empty_like();
    train.silo_id = id.clone();
    val.silo_id = id;
    for s in splits {
        train.records.extend(s.train.records.iter().cloned());
        val.records.extend(s.val.records.iter().cloned());
    }
    SiloSplits { train, val }
}

/// Trains and evaluates one regime for one (test year, seed) cell.
///
/// Every silo is split year-forward, training splits are normalized, and the
/// fitted statistics are applied to validation and test splits.
pub fn run_regime(
    regime: Regime,
    silos: &[SiloDataset],
    test_year: i32,
    seed: u64,
    settings: &Settings,
) -> Result<RegimeOutcome> {
    let privacy = if regime.needs_privacy() {
        Some(settings.privacy.as_ref().ok_or_else(|| {
            Error::config("privacy", format!("regime `{regime}` requires a privacy configuration"))
        })?)
    } else {
        None
    };
    let prep = prepare(silos, test_year, seed, settings)?;
    let fed = FedConfig { seed, ..settings.fed.clone() };
    let zero_eps = || prep.splits.iter().map(|s| (s.id().to_owned(), 0.0)).collect::<BTreeMap<_, _>>();
    let mut out = RegimeOutcome {
        regime,
        rmse: BTreeMap::new(),
        epsilon: BTreeMap::new(),
        history: BTreeMap::new(),
        bundles: Vec::new(),
        norm_warnings: prep.stats.warnings.clone(),
    };

    match regime {
        Regime::TraditionalPooled => {
            let all = pooled(&prep.splits);
            let fed = FedConfig { fraction: 1.0, aggregation: Aggregation::Fedavg, ..fed };
            let res = run_federation(std::slice::from_ref(&all), &settings.model, &fed, None)?;
            for t in &prep.tests {
                let ev = evaluate(&res.global, &res.per_silo_bn, t, Aggregation::Fedavg)?;
                out.rmse.insert(t.silo_id.clone(), ev.rmse);
            }
            out.epsilon = zero_eps();
            out.history.insert(all.id().to_owned(), res.history);
        }
        Regime::Federated | Regime::FederatedLdp => {
            let res = run_federation(&prep.splits, &settings.model, &fed, privacy)?;
            for t in &prep.tests {
                let ev = evaluate(&res.global, &res.per_silo_bn, t, fed.aggregation)?;
                if ev.used_fallback_bn {
                    log::warn!("silo `{}` never trained; evaluated with the averaged batch-norm state", t.silo_id);
                }
                out.rmse.insert(t.silo_id.clone(), ev.rmse);
            }
            out.epsilon = res.epsilon;
            out.history.insert("federation".into(), res.history);
        }
        Regime::LocalOnly | Regime::ModelSharing | Regime::ModelSharingLdp => {
            let bundles = prep
                .splits
                .par_iter()
                .map(|s| {
                    let stats = prep.stats.for_silo(s.id()).cloned().expect("training split was normalized");
                    let dp = privacy.map(|p| p.for_silo(s.id()));
                    let cfg = FedConfig { checkpoint_dir: None, ..fed.clone() };
                    train_local_with_result(s, stats, &settings.model, &cfg, dp)
                })
                .collect::<Result<Vec<_>>>()?;
            for (bundle, res) in bundles {
                out.epsilon.extend(res.epsilon);
                out.history.insert(bundle.silo_id.clone(), res.history);
                out.bundles.push(bundle);
            }
            if regime == Regime::LocalOnly {
                for (b, t) in out.bundles.iter().zip(&prep.tests) {
                    debug_assert_eq!(b.silo_id, t.silo_id);
                    let ev = evaluate(&b.params, &BTreeMap::new(), t, Aggregation::Fedavg)?;
                    out.rmse.insert(t.silo_id.clone(), ev.rmse);
                }
            } else {
                out.rmse = evaluate_ensemble(&out.bundles, &prep.raw_tests, settings.weighting)?;
            }
        }
    }
    Ok(out)
}
