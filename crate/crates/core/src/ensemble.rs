//! Model sharing: one independently trained model per silo, combined at
//! prediction time by (optionally distance-rank weighted) averaging.
//!
//! Rank 1 is the bundle trained closest to the query location. Ranks are
//! turned into weights that decrease with distance, either `1/rank` or
//! `|K| − rank + 1`, then normalized. Using the raw rank as the weight would
//! favour the furthest silos, so that reading is not offered.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureStats, GeoPoint, SiloDataset};
use crate::error::{Error, Result};
use crate::federation::{run_federation, Aggregation, FedConfig, FederationResult, PrivacyPolicy, SiloSplits};
use crate::nncore::{self, ModelSpec, ParameterSet};
use crate::privacy::PrivacySpec;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub silo_id: String,
    pub params: ParameterSet,
    pub train_location: GeoPoint,
    /// Statistics the model's inputs were normalized with.
    pub norm_stats: FeatureStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    Uniform,
    #[default]
    DistanceRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankToWeight {
    #[default]
    InverseRank,
    LinearReversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RankWeighting {
    pub mode: WeightingMode,
    #[serde(default)]
    pub rank_to_weight: RankToWeight,
}

impl RankWeighting {
    pub const UNIFORM: RankWeighting = RankWeighting { mode: WeightingMode::Uniform, rank_to_weight: RankToWeight::InverseRank };
    pub const INVERSE_RANK: RankWeighting =
        RankWeighting { mode: WeightingMode::DistanceRank, rank_to_weight: RankToWeight::InverseRank };
}

/// Trains one silo's model on its (already normalized) splits.
///
/// This is the federation loop with a single silo and full participation, so
/// local training, early stopping and the DP path behave exactly as they do
/// inside a federation.
pub fn train_local(
    silo: &SiloSplits,
    norm_stats: FeatureStats,
    spec: &ModelSpec,
    cfg: &FedConfig,
    dp: Option<&PrivacySpec>,
) -> Result<ModelBundle> {
    train_local_with_result(silo, norm_stats, spec, cfg, dp).map(|(b, _)| b)
}

/// [`train_local`], also returning the training history and ε spent.
pub fn train_local_with_result(
    silo: &SiloSplits,
    norm_stats: FeatureStats,
    spec: &ModelSpec,
    cfg: &FedConfig,
    dp: Option<&PrivacySpec>,
) -> Result<(ModelBundle, FederationResult)> {
    if silo.train.is_empty() {
        return Err(Error::EmptyData(format!("silo `{}` has an empty training split", silo.id())));
    }
    let cfg = FedConfig { fraction: 1.0, aggregation: Aggregation::Fedavg, ..cfg.clone() };
    let policy = dp.map(|s| PrivacyPolicy::uniform(*s));
    let result = run_federation(std::slice::from_ref(silo), spec, &cfg, policy.as_ref())?;
    let bundle = ModelBundle {
        silo_id: silo.id().to_owned(),
        params: result.global.clone(),
        train_location: silo.train.location,
        norm_stats,
    };
    Ok((bundle, result))
}

/// Rank of each bundle by great-circle distance to `query` (1 = nearest).
/// Ties go to the smaller silo id.
pub fn rank_distances(query: &GeoPoint, bundles: &[ModelBundle]) -> BTreeMap<String, usize> {
    let mut order: Vec<(f64, &str)> =
        bundles.iter().map(|b| (query.distance_km(&b.train_location), b.silo_id.as_str())).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    order.into_iter().enumerate().map(|(i, (_, id))| (id.to_owned(), i + 1)).collect()
}

/// Normalized weights, aligned with `bundles` sorted by silo id.
pub fn ensemble_weights(query: &GeoPoint, bundles: &[ModelBundle], weighting: RankWeighting) -> Vec<f64> {
    let k = bundles.len();
    let mut sorted: Vec<&ModelBundle> = bundles.iter().collect();
    sorted.sort_by(|a, b| a.silo_id.cmp(&b.silo_id));
    let raw: Vec<f64> = match weighting.mode {
        WeightingMode::Uniform => vec![1.0; k],
        WeightingMode::DistanceRank => {
            let ranks = rank_distances(query, bundles);
            sorted
                .iter()
                .map(|b| {
                    let r = ranks[&b.silo_id] as f64;
                    match weighting.rank_to_weight {
                        RankToWeight::InverseRank => 1.0 / r,
                        RankToWeight::LinearReversed => k as f64 - r + 1.0,
                    }
                })
                .collect()
        }
    };
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn combine(preds: &[f64], weights: &[f64], weighting: RankWeighting) -> f64 {
    match weighting.mode {
        WeightingMode::Uniform => preds.iter().sum::<f64>() / preds.len() as f64,
        WeightingMode::DistanceRank => preds.iter().zip(weights).map(|(p, w)| p * w).sum(),
    }
}

fn sorted_bundles(bundles: &[ModelBundle]) -> Result<Vec<&ModelBundle>> {
    if bundles.is_empty() {
        return Err(Error::InvalidInput("empty ensemble".into()));
    }
    let mut sorted: Vec<&ModelBundle> = bundles.iter().collect();
    sorted.sort_by(|a, b| a.silo_id.cmp(&b.silo_id));
    if sorted.windows(2).any(|w| w[0].silo_id == w[1].silo_id) {
        return Err(Error::InvalidInput("duplicate silo id in ensemble".into()));
    }
    Ok(sorted)
}

/// Prediction for one raw (unnormalized) feature vector.
pub fn predict_ensemble(x: &[f64], query: &GeoPoint, bundles: &[ModelBundle], weighting: RankWeighting) -> Result<f64> {
    let sorted = sorted_bundles(bundles)?;
    let preds = sorted
        .iter()
        .map(|b| {
            if x.len() != b.norm_stats.mean.len() {
                return Err(Error::DimensionMismatch { expected: b.norm_stats.mean.len(), got: x.len() });
            }
            Ok(nncore::predict(&b.params, &b.norm_stats.apply_row(x), x.len())?[0])
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = ensemble_weights(query, bundles, weighting);
    Ok(combine(&preds, &weights, weighting))
}

/// Per-silo RMSE of the ensemble, querying with each test silo's location.
pub fn evaluate_ensemble(
    bundles: &[ModelBundle],
    test_silos: &[SiloDataset],
    weighting: RankWeighting,
) -> Result<BTreeMap<String, f64>> {
    let sorted = sorted_bundles(bundles)?;
    let mut out = BTreeMap::new();
    for test in test_silos {
        if test.is_empty() {
            return Err(Error::EmptyData(format!("silo `{}` has an empty test split", test.silo_id)));
        }
        let dim = test.feature_dim().unwrap_or(0);
        let member_preds = sorted
            .iter()
            .map(|b| {
                let normalized = b.norm_stats.apply(test)?;
                nncore::predict(&b.params, &normalized.feature_matrix(), dim)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = ensemble_weights(&test.location, bundles, weighting);
        let preds: Vec<f64> = (0..test.len())
            .map(|i| {
                let row: Vec<f64> = member_preds.iter().map(|p| p[i]).collect();
                combine(&row, &weights, weighting)
            })
            .collect();
        out.insert(test.silo_id.clone(), nncore::rmse(&preds, &test.targets())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub silo_id: String,
    pub location: GeoPoint,
    pub norm_stats: FeatureStats,
    /// Checkpoint file name relative to the manifest directory.
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub config_hash: String,
    pub bundles: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one checkpoint per bundle plus `manifest.json` into `dir`.
pub fn write_manifest(dir: &Path, bundles: &[ModelBundle], config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(bundles.len());
    for b in sorted_bundles(bundles)? {
        let file = format!("{}.ckpt", b.silo_id);
        nncore::write_checkpoint(&dir.join(&file), &b.params)?;
        entries.push(ManifestEntry {
            silo_id: b.silo_id.clone(),
            location: b.train_location,
            norm_stats: b.norm_stats.clone(),
            checkpoint: file,
        });
    }
    let manifest = EnsembleManifest { config_hash: config_hash.to_owned(), bundles: entries };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<(EnsembleManifest, Vec<ModelBundle>)> {
    let manifest: EnsembleManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let bundles = manifest
        .bundles
        .iter()
        .map(|e| {
            Ok(ModelBundle {
                silo_id: e.silo_id.clone(),
                params: nncore::read_checkpoint(&dir.join(&e.checkpoint))?,
                train_location: e.location,
                norm_stats: e.norm_stats.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((manifest, bundles))
}
