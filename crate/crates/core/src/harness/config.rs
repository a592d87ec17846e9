//! TOML experiment configuration.
//!
//! Unknown keys are rejected; every error carries the dotted path of the
//! offending key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::regime::{Regime, Settings};
use crate::data::{
    generate_silos, load_csv, CovariateShift, CsvSchema, GeneratorConfig, GeoLayout, NormMode, ShiftSpec, SiloDataset,
};
use crate::ensemble::{RankToWeight, RankWeighting, WeightingMode};
use crate::federation::{Aggregation, EarlyStopping, FedConfig, LrSchedule, PrivacyPolicy};
use crate::nncore::{HiddenLayer, ModelSpec};
use crate::privacy::{AccountantKind, PrivacySpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid config at `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl From<ConfigError> for crate::Error {
    fn from(e: ConfigError) -> Self {
        crate::Error::Config { key: e.key, message: e.message }
    }
}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { key: key.to_owned(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub test_years: Vec<i32>,
    #[serde(default = "Regime::all")]
    pub regimes: Vec<Regime>,
    #[serde(default)]
    pub normalization: NormMode,
    pub data: DataConfig,
    pub model: ModelSection,
    pub federation: FederationSection,
    #[serde(default)]
    pub privacy: Option<PrivacySection>,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "source")]
pub enum DataConfig {
    Synthetic(SyntheticDataConfig),
    Csv(CsvDataConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataConfig {
    pub n_silos: usize,
    pub per_silo_n: usize,
    pub feature_dim: usize,
    pub year_start: i32,
    pub year_end: i32,
    #[serde(default)]
    pub geo_layout: GeoLayout,
    #[serde(default)]
    pub covariate_scale: f64,
    #[serde(default)]
    pub covariate_offset: f64,
    #[serde(default)]
    pub concept_magnitude: f64,
    #[serde(default = "one")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SyntheticDataConfig {
    pub fn generator(&self) -> GeneratorConfig {
        let covariate = if self.covariate_scale == 0.0 && self.covariate_offset == 0.0 {
            CovariateShift::Identity
        } else {
            CovariateShift::Random { scale_spread: self.covariate_scale, offset_spread: self.covariate_offset }
        };
        GeneratorConfig {
            n_silos: self.n_silos,
            per_silo_n: self.per_silo_n,
            feature_dim: self.feature_dim,
            shift: ShiftSpec { covariate, concept_magnitude: self.concept_magnitude, noise_std: self.noise_std },
            geo_layout: self.geo_layout,
            year_start: self.year_start,
            year_end: self.year_end,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDataConfig {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub feature_columns: Vec<String>,
    #[serde(default = "col_target")]
    pub target_column: String,
    #[serde(default = "col_year")]
    pub year_column: String,
    #[serde(default = "col_silo")]
    pub silo_column: String,
    #[serde(default = "col_lat")]
    pub lat_column: String,
    #[serde(default = "col_lon")]
    pub lon_column: String,
}

fn col_target() -> String {
    "target".into()
}
fn col_year() -> String {
    "year".into()
}
fn col_silo() -> String {
    "silo".into()
}
fn col_lat() -> String {
    "lat".into()
}
fn col_lon() -> String {
    "lon".into()
}

impl CsvDataConfig {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            feature_columns: self.feature_columns.clone(),
            target_column: self.target_column.clone(),
            year_column: self.year_column.clone(),
            silo_column: self.silo_column.clone(),
            lat_column: self.lat_column.clone(),
            lon_column: self.lon_column.clone(),
        }
    }

    /// The layout written by `generate`.
    pub fn standard(path: PathBuf, feature_dim: usize) -> Self {
        let s = CsvSchema::standard(feature_dim);
        Self {
            path,
            feature_columns: s.feature_columns,
            target_column: s.target_column,
            year_column: s.year_column,
            silo_column: s.silo_column,
            lat_column: s.lat_column,
            lon_column: s.lon_column,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    #[serde(default = "yes")]
    pub batch_norm: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: usize,
    #[serde(default = "one")]
    pub fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub decay_points: Vec<usize>,
    #[serde(default = "tenth")]
    pub decay_factor: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "yes")]
    pub early_stopping: bool,
    #[serde(default = "ten")]
    pub patience: usize,
}

fn tenth() -> f64 {
    0.1
}
fn ten() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub epsilon_budget: f64,
    #[serde(default)]
    pub accountant: AccountantKind,
    /// Per-silo overrides of any of the fields above.
    #[serde(default)]
    pub overrides: BTreeMap<String, PrivacyOverride>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyOverride {
    pub clip_norm: Option<f64>,
    pub noise_multiplier: Option<f64>,
    pub delta: Option<f64>,
    pub epsilon_budget: Option<f64>,
}

impl PrivacySection {
    pub fn spec(&self) -> PrivacySpec {
        PrivacySpec {
            clip_norm: self.clip_norm,
            noise_multiplier: self.noise_multiplier,
            delta: self.delta,
            epsilon_budget: self.epsilon_budget,
            accountant: self.accountant,
        }
    }

    pub fn policy(&self) -> PrivacyPolicy {
        let base = self.spec();
        let overrides = self
            .overrides
            .iter()
            .map(|(id, o)| {
                let s = PrivacySpec {
                    clip_norm: o.clip_norm.unwrap_or(base.clip_norm),
                    noise_multiplier: o.noise_multiplier.unwrap_or(base.noise_multiplier),
                    delta: o.delta.unwrap_or(base.delta),
                    epsilon_budget: o.epsilon_budget.unwrap_or(base.epsilon_budget),
                    accountant: base.accountant,
                };
                (id.clone(), s)
            })
            .collect();
        PrivacyPolicy { default: base, overrides }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub weighting: WeightingMode,
    #[serde(default)]
    pub rank_to_weight: RankToWeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "val_default")]
    pub val_fraction: f64,
}

fn val_default() -> f64 {
    crate::data::SplitPlan::new(0).val_fraction
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { val_fraction: val_default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "budgets_default")]
    pub budgets: Vec<f64>,
}

fn budgets_default() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0, 16.0]
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { budgets: budgets_default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Per-round federation checkpoints and ensemble manifests.
    #[serde(default)]
    pub checkpoints: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            err(if key == "." { "<root>" } else { &key }, inner.message().trim().to_owned())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, resolving a relative CSV path against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let DataConfig::Csv(c) = &mut cfg.data {
            if c.path.is_relative() {
                if let Some(dir) = path.parent() {
                    c.path = dir.join(&c.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(err("seeds", "at least one seed is required"));
        }
        if self.test_years.is_empty() {
            return Err(err("test_years", "at least one test year is required"));
        }
        if self.regimes.is_empty() {
            return Err(err("regimes", "at least one regime is required"));
        }
        if self.regimes.iter().any(|r| r.needs_privacy()) && self.privacy.is_none() {
            return Err(err("privacy", "LDP regimes require a [privacy] section"));
        }
        match &self.data {
            DataConfig::Synthetic(s) => {
                let g = s.generator();
                g.validate().map_err(|e| err("data", e.to_string()))?;
                for y in &self.test_years {
                    if *y <= s.year_start || *y > s.year_end {
                        return Err(err("test_years", format!("{y} has no preceding synthetic years")));
                    }
                }
            }
            DataConfig::Csv(c) => {
                if c.feature_columns.is_empty() {
                    return Err(err("data.feature_columns", "at least one feature column is required"));
                }
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(err("model.hidden", "layer widths must be positive"));
        }
        let f = &self.federation;
        if !(f.fraction > 0.0 && f.fraction <= 1.0) {
            return Err(err("federation.fraction", "must lie in (0, 1]"));
        }
        if f.batch_size == 0 {
            return Err(err("federation.batch_size", "must be positive"));
        }
        if !(f.lr > 0.0 && f.lr.is_finite()) {
            return Err(err("federation.lr", "must be positive"));
        }
        if !f.decay_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(err("federation.decay_points", "must be strictly increasing"));
        }
        if !(f.decay_factor > 0.0 && f.decay_factor <= 1.0) {
            return Err(err("federation.decay_factor", "must lie in (0, 1]"));
        }
        if let Some(p) = &self.privacy {
            p.spec().validate().map_err(|e| err("privacy", e.to_string()))?;
            for id in p.overrides.keys() {
                p.policy().for_silo(id).validate().map_err(|e| err(&format!("privacy.overrides.{id}"), e.to_string()))?;
            }
        }
        if !(self.split.val_fraction > 0.0 && self.split.val_fraction < 1.0) {
            return Err(err("split.val_fraction", "must lie in (0, 1)"));
        }
        if self.sweep.budgets.iter().any(|b| !(*b > 0.0)) || !self.sweep.budgets.windows(2).all(|w| w[0] < w[1]) {
            return Err(err("sweep.budgets", "budgets must be positive and strictly increasing"));
        }
        Ok(())
    }

    /// Generates or loads the silos described by `[data]`.
    pub fn load_silos(&self) -> crate::Result<Vec<SiloDataset>> {
        match &self.data {
            DataConfig::Synthetic(s) => generate_silos(&s.generator()),
            DataConfig::Csv(c) => {
                let (silos, report) = load_csv(&c.path, &c.schema())?;
                if report.dropped() > 0 {
                    log::warn!("{}: dropped {} malformed rows", c.path.display(), report.dropped());
                }
                Ok(silos)
            }
        }
    }

    /// Short stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            hidden_layers: self.model.hidden.iter().map(|&width| HiddenLayer { width, use_bn: self.model.batch_norm }).collect(),
            activation: Default::default(),
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        let f = &self.federation;
        FedConfig {
            rounds: f.rounds,
            fraction: f.fraction,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            lr_schedule: LrSchedule { base: f.lr, decay_points: f.decay_points.clone(), decay_factor: f.decay_factor },
            aggregation: f.aggregation,
            early_stopping: EarlyStopping { enabled: f.early_stopping, patience: f.patience },
            seed: 0,
            checkpoint_dir: None,
        }
    }

    pub fn settings(&self, input_dim: usize) -> Settings {
        Settings {
            model: self.model_spec(input_dim),
            fed: self.fed_config(),
            privacy: self.privacy.as_ref().map(PrivacySection::policy),
            weighting: RankWeighting { mode: self.ensemble.weighting, rank_to_weight: self.ensemble.rank_to_weight },
            norm: self.normalization,
            val_fraction: self.split.val_fraction,
        }
    }
}
