use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SiloDataset;
use crate::error::{Error, Result};

/// Variance floor for constant features.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Statistics computed inside each silo.
    #[default]
    PerSilo,
    /// Statistics pooled over every silo.
    Global,
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Population moments of `rows`; returns the indices of floored features.
    fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Self, Vec<usize>) {
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
            n += 1;
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut floored = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let v = s / n as f64;
                if v < VAR_FLOOR {
                    floored.push(j);
                }
                v.max(VAR_FLOOR).sqrt()
            })
            .collect();
        (Self { mean, std }, floored)
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn apply(&self, ds: &SiloDataset) -> Result<SiloDataset> {
        let mut out = ds.clone();
        for r in &mut out.records {
            if r.features.len() != self.mean.len() {
                return Err(Error::DimensionMismatch { expected: self.mean.len(), got: r.features.len() });
            }
            r.features = self.apply_row(&r.features);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mode: NormMode,
    pub per_silo: BTreeMap<String, FeatureStats>,
    /// Pooled statistics (global mode only).
    pub global: Option<FeatureStats>,
    pub warnings: Vec<String>,
}

impl NormalizationStats {
    pub fn for_silo(&self, silo_id: &str) -> Option<&FeatureStats> {
        self.per_silo.get(silo_id).or(self.global.as_ref())
    }

    /// Normalizes a split of a silo with that silo's statistics.
    pub fn apply(&self, ds: &SiloDataset) -> Result<SiloDataset> {
        self.for_silo(&ds.silo_id)
            .ok_or_else(|| Error::InvalidInput(format!("no normalization statistics for silo `{}`", ds.silo_id)))?
            .apply(ds)
    }
}

/// Z-scores the given (training) splits and returns the statistics used, so the
/// same transform can be applied to validation and test splits.
pub fn normalize_features(silos: &[SiloDataset], mode: NormMode) -> Result<(Vec<SiloDataset>, NormalizationStats)> {
    let dim = super::check_federation(silos)?;
    let mut warnings = Vec::new();
    let mut per_silo = BTreeMap::new();
    let mut global = None;
    let mut warn = |who: &str, floored: Vec<usize>| {
        for j in floored {
            let msg = format!("{who}: feature {j} has near-zero variance; floored at {VAR_FLOOR:e}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    };
    match mode {
        NormMode::PerSilo => {
            for s in silos.iter().filter(|s| !s.is_empty()) {
                let (st, floored) = FeatureStats::fit(s.records.iter().map(|r| r.features.as_slice()), dim);
                warn(&s.silo_id, floored);
                per_silo.insert(s.silo_id.clone(), st);
            }
        }
        NormMode::Global => {
            let rows = silos.iter().flat_map(|s| s.records.iter().map(|r| r.features.as_slice()));
            let (st, floored) = FeatureStats::fit(rows, dim);
            warn("global", floored);
            for s in silos {
                per_silo.insert(s.silo_id.clone(), st.clone());
            }
            global = Some(st);
        }
    }
    let stats = NormalizationStats { mode, per_silo, global, warnings };
    let out = silos.iter().map(|s| if s.is_empty() { Ok(s.clone()) } else { stats.apply(s) }).collect::<Result<_>>()?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GeoPoint, Record};

    fn silo(id: &str, rows: Vec<Vec<f64>>) -> SiloDataset {
        let records = rows.into_iter().map(|f| Record { features: f, target: 0.0, year: 0 }).collect();
        SiloDataset::new(id, GeoPoint::new(0.0, 0.0).unwrap(), records).unwrap()
    }

    #[test]
    fn constant_feature_is_floored_with_warning() {
        let s = silo("a", vec![vec![1.0, 2.0], vec![1.0, 4.0]]);
        let (out, st) = normalize_features(&[s], NormMode::PerSilo).unwrap();
        assert_eq!(st.warnings.len(), 1);
        assert!(out[0].records.iter().all(|r| r.features[0] == 0.0));
    }

    #[test]
    fn per_silo_vs_global() {
        let a = silo("a", vec![vec![0.0], vec![2.0]]);
        let b = silo("b", vec![vec![10.0], vec![14.0]]);
        let (_, st) = normalize_features(&[a.clone(), b.clone()], NormMode::PerSilo).unwrap();
        assert_ne!(st.per_silo["a"], st.per_silo["b"]);
        let (_, g) = normalize_features(&[a, b], NormMode::Global).unwrap();
        assert_eq!(g.per_silo["a"], g.per_silo["b"]);
        assert!(g.for_silo("unseen").is_some());
        assert!(st.for_silo("unseen").is_none());
    }
}
