//! Silo datasets: synthetic generation, CSV ingestion, year-forward splits,
//! histogram featurization and feature normalization.

mod generator;
mod histogram;
mod io;
mod normalize;
mod split;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::Batch;

pub use generator::{generate_silos, AffineMap, CovariateShift, GeneratorConfig, GeoLayout, ShiftSpec};
pub use histogram::{featurize_histogram, uniform_edges};
pub use io::{load_csv, write_csv, CsvSchema, LoadReport};
pub use normalize::{normalize_features, FeatureStats, NormMode, NormalizationStats};
pub use split::{split, SplitPlan};

const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidInput(format!("coordinates out of range: ({lat}, {lon})")));
        }
        Ok(Self { lat, lon })
    }

    /// Great-circle (haversine) distance in kilometres.
    pub fn distance_km(&self, other: &GeoPoint) -> f64 {
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon - self.lon).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub features: Vec<f64>,
    pub target: f64,
    pub year: i32,
}

/// One participant's data. Records never leave the silo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiloDataset {
    pub silo_id: String,
    pub location: GeoPoint,
    pub records: Vec<Record>,
}

impl SiloDataset {
    pub fn new(silo_id: impl Into<String>, location: GeoPoint, records: Vec<Record>) -> Result<Self> {
        let ds = Self { silo_id: silo_id.into(), location, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.records.first() {
            let dim = first.features.len();
            for r in &self.records {
                if r.features.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: r.features.len() });
                }
                if !r.target.is_finite() || !r.features.iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidInput(format!("non-finite value in silo `{}`", self.silo_id)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.features.len())
    }

    /// Empty dataset with the same id and location.
    pub fn empty_like(&self) -> Self {
        Self { silo_id: self.silo_id.clone(), location: self.location, records: Vec::new() }
    }

    pub fn targets(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.target).collect()
    }

    /// Flat row-major feature matrix.
    pub fn feature_matrix(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.features.iter().copied()).collect()
    }

    /// Batch made of the records at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let dim = self.feature_dim().ok_or_else(|| Error::EmptyData(self.silo_id.clone()))?;
        let mut features = Vec::with_capacity(indices.len() * dim);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(&self.records[i].features);
            targets.push(self.records[i].target);
        }
        Batch::new(features, targets, dim)
    }

    pub fn to_batch(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Checks silo ids are unique and all silos share one feature dimension.
pub fn check_federation(silos: &[SiloDataset]) -> Result<usize> {
    let mut ids = std::collections::BTreeSet::new();
    let mut dim = None;
    for s in silos {
        if !ids.insert(s.silo_id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate silo id `{}`", s.silo_id)));
        }
        match (dim, s.feature_dim()) {
            (None, d) => dim = d,
            (Some(a), Some(b)) if a != b => return Err(Error::DimensionMismatch { expected: a, got: b }),
            _ => {}
        }
    }
    dim.ok_or_else(|| Error::EmptyData("no records in any silo".into()))
}
