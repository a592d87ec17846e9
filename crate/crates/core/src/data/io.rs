//! CSV ingestion and export.
//!
//! One header row, comma separated. Every record row carries its silo id and
//! the silo's coordinates; rows with a missing or non-finite field are dropped
//! and counted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GeoPoint, Record, SiloDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub target_column: String,
    pub year_column: String,
    pub silo_column: String,
    pub lat_column: String,
    pub lon_column: String,
}

impl CsvSchema {
    /// Schema written by [`write_csv`]: `silo,lat,lon,year,target,x0..x{dim-1}`.
    pub fn standard(feature_dim: usize) -> Self {
        Self {
            feature_columns: (0..feature_dim).map(|j| format!("x{j}")).collect(),
            target_column: "target".into(),
            year_column: "year".into(),
            silo_column: "silo".into(),
            lat_column: "lat".into(),
            lon_column: "lon".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    /// silo id -> (kept, dropped)
    pub per_silo: BTreeMap<String, (usize, usize)>,
    /// Rows dropped before a silo id could be read.
    pub unattributed_dropped: usize,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.unattributed_dropped + self.per_silo.values().map(|(_, d)| d).sum::<usize>()
    }

    pub fn kept(&self) -> usize {
        self.per_silo.values().map(|(k, _)| k).sum()
    }
}

fn parse_finite(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<(Vec<SiloDataset>, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in {}", path.display())))
    };
    let features = schema.feature_columns.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let (target, year, silo, lat, lon) = (
        col(&schema.target_column)?,
        col(&schema.year_column)?,
        col(&schema.silo_column)?,
        col(&schema.lat_column)?,
        col(&schema.lon_column)?,
    );
    if features.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut report = LoadReport::default();
    let mut silos: BTreeMap<String, SiloDataset> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let id = field(silo).trim();
        if id.is_empty() {
            report.unattributed_dropped += 1;
            continue;
        }
        let entry = report.per_silo.entry(id.to_owned()).or_default();
        let parsed = (|| {
            let feats = features.iter().map(|&i| parse_finite(field(i))).collect::<Option<Vec<_>>>()?;
            let y = parse_finite(field(target))?;
            let yr = field(year).trim().parse::<i32>().ok()?;
            let loc = GeoPoint::new(parse_finite(field(lat))?, parse_finite(field(lon))?).ok()?;
            Some((Record { features: feats, target: y, year: yr }, loc))
        })();
        match parsed {
            Some((rec, loc)) => {
                entry.0 += 1;
                silos
                    .entry(id.to_owned())
                    .or_insert_with(|| SiloDataset { silo_id: id.to_owned(), location: loc, records: Vec::new() })
                    .records
                    .push(rec);
            }
            None => entry.1 += 1,
        }
    }
    for (id, (kept, dropped)) in &report.per_silo {
        log::info!(target: "silofl::load", "silo={id} kept={kept} dropped={dropped}");
    }
    if report.unattributed_dropped > 0 {
        log::info!(target: "silofl::load", "rows without silo id dropped={}", report.unattributed_dropped);
    }
    if silos.is_empty() {
        return Err(Error::EmptyData(format!("no usable rows in {}", path.display())));
    }
    Ok((silos.into_values().collect(), report))
}

/// Writes silos with [`CsvSchema::standard`]. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv(path: &Path, silos: &[SiloDataset]) -> Result<()> {
    let dim = super::check_federation(silos)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let schema = CsvSchema::standard(dim);
    let mut header = vec!["silo", "lat", "lon", "year", "target"];
    header.extend(schema.feature_columns.iter().map(String::as_str));
    w.write_record(&header)?;
    for s in silos {
        for r in &s.records {
            let mut row = vec![
                s.silo_id.clone(),
                s.location.lat.to_string(),
                s.location.lon.to_string(),
                r.year.to_string(),
                r.target.to_string(),
            ];
            row.extend(r.features.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
