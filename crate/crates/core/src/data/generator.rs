//! Synthetic heterogeneous silos.
//!
//! Features are standard normal, pushed through a per-silo affine map
//! (covariate shift). The yield is a fixed nonlinear function of the observed
//! features,
//!
//! ```text
//! f(x) = β·x + γ·x₁x₂ + κ·sin(x₃)
//! y    = YIELD_BASE + YIELD_SCALE · f(x) + noise
//! ```
//!
//! whose coefficients are perturbed per silo (concept shift). Perturbations are
//! a Gaussian-process draw over silo locations, so nearby silos have similar
//! label functions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GeoPoint, Record, SiloDataset};
use crate::error::{Error, Result};
use crate::rng::{self, tag, StreamRng};

pub const YIELD_BASE: f64 = 45.0;
pub const YIELD_SCALE: f64 = 6.0;

const LAT_RANGE: (f64, f64) = (37.0, 45.0);
const LON_RANGE: (f64, f64) = (-100.0, -82.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoLayout {
    #[default]
    Grid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        Self { scale: vec![1.0; dim], offset: vec![0.0; dim] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateShift {
    Identity,
    /// Per-silo maps drawn from the silo's stream: `scale = exp(scale_spread·z)`,
    /// `offset = offset_spread·z`, with `z` standard normal per feature.
    Random { scale_spread: f64, offset_spread: f64 },
    /// One map per silo, in silo order.
    Explicit(Vec<AffineMap>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub covariate: CovariateShift,
    /// Standard deviation of the per-silo coefficient perturbation.
    pub concept_magnitude: f64,
    /// Observation noise, in yield units.
    pub noise_std: f64,
}

impl ShiftSpec {
    pub fn none(noise_std: f64) -> Self {
        Self { covariate: CovariateShift::Identity, concept_magnitude: 0.0, noise_std }
    }

    fn validate(&self, n_silos: usize, dim: usize) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.concept_magnitude) || !nonneg(self.noise_std) {
            return Err(Error::InvalidInput("concept magnitude and noise must be finite and ≥ 0".into()));
        }
        match &self.covariate {
            CovariateShift::Identity => {}
            CovariateShift::Random { scale_spread, offset_spread } => {
                if !nonneg(*scale_spread) || !nonneg(*offset_spread) {
                    return Err(Error::InvalidInput("covariate spreads must be finite and ≥ 0".into()));
                }
            }
            CovariateShift::Explicit(maps) => {
                if maps.len() != n_silos {
                    return Err(Error::InvalidInput(format!("{} affine maps for {n_silos} silos", maps.len())));
                }
                for m in maps {
                    if m.scale.len() != dim || m.offset.len() != dim {
                        return Err(Error::DimensionMismatch { expected: dim, got: m.scale.len() });
                    }
                    if !m.scale.iter().all(|s| s.is_finite() && *s > 0.0) || !m.offset.iter().all(|o| o.is_finite()) {
                        return Err(Error::InvalidInput("affine scales must be positive and finite".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_silos: usize,
    pub per_silo_n: usize,
    pub feature_dim: usize,
    pub shift: ShiftSpec,
    pub geo_layout: GeoLayout,
    pub year_start: i32,
    pub year_end: i32,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_silos < 2 {
            return Err(Error::InvalidInput("need at least 2 silos".into()));
        }
        if self.per_silo_n < 10 {
            return Err(Error::InvalidInput("need at least 10 records per silo".into()));
        }
        if self.feature_dim < 3 {
            return Err(Error::InvalidInput("feature_dim must be at least 3".into()));
        }
        if self.year_end < self.year_start {
            return Err(Error::InvalidInput("year_end precedes year_start".into()));
        }
        self.shift.validate(self.n_silos, self.feature_dim)
    }
}

/// Coefficients of the label function for one silo.
#[derive(Debug, Clone, PartialEq)]
struct LabelFn {
    linear: Vec<f64>,
    interaction: f64,
    periodic: f64,
}

impl LabelFn {
    fn eval(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(x).map(|(b, v)| b * v).sum();
        lin + self.interaction * x[0] * x[1] + self.periodic * x[2].sin()
    }
}

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

fn silo_ids(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(2);
    (0..n).map(|i| format!("silo_{i:0width$}")).collect()
}

fn layout_points(n: usize, layout: GeoLayout, seed: u64) -> Vec<GeoPoint> {
    let (lat0, lat1) = LAT_RANGE;
    let (lon0, lon1) = LON_RANGE;
    match layout {
        GeoLayout::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            let rows = n.div_ceil(cols);
            (0..n)
                .map(|i| {
                    let (r, c) = (i / cols, i % cols);
                    GeoPoint {
                        lat: lat0 + (r as f64 + 0.5) * (lat1 - lat0) / rows as f64,
                        lon: lon0 + (c as f64 + 0.5) * (lon1 - lon0) / cols as f64,
                    }
                })
                .collect()
        }
        GeoLayout::Random => {
            let mut r = rng::substream(seed, &[tag::LAYOUT]);
            (0..n)
                .map(|_| GeoPoint { lat: r.random_range(lat0..lat1), lon: r.random_range(lon0..lon1) })
                .collect()
        }
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix (row-major).
fn cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = (a[i * n + i] - s).max(1e-12).sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    l
}

/// Unit-variance Gaussian-process draws over `points`, one column per coefficient.
fn spatial_perturbations(points: &[GeoPoint], n_coef: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut diameter = 0.0f64;
    for a in points {
        for b in points {
            diameter = diameter.max(a.distance_km(b));
        }
    }
    let length = (diameter / 2.0).max(1.0);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = points[i].distance_km(&points[j]) / length;
            k[i * n + j] = (-0.5 * d * d).exp();
        }
        k[i * n + i] += 1e-6;
    }
    let l = cholesky(&k, n);
    let mut out = vec![vec![0.0; n_coef]; n];
    for c in 0..n_coef {
        let u: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        for i in 0..n {
            out[i][c] = (0..=i).map(|j| l[i * n + j] * u[j]).sum();
        }
    }
    out
}

pub fn generate_silos(cfg: &GeneratorConfig) -> Result<Vec<SiloDataset>> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let mut fed = rng::substream(cfg.seed, &[tag::FEDERATION_DATA]);
    let sign = |r: &mut StreamRng| if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let base = LabelFn {
        linear: (0..d).map(|_| normal(&mut fed) / (d as f64).sqrt()).collect(),
        interaction: sign(&mut fed) * fed.random_range(0.7..1.2),
        periodic: sign(&mut fed) * fed.random_range(1.0..1.5),
    };
    let points = layout_points(cfg.n_silos, cfg.geo_layout, cfg.seed);
    let perturb = spatial_perturbations(&points, d + 2, &mut fed);
    let years = (cfg.year_end - cfg.year_start + 1) as usize;
    let m = cfg.shift.concept_magnitude;

    silo_ids(cfg.n_silos)
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let mut r = rng::substream(cfg.seed, &[tag::SILO_DATA, rng::hash_str(&id)]);
            let map = match &cfg.shift.covariate {
                CovariateShift::Identity => AffineMap::identity(d),
                CovariateShift::Random { scale_spread, offset_spread } => AffineMap {
                    scale: (0..d).map(|_| (scale_spread * normal(&mut r)).exp()).collect(),
                    offset: (0..d).map(|_| offset_spread * normal(&mut r)).collect(),
                },
                CovariateShift::Explicit(maps) => maps[i].clone(),
            };
            let p = &perturb[i];
            let label = LabelFn {
                linear: base.linear.iter().zip(p).map(|(b, e)| b + m * e).collect(),
                interaction: base.interaction + m * p[d],
                periodic: base.periodic + m * p[d + 1],
            };
            let records = (0..cfg.per_silo_n)
                .map(|k| {
                    let x: Vec<f64> =
                        (0..d).map(|j| map.scale[j] * normal(&mut r) + map.offset[j]).collect();
                    let y = YIELD_BASE + YIELD_SCALE * label.eval(&x) + cfg.shift.noise_std * normal(&mut r);
                    Record { features: x, target: y, year: cfg.year_start + (k % years) as i32 }
                })
                .collect();
            SiloDataset::new(id, points[i], records)
        })
        .collect()
}
