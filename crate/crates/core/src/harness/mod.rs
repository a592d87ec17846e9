//! Experiment runner: the six training regimes, the regime × year × seed
//! matrix, the privacy-budget sweep and the command-line front end.

pub mod cli;
mod config;
mod matrix;
mod regime;
mod sweep;

pub use config::{
    ConfigError, CsvDataConfig, DataConfig, EnsembleConfig, ExperimentConfig, FederationSection, ModelSection,
    OutputConfig, PrivacyOverride, PrivacySection, SplitSection, SweepSection, SyntheticDataConfig,
};
pub use matrix::{run_matrix, CellResult, CellStatus, ExperimentReport, MatrixOptions};
pub use regime::{run_regime, Regime, RegimeOutcome, Settings};
pub use sweep::{sweep_epsilon, write_curve_csv, CurvePoint};

/// Formats with 6 significant digits, switching to exponent notation for
/// very large or very small magnitudes.
pub fn format_sig(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // formatting may round up into the next decade (e.g. 9.999995 -> 10.00000)
        let rounded_up = s.parse::<f64>().is_ok_and(|r| r.abs() >= 10f64.powi(exp + 1));
        let s = if rounded_up && decimals > 0 {
            format!("{x:.prec$}", prec = decimals - 1)
        } else {
            s
        };
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
