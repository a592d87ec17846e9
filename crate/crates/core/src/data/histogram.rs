use crate::error::{Error, Result};

/// Per-band normalized histograms, concatenated band-major.
///
/// `raster[band]` holds that band's pixel values. Bins are half-open
/// `[edge_i, edge_{i+1})` except the last, which is closed. Pixels outside the
/// edge range are counted in the nearest end bin.
pub fn featurize_histogram(raster: &[Vec<f64>], bin_edges: &[f64]) -> Result<Vec<f64>> {
    if bin_edges.len() < 3 {
        return Err(Error::InvalidInput("need at least 2 bins".into()));
    }
    if !bin_edges.windows(2).all(|w| w[0] < w[1]) || !bin_edges.iter().all(|e| e.is_finite()) {
        return Err(Error::InvalidInput("bin edges must be finite and strictly increasing".into()));
    }
    let bins = bin_edges.len() - 1;
    let mut out = Vec::with_capacity(bins * raster.len());
    for (b, band) in raster.iter().enumerate() {
        if band.is_empty() {
            return Err(Error::InvalidInput(format!("band {b} has no pixels")));
        }
        let mut counts = vec![0usize; bins];
        for &px in band {
            if px.is_nan() {
                return Err(Error::InvalidInput(format!("NaN pixel in band {b}")));
            }
            // index of the last edge ≤ px, clamped into [0, bins)
            let idx = bin_edges.partition_point(|&e| e <= px).saturating_sub(1).min(bins - 1);
            counts[idx] += 1;
        }
        let total = band.len() as f64;
        out.extend(counts.iter().map(|&c| c as f64 / total));
    }
    Ok(out)
}

/// `bins + 1` evenly spaced edges over `[lo, hi]`.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass() {
        let h = featurize_histogram(&[vec![1.5; 20]], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(h, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn edges_and_clamping() {
        let edges = [0.0, 1.0, 2.0];
        let h = featurize_histogram(&[vec![-5.0, 0.0, 1.0, 2.0, 9.0]], &edges).unwrap();
        assert_eq!(h, vec![0.4, 0.6]);
    }

    #[test]
    fn band_major_and_normalized() {
        let raster = vec![vec![0.1, 0.2, 0.9], vec![0.7, 0.8, 0.95, 0.99]];
        let h = featurize_histogram(&raster, &uniform_edges(0.0, 1.0, 4)).unwrap();
        assert_eq!(h.len(), 8);
        for band in h.chunks(4) {
            assert!((band.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(h[3], 1.0 / 3.0);
        assert_eq!(h[6], 0.25);
        assert_eq!(h[7], 0.75);
    }

    #[test]
    fn invalid_edges() {
        assert!(featurize_histogram(&[vec![1.0]], &[0.0, 1.0]).is_err());
        assert!(featurize_histogram(&[vec![1.0]], &[0.0, 2.0, 1.0]).is_err());
        assert!(featurize_histogram(&[vec![f64::NAN]], &[0.0, 1.0, 2.0]).is_err());
    }
}
